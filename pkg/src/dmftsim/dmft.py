"""Monte Carlo integration of the discrete DMFT system for
spectral-initialized gradient descent.

Two scalar probability spaces are simulated by K paths each: the eta side
carries (z, w*, w^0..w^t) and per-path response recursions; the theta side
carries (theta*, u_diamond, u^0..u^t).  Gaussian coordinates are generated
through an incrementally grown Cholesky factor applied to per-path standard
normal innovations, so earlier coordinates never change as the horizon grows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .model import LinkFunction, LossModel, PreProcess, ScalarDist, gaussian_dist
from .spectral import LambdaStarSolution

Array = np.ndarray

JITTER_LADDER = (1e-8, 1e-6)


def fmean(x: Array) -> float:
    """Fixed-order compensated mean (math.fsum); reduction order never
    depends on thread count."""
    return math.fsum(x) / x.size


@dataclass(frozen=True)
class MonteCarloSpec:
    K: int
    seed: int = 0
    jitter: float = 1e-10

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")


@dataclass(frozen=True)
class DmftLaw:
    """Sample pools of the DMFT law at horizon m."""

    theta_samples: Array   # (K, m+2): theta^0..theta^m, theta*
    eta_samples: Array     # (K, m+3): eta^0..eta^m, w*, z
    u_diamond: Array       # (K,)
    u_samples: Array       # (K, m): u^0..u^{m-1}
    overlap_a: float


class IncrementalGaussian:
    """Jointly consistent Gaussian coordinates grown one at a time.

    Coordinate j equals sum_k L[j, k] xi_k for a lower-triangular L grown row
    by row from the target covariance; the xi_k are per-path standard normal
    innovations supplied at creation of coordinate k.
    """

    def __init__(self, K: int, base_jitter: float, label: str):
        self.K = K
        self.base_jitter = base_jitter
        self.label = label
        self.rows: list[Array] = []          # rows of L
        self.cov: list[Array] = []           # rows of the target covariance
        self.innovations: list[Array] = []   # (K,) standard normals
        self.values: list[Array] = []        # (K,) realized coordinates
        self.min_eig_before_jitter: list[float] = []

    @property
    def dim(self) -> int:
        return len(self.rows)

    def add(self, cov_with_prev: Array, variance: float, innovation: Array) -> Array:
        """Append a coordinate with given covariances against the existing
        ones and marginal variance; returns its (K,) realization."""
        idx = self.dim
        c = np.asarray(cov_with_prev, dtype=float)
        if c.shape != (idx,):
            raise ValueError(f"covariance vector must have length {idx}")
        # PSD diagnostic on the full covariance block, before any jitter.
        full = np.empty((idx + 1, idx + 1))
        for j, row in enumerate(self.cov):
            full[j, : j + 1] = row
            full[: j + 1, j] = row
        full[idx, :idx] = c
        full[:idx, idx] = c
        full[idx, idx] = variance
        self.min_eig_before_jitter.append(
            float(scipy.linalg.eigvalsh(full)[0]) if idx > 0 else float(variance))

        if idx == 0:
            l_part = np.zeros(0)
            dsq = variance
        else:
            Lmat = np.zeros((idx, idx))
            for j, row in enumerate(self.rows):
                Lmat[j, : j + 1] = row
            l_part = scipy.linalg.solve_triangular(Lmat, c, lower=True)
            dsq = variance - float(l_part @ l_part)
        if dsq > 0.0:
            jitter = 0.0
        elif dsq + self.base_jitter > 0.0:
            jitter = self.base_jitter
        else:
            for jit in JITTER_LADDER:
                if dsq + jit > 0.0:
                    jitter = jit
                    warnings.warn(
                        f"{self.label}: escalated Cholesky jitter to {jit:g} "
                        f"for coordinate {idx} (residual variance {dsq:.3e})",
                        RuntimeWarning,
                    )
                    break
            else:
                raise np.linalg.LinAlgError(
                    f"{self.label}: covariance block not factorizable at "
                    f"coordinate {idx} even with jitter 1e-6 "
                    f"(residual variance {dsq:.3e})")
        diag = np.sqrt(dsq + jitter)
        value = diag * innovation
        for k in range(idx):
            if l_part[k] != 0.0:
                value = value + l_part[k] * self.innovations[k]
        self.rows.append(np.append(l_part, diag))
        self.cov.append(np.append(c, variance))
        self.innovations.append(np.asarray(innovation, dtype=float))
        self.values.append(value)
        return value


class DmftState:
    """Kernels, responses, and Monte Carlo path pools of the DMFT system."""

    def __init__(
        self,
        loss: LossModel,
        link: LinkFunction,
        noise: ScalarDist,
        pre: PreProcess,
        lam_star: float,
        overlap_a: float,
        delta: float,
        gamma: float,
        lambda_ridge: float,
        mc: MonteCarloSpec,
        signal: ScalarDist,
        independent_init: bool = False,
    ):
        self.loss = loss
        self.link = link
        self.pre = pre
        self.lam_star = float(lam_star)
        self.a = float(overlap_a)
        self.delta = float(delta)
        self.gamma = float(gamma)
        self.lambda_ridge = float(lambda_ridge)
        self.K = mc.K
        self.seed = mc.seed
        self.independent_init = independent_init
        self.rng = np.random.default_rng(mc.seed)

        K = self.K
        # Draw order is fixed: z, theta*, slot-0 innovation.  Later
        # innovations are drawn one column per step so that runs to different
        # horizons share an identical stream prefix.
        self.z = np.asarray(noise.sample(self.rng, K), dtype=float)
        theta_star = np.asarray(signal.sample(self.rng, K), dtype=float)
        if abs(signal.second_moment - 1.0) > 1e-12:
            warnings.warn(
                "signal second moment != 1; DMFT normalization assumes "
                "E[(theta*)^2] = 1", RuntimeWarning)
        # pin the C_theta(*,*) = 1 invariant exactly on the sample pool
        self.theta_star = theta_star / np.sqrt(fmean(theta_star**2))
        slot0 = self.rng.standard_normal(K)
        # In-sample orthogonalization of the slot-0 draw against theta*: the
        # t = 0 kernels are exact constants (C(0,0) = 1, C(0,*) = a), and the
        # sampling covariance of (w*, w^0, ...) is the sample Gram matrix of
        # the theta pool, so the pool must realize those constants exactly or
        # the mixed matrix loses positive semi-definiteness at MC-noise scale.
        orth = slot0 - fmean(slot0 * self.theta_star) * self.theta_star
        unit = orth / np.sqrt(fmean(orth**2))

        self.u_proc = IncrementalGaussian(K, mc.jitter, "u-process")
        self.w_proc = IncrementalGaussian(K, mc.jitter, "w-process")

        if independent_init:
            theta0 = unit.copy()
            c00 = 1.0
            c0star = 0.0
            u_dia = self.u_proc.add(np.zeros(0), 1.0, unit)  # inert coordinate
        else:
            dia_var = 1.0 - self.a**2
            u_dia = self.u_proc.add(np.zeros(0), dia_var, unit)
            theta0 = self.a * self.theta_star + u_dia
            c00 = 1.0
            c0star = self.a
        self.u_dia = u_dia
        self.thetas: list[Array] = [theta0]

        cap = 1
        self.C_theta = np.full((cap, cap), np.nan)
        self.C_theta[0, 0] = c00
        self.c_theta_star = [c0star]
        self.C_star_star = 1.0

        # deterministic theta responses; R_theta == r_theta
        self.r_theta: dict[int, Array] = {0: np.zeros(0)}
        self.r_theta_dia: list[float] = [0.0 if independent_init else 1.0]

        # eta side, filled by step_eta
        self.etas: list[Array] = []
        self.ell_vals: list[Array] = []
        self.d1_vals: list[Array] = []
        self.r_eta_ts: dict[int, Array] = {}
        self.r_eta_star: list[Array] = []
        self.r_eta_dia: list[Array] = []
        self.r_eta_dd: list[Array] = []

        self.C_eta = np.zeros((0, 0))
        self.c_eta_dia: list[float] = []
        self.C_eta_dia_dia = 1.0 - self.a**2
        self.R_eta: dict[int, Array] = {}
        self.R_eta_star: list[float] = []
        self.R_eta_dia: list[float] = []
        self.R_eta_dd: list[float] = []
        self.Gamma: list[float] = []      # delta * E[d1ell(eta^t, w*, z)]
        self.e_d1: list[float] = []       # E[d1ell(eta^t, w*, z)]
        self.e_d1_T_t0: Optional[float] = None  # E[d1ell(eta^0,..)(1 + T(y))]

        self.t_eta = -1     # last t with eta^t computed
        self.t_theta = 0    # last t with theta^t computed

        # per-path constants created in step_eta(0)
        self.w_star: Optional[Array] = None
        self.y: Optional[Array] = None
        self.Ty: Optional[Array] = None
        self.Ts_y: Optional[Array] = None
        self.dd_source: Optional[Array] = None  # T'(y) phi'(w*, z) w^0

    # -- helpers ----------------------------------------------------------

    def T_map(self, y: Array) -> Array:
        ts = np.asarray(self.pre.Ts(y), dtype=float)
        return ts / (self.lam_star - ts)

    def T_map_prime(self, y: Array) -> Array:
        ts = np.asarray(self.pre.Ts(y), dtype=float)
        ts1 = np.asarray(self.pre.Ts1(y), dtype=float)
        return self.lam_star * ts1 / (self.lam_star - ts) ** 2

    def _grow_C_theta(self, new_dim: int) -> None:
        old = self.C_theta
        if old.shape[0] >= new_dim:
            return
        C = np.full((new_dim, new_dim), np.nan)
        C[: old.shape[0], : old.shape[1]] = old
        self.C_theta = C

    # -- eta step ----------------------------------------------------------

    def step_eta(self) -> None:
        """Compute eta^t and all eta-side kernels at t = t_eta + 1."""
        t = self.t_eta + 1
        if t > self.t_theta:
            raise RuntimeError("theta side not advanced far enough")
        K = self.K
        ell, d1ell, d2ell = self.loss.ell, self.loss.d1ell, self.loss.d2ell

        if t == 0:
            w_star = self.w_proc.add(np.zeros(0), self.C_star_star,
                                     self.rng.standard_normal(K))
            self.w_star = w_star
            self.y = np.asarray(self.link.eval(w_star, self.z), dtype=float)
            self.Ty = self.T_map(self.y)
            self.Ts_y = np.asarray(self.pre.Ts(self.y), dtype=float)
        # covariance of w^t against (w*, w^0..w^{t-1}), then variance C_theta(t,t)
        cov = np.empty(t + 1)
        cov[0] = self.c_theta_star[t]
        for s in range(t):
            cov[s + 1] = self.C_theta[t, s]
        w_t = self.w_proc.add(cov, self.C_theta[t, t], self.rng.standard_normal(K))

        if t == 0:
            self.dd_source = (
                self.T_map_prime(self.y)
                * np.asarray(self.link.du(self.w_star, self.z), dtype=float)
                * w_t
            )

        R_row = self.r_theta[t]
        eta_t = w_t + self.Ty * self.w_proc.values[1] * self.r_theta_dia[t]
        for s in range(t):
            if R_row[s] != 0.0:
                eta_t = eta_t - self.ell_vals[s] * R_row[s]
        self.etas.append(eta_t)

        ell_t = np.asarray(ell(eta_t, self.w_star, self.z), dtype=float)
        d1_t = np.asarray(d1ell(eta_t, self.w_star, self.z), dtype=float)
        d2_t = np.asarray(d2ell(eta_t, self.w_star, self.z), dtype=float)
        self.ell_vals.append(ell_t)
        self.d1_vals.append(d1_t)

        # per-path responses
        if t > 0:
            acc = np.zeros((K, t))
            for r in range(1, t):
                if R_row[r] != 0.0:
                    acc[:, :r] -= R_row[r] * self.r_eta_ts[r]
            for s in range(t):
                acc[:, s] -= self.d1_vals[s] * R_row[s]
            self.r_eta_ts[t] = d1_t[:, None] * acc
        else:
            self.r_eta_ts[0] = np.zeros((K, 0))

        acc_star = np.zeros(K)
        acc_dia = self.Ty * self.r_theta_dia[t]
        acc_dd = self.dd_source * self.r_theta_dia[t]
        for r in range(t):
            if R_row[r] != 0.0:
                acc_star -= self.r_eta_star[r] * R_row[r]
                acc_dia = acc_dia - self.r_eta_dia[r] * R_row[r]
                acc_dd = acc_dd - self.r_eta_dd[r] * R_row[r]
        self.r_eta_star.append(d1_t * acc_star + d2_t)
        self.r_eta_dia.append(d1_t * acc_dia)
        self.r_eta_dd.append(d1_t * acc_dd)

        # kernels
        newC = np.zeros((t + 1, t + 1))
        newC[:t, :t] = self.C_eta
        for r in range(t + 1):
            v = self.delta * fmean(ell_t * self.ell_vals[r])
            newC[t, r] = v
            newC[r, t] = v
        self.C_eta = newC
        if self.independent_init:
            self.c_eta_dia.append(0.0)
        else:
            self.c_eta_dia.append(
                -(self.delta / self.lam_star) * fmean(ell_t * self.Ts_y * self.etas[0]))
        self.R_eta[t] = np.array(
            [self.delta * fmean(self.r_eta_ts[t][:, s]) for s in range(t)])
        self.R_eta_star.append(self.delta * fmean(self.r_eta_star[t]))
        self.R_eta_dia.append(self.delta * fmean(self.r_eta_dia[t]))
        self.R_eta_dd.append(self.delta * fmean(self.r_eta_dd[t]))
        e1 = fmean(d1_t)
        self.e_d1.append(e1)
        self.Gamma.append(self.delta * e1)
        if t == 0:
            self.e_d1_T_t0 = fmean(d1_t * (1.0 + self.Ty))
        self.t_eta = t

    # -- theta step --------------------------------------------------------

    def step_theta(self) -> None:
        """Compute theta^{t+1} and theta-side kernels; needs eta side at t."""
        t = self.t_theta
        if self.t_eta < t:
            raise RuntimeError("eta side not advanced far enough")
        K = self.K
        gamma, lam = self.gamma, self.lambda_ridge

        # extend (u_dia, u^0..u^{t-1}) by u^t
        cov = np.empty(t + 1)
        cov[0] = self.c_eta_dia[t]
        for s in range(t):
            cov[s + 1] = self.C_eta[t, s]
        u_t = self.u_proc.add(cov, self.C_eta[t, t], self.rng.standard_normal(K))

        R_row = self.R_eta[t]
        drift = -(lam + self.Gamma[t]) * self.thetas[t] + u_t
        for s in range(t):
            if R_row[s] != 0.0:
                drift = drift - R_row[s] * self.thetas[s]
        drift = drift - self.R_eta_dia[t] * self.thetas[0]
        drift = drift - (self.R_eta_star[t] + self.R_eta_dd[t]) * self.theta_star
        theta_next = self.thetas[t] + gamma * drift
        self.thetas.append(theta_next)

        # deterministic responses
        fac = 1.0 - gamma * lam - gamma * self.Gamma[t]
        new_r = np.empty(t + 1)
        new_r[:t] = fac * self.r_theta[t]
        for r in range(1, t):
            if R_row[r] != 0.0:
                new_r[:r] -= gamma * R_row[r] * self.r_theta[r]
        new_r[t] = gamma
        self.r_theta[t + 1] = new_r
        dia = fac * self.r_theta_dia[t] - gamma * self.R_eta_dia[t]
        for r in range(t):
            if R_row[r] != 0.0:
                dia -= gamma * R_row[r] * self.r_theta_dia[r]
        self.r_theta_dia.append(dia)

        # correlation kernels
        self._grow_C_theta(t + 2)
        for r in range(t + 2):
            v = fmean(theta_next * self.thetas[r])
            self.C_theta[t + 1, r] = v
            self.C_theta[r, t + 1] = v
        self.c_theta_star.append(fmean(theta_next * self.theta_star))
        self.t_theta = t + 1

    # -- views -------------------------------------------------------------

    @property
    def horizon(self) -> int:
        return self.t_eta

    def R_theta(self, t: int, s: int) -> float:
        return float(self.r_theta[t][s])

    def R_theta_matrix(self) -> Array:
        """Lower-triangular R_theta(t, s) for 0 <= s < t <= t_theta."""
        n = self.t_theta + 1
        M = np.zeros((n, n))
        for t in range(n):
            M[t, :t] = self.r_theta[t]
        return M

    def R_eta_matrix(self) -> Array:
        n = self.t_eta + 1
        M = np.zeros((n, n))
        for t in range(n):
            M[t, :t] = self.R_eta[t]
        return M

    def law(self) -> DmftLaw:
        m = self.t_eta
        theta_samples = np.column_stack(self.thetas[: m + 1] + [self.theta_star])
        eta_samples = np.column_stack(self.etas[: m + 1] + [self.w_star, self.z])
        u_cols = self.u_proc.values[1 : m + 1]
        u_samples = (np.column_stack(u_cols) if u_cols
                     else np.zeros((self.K, 0)))
        return DmftLaw(
            theta_samples=theta_samples,
            eta_samples=eta_samples,
            u_diamond=self.u_proc.values[0].copy(),
            u_samples=u_samples,
            overlap_a=self.a,
        )


def init_dmft(
    loss: LossModel,
    link: LinkFunction,
    noise: ScalarDist,
    pre: PreProcess,
    lam_sol: LambdaStarSolution,
    delta: float,
    gamma: float,
    lambda_ridge: float,
    mc: MonteCarloSpec,
    signal: Optional[ScalarDist] = None,
    independent_init: bool = False,
) -> DmftState:
    """Seed the theta pool with theta^0 = a theta* + u_diamond and attach the
    map T(u) = Ts(u) / (lambda* - Ts(u))."""
    if not independent_init:
        if not (0.0 < lam_sol.overlap_a <= 1.0):
            raise ValueError(
                f"spectral DMFT needs overlap a in (0, 1], got {lam_sol.overlap_a}; "
                "the alignment channel is undefined without weak recovery")
        if lam_sol.overlap_a < 0.05:
            warnings.warn(
                f"overlap a={lam_sol.overlap_a:.3g} < 0.05: Monte Carlo error in "
                "C_eta(t, dia) may dominate", RuntimeWarning)
    if mc.K < 1000:
        warnings.warn(f"K={mc.K} < 1000 is small for kernel estimation",
                      RuntimeWarning)
    return DmftState(
        loss=loss,
        link=link,
        noise=noise,
        pre=pre,
        lam_star=lam_sol.lambda_star,
        overlap_a=lam_sol.overlap_a,
        delta=delta,
        gamma=gamma,
        lambda_ridge=lambda_ridge,
        mc=mc,
        signal=signal or gaussian_dist(1.0),
        independent_init=independent_init,
    )


def step_eta(state: DmftState) -> DmftState:
    """Advance the eta side by one time step (functional alias)."""
    state.step_eta()
    return state


def step_theta(state: DmftState) -> DmftState:
    """Advance the theta side by one time step (functional alias)."""
    state.step_theta()
    return state


def run_dmft(state: DmftState, m: int) -> DmftLaw:
    """Alternate eta and theta updates in the canonical order up to horizon m."""
    if m < 0:
        raise ValueError("horizon m must be >= 0")
    while state.t_eta < m:
        t = state.t_eta + 1
        if state.t_theta < t:
            state.step_theta()
        state.step_eta()
    return state.law()


# ---------------------------------------------------------------------------
# Long-time diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TtiReport:
    lags: dict                # lag s -> array of R_theta(t+s, t) over t
    dia_theta: Array          # |R_theta(t, dia)|
    dia_eta: Array            # |R_eta(t, dia)|
    dd_eta: Array             # |R_eta(t, dd)|
    fit_base_t: int
    fit_slope: float
    fit_r2: float
    tti_dev: dict             # lag s -> max |R(t+s,t) - R(t'+s,t')| over window
    window: tuple


def tti_diagnostics(state: DmftState, max_lag: int = 5,
                    window: Optional[tuple] = None) -> TtiReport:
    """Time-translation-invariance and decay diagnostics of the responses."""
    m = state.t_eta
    if m < 10:
        raise ValueError("need horizon >= 10 for TTI diagnostics")
    lags = {}
    for s in range(1, max_lag + 1):
        lags[s] = np.array([state.R_theta(t + s, t) for t in range(0, m - s + 1)])
    if window is None:
        window = (int(0.75 * m), m - 1)
    lo, hi = window
    tti_dev = {}
    for s in range(1, max_lag + 1):
        vals = [state.R_theta(t + s, t) for t in range(lo, hi + 1) if t + s <= m]
        tti_dev[s] = float(np.max(vals) - np.min(vals)) if len(vals) > 1 else 0.0

    fit_base = max(0, m - 10)
    ss = np.arange(1, m - fit_base + 1)
    vals = np.abs([state.R_theta(fit_base + s, fit_base) for s in ss])
    good = vals > 0
    slope, r2 = np.nan, np.nan
    if np.sum(good) >= 3:
        x = ss[good].astype(float)
        ylog = np.log(vals[good])
        A = np.column_stack([x, np.ones_like(x)])
        coef, *_ = np.linalg.lstsq(A, ylog, rcond=None)
        pred = A @ coef
        ssr = float(np.sum((ylog - pred) ** 2))
        sst = float(np.sum((ylog - np.mean(ylog)) ** 2))
        slope = float(coef[0])
        r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    return TtiReport(
        lags=lags,
        dia_theta=np.abs(np.array(state.r_theta_dia[: m + 1])),
        dia_eta=np.abs(np.array(state.R_eta_dia)),
        dd_eta=np.abs(np.array(state.R_eta_dd)),
        fit_base_t=fit_base,
        fit_slope=slope,
        fit_r2=r2,
        tti_dev=tti_dev,
        window=(lo, hi),
    )
