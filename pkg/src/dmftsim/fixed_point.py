"""Long-time fixed-point system of the DMFT, solved by damped self-consistent
iteration over Monte Carlo sample pools.

The system couples the scalar response values (R_theta_inf, R_eta_inf,
R_eta_star, Gamma_inf) with the Gaussian laws of (w_inf, w*) and u_inf through

    0      = -(lambda + delta Gamma + R_eta) theta_inf - R_eta_star theta* + u_inf
    eta    = -R_theta ell(eta, w*, z) + w_inf
    C_eta  = delta E[ell^2],   C_theta = E[(theta_inf, theta*) (.)^T]
    1/R_theta = lambda + delta Gamma + R_eta
    delta Gamma + R_eta = (delta / R_theta) E[1 - 1/(1 + d1ell R_theta)]
    R_eta_star = delta E[(1 + d1ell R_theta)^{-1} d2ell].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dmft import fmean
from .model import LinkFunction, LossModel, ScalarDist, gaussian_dist

Array = np.ndarray

ETA_RESIDUAL_TOL = 1e-12
R_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class SolverConfig:
    K: int
    damping: float = 0.5
    tol: float = 1e-8
    max_outer: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not (0 < self.damping <= 1):
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class FixedPointState:
    R_theta_inf: float
    R_eta_inf: float
    R_eta_star: float
    Gamma_inf: float
    C_eta_inf: float
    C_theta_inf: Array          # 2x2, [ [E theta_inf^2, E theta_inf theta*], [., 1] ]
    delta: float = None
    lambda_ridge: float = None
    eta_inf: Array = field(default=None, repr=False)
    w_inf: Array = field(default=None, repr=False)
    w_star: Array = field(default=None, repr=False)
    z: Array = field(default=None, repr=False)
    theta_inf: Array = field(default=None, repr=False)
    theta_star: Array = field(default=None, repr=False)
    u_inf: Array = field(default=None, repr=False)
    iterations: int = 0
    converged: bool = True
    residual_trace: list = field(default_factory=list, repr=False)


class NoRootError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Inner solvers
# ---------------------------------------------------------------------------

def _solve_eta_pool(R: float, w_inf: Array, w_star: Array, z: Array,
                    loss: LossModel, warn_multiroot: bool = True) -> Array:
    """Roots of F(eta) = eta + R ell(eta, w*, z) - w_inf, one per sample.

    Newton from eta = w_inf with bisection fallback on the bracket
    [w_inf - R B, w_inf + R B]; when the sign pattern on the bracket shows
    several crossings, the root closest to w_inf is taken (with a warning).
    """
    w_inf = np.asarray(w_inf, dtype=float)
    w_star = np.asarray(w_star, dtype=float)
    z = np.asarray(z, dtype=float)
    if R == 0.0:
        return w_inf.copy()

    def F(eta, wi=w_inf, ws=w_star, zz=z):
        return eta + R * np.asarray(loss.ell(eta, ws, zz), dtype=float) - wi

    eta = w_inf.copy()
    active = np.arange(eta.size)
    for _ in range(25):
        f_act = F(eta[active], w_inf[active], w_star[active], z[active])
        done = np.abs(f_act) <= 0.1 * ETA_RESIDUAL_TOL
        if np.all(done):
            active = active[:0]
            break
        keep = ~done
        active = active[keep]
        f_act = f_act[keep]
        fp = 1.0 + R * np.asarray(
            loss.d1ell(eta[active], w_star[active], z[active]), dtype=float)
        safe = np.abs(fp) >= 1e-3
        eta[active] = np.where(safe, eta[active] - f_act / np.where(safe, fp, 1.0),
                               eta[active])

    half = abs(R) * loss.ell_bound if loss.ell_bound is not None else None
    off = np.abs(F(eta)) > ETA_RESIDUAL_TOL
    if half is not None:
        off |= np.abs(eta - w_inf) > half * (1 + 1e-9)
    if np.any(off):
        idx = np.where(off)[0]
        eta[idx] = _bisect_eta(loss, R, w_inf[idx], w_star[idx], z[idx], half)

    if warn_multiroot and half is not None and half > 0:
        grid = np.linspace(-1.0, 1.0, 33)
        vals = np.stack([F(w_inf + g * half) for g in grid], axis=1)
        crossings = np.sum(np.diff(np.signbit(vals), axis=1) != 0, axis=1)
        n_multi = int(np.sum(crossings > 1))
        if n_multi:
            warnings.warn(
                f"eta fixed-point equation shows multiple crossings on "
                f"{n_multi} of {w_inf.size} samples; nearest root to w_inf kept",
                RuntimeWarning)
    return eta


def _bisect_eta(loss: LossModel, R: float, w_inf: Array, w_star: Array,
                z: Array, half) -> Array:
    """Bracketed fallback: scan a grid over [w_inf - half, w_inf + half],
    pick the sign-change cell closest to w_inf, bisect inside it."""
    def F(eta):
        return eta + R * np.asarray(loss.ell(eta, w_star, z), dtype=float) - w_inf

    if half is None:
        half = 1.0
        for _ in range(60):
            if np.all(np.signbit(F(w_inf - half)) != np.signbit(F(w_inf + half))):
                break
            half *= 2.0
    offsets = np.linspace(-1.0, 1.0, 65) * half
    vals = np.stack([F(w_inf + off) for off in offsets], axis=1)  # (k, 65)
    sign_change = np.diff(np.signbit(vals), axis=1) != 0           # (k, 64)
    cell_mid = 0.5 * (offsets[:-1] + offsets[1:])
    dist = np.where(sign_change, np.abs(cell_mid)[None, :], np.inf)
    cell = np.argmin(dist, axis=1)
    has = np.isfinite(np.min(dist, axis=1))
    lo = w_inf + np.where(has, offsets[cell], -half)
    hi = w_inf + np.where(has, offsets[cell + 1], half)
    flo = F(lo)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        fm = F(mid)
        same = np.signbit(fm) == np.signbit(flo)
        lo = np.where(same, mid, lo)
        flo = np.where(same, fm, flo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def solve_eta_implicit(R_theta_inf: float, w_inf: float, w_star: float,
                       z: float, loss: LossModel) -> float:
    """Scalar version of the eta fixed-point solve (pool version vectorized)."""
    out = _solve_eta_pool(
        R_theta_inf,
        np.array([w_inf], dtype=float),
        np.array([w_star], dtype=float),
        np.array([z], dtype=float),
        loss,
    )
    return float(out[0])


def pole_radius(d1_pool: Array) -> float:
    """Smallest R > 0 where some 1 + d1 R hits zero (inf when d1 >= 0)."""
    d1 = np.asarray(d1_pool, dtype=float)
    worst = float(np.min(d1))
    return np.inf if worst >= 0.0 else -1.0 / worst


def solve_R_theta(d1_pool: Array, delta: float, lambda_ridge: float) -> float:
    """Root of g(R) = lambda R + delta mean[d1 R / (1 + d1 R)] - 1 on (0, R_hi].

    This is the scalar reduction of the response equations; g(0) = -1 and the
    bracket is doubled until a sign change appears.  The bracket stays below
    the smallest pole of the integrand, where the fixed point is defined.
    """
    d1 = np.asarray(d1_pool, dtype=float)

    def g(R: float) -> float:
        q = d1 * R
        return lambda_ridge * R + delta * float(np.mean(q / (1.0 + q))) - 1.0

    r_pole = pole_radius(d1)
    cap = min(1e6, r_pole * (1.0 - 1e-12))
    hi = min(1.0, cap)
    while g(hi) <= 0.0:
        if hi >= cap * (1.0 - 1e-12):
            frac = float(np.mean(1.0 + d1 * min(2.0 * hi, 1e6) <= 0))
            raise NoRootError(
                "no sign change of the R_theta equation on the pole-free "
                f"interval (0, {cap:.4g}]; 1 + d1ell * R <= 0 on a "
                f"{frac:.2%} sample fraction beyond it")
        hi = min(2.0 * hi, cap)
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-16 * max(1.0, hi):
            break
    R = 0.5 * (lo + hi)
    if abs(g(R)) > R_RESIDUAL_TOL:
        for _ in range(30):
            gl, gh = g(lo), g(hi)
            if gh == gl:
                break
            R = lo - gl * (hi - lo) / (gh - gl)
            if not (lo < R < hi):
                R = 0.5 * (lo + hi)
            if g(R) > 0:
                hi = R
            else:
                lo = R
        R = 0.5 * (lo + hi)
    return float(R)


# ---------------------------------------------------------------------------
# Outer damped iteration
# ---------------------------------------------------------------------------

def iterate_fixed_point(
    loss: LossModel,
    link: LinkFunction,
    noise: ScalarDist,
    delta: float,
    gamma: float,
    lambda_ridge: float,
    cfg: SolverConfig,
    init: Optional[FixedPointState] = None,
    signal: Optional[ScalarDist] = None,
) -> FixedPointState:
    """Damped self-consistent loop with common random numbers across outer
    iterations.  gamma does not enter the fixed point; it is accepted for
    interface uniformity with the dynamic solvers."""
    del gamma, link  # the long-time system involves neither
    K = cfg.K
    rng = np.random.default_rng(cfg.seed)
    z = np.asarray(noise.sample(rng, K), dtype=float)
    signal = signal or gaussian_dist(1.0)
    theta_star = np.asarray(signal.sample(rng, K), dtype=float)
    theta_star = theta_star / np.sqrt(fmean(theta_star**2))
    g_wstar = rng.standard_normal(K)
    g_worth = rng.standard_normal(K)
    g_u = rng.standard_normal(K)

    if init is not None:
        C = np.array(init.C_theta_inf, dtype=float).copy()
        R_theta = float(init.R_theta_inf)
    else:
        C = np.array([[1.0, 0.5], [0.5, 1.0]])
        R_theta = 0.5 / (1.0 + lambda_ridge)
    C[1, 1] = 1.0

    alpha = cfg.damping
    Gamma = R_eta = R_eta_star = C_eta = 0.0
    eta = w_inf = u_inf = theta_inf = None
    w_star = g_wstar  # Var(w*) = C[1,1] = 1 pinned
    trace = []
    params_prev = None
    n_projected = 0
    last_projected = 0
    it = 0
    for it in range(1, cfg.max_outer + 1):
        c11, c12 = C[0, 0], C[0, 1]
        resid_var = max(c11 - c12 * c12, 0.0)
        w_inf = c12 * g_wstar + np.sqrt(resid_var) * g_worth
        eta = _solve_eta_pool(R_theta, w_inf, w_star, z, loss,
                              warn_multiroot=(it == 1))
        d1 = np.asarray(loss.d1ell(eta, w_star, z), dtype=float)
        d2 = np.asarray(loss.d2ell(eta, w_star, z), dtype=float)
        ell = np.asarray(loss.ell(eta, w_star, z), dtype=float)
        Gamma = float(np.mean(d1))
        try:
            R_theta_new = solve_R_theta(d1, delta, lambda_ridge)
        except NoRootError:
            # Off-branch pool: project the response below the smallest pole
            # and let the damped covariance update pull the pool back toward
            # the branch where the root is interior.
            R_theta_new = 0.5 * min(pole_radius(d1), 10.0 * max(R_theta, 0.1))
            n_projected += 1
            last_projected = it
            if n_projected == 1:
                warnings.warn(
                    f"outer step {it}: R_theta equation had no pole-free "
                    f"root; projected to R={R_theta_new:.4g} (further "
                    "projections counted silently)", RuntimeWarning)
        R_eta = 1.0 / R_theta_new - lambda_ridge - delta * Gamma
        R_eta_star = delta * float(np.mean(d2 / (1.0 + d1 * R_theta_new)))
        C_eta = delta * float(np.mean(ell * ell))
        u_inf = np.sqrt(max(C_eta, 0.0)) * g_u
        theta_inf = R_theta_new * (u_inf - R_eta_star * theta_star)
        C_new = np.array([
            [float(np.mean(theta_inf**2)), float(np.mean(theta_inf * theta_star))],
            [float(np.mean(theta_inf * theta_star)), 1.0],
        ])
        params_new = np.array([C_new[0, 0], C_new[0, 1], R_theta_new, R_eta,
                               R_eta_star, Gamma, C_eta])
        if not np.all(np.isfinite(params_new)):
            raise FloatingPointError(
                f"fixed-point iteration diverged at outer step {it} "
                f"(params {params_new}); supply a warm start near the "
                "dynamically relevant branch")
        if params_prev is not None:
            change = float(np.max(np.abs(params_new - params_prev)))
            trace.append(change)
        else:
            change = np.inf
        params_prev = params_new
        C = (1.0 - alpha) * C + alpha * C_new
        C[1, 1] = 1.0
        R_theta = R_theta_new
        if change < cfg.tol:
            break
    else:
        last = trace[-1] if trace else float("inf")
        warnings.warn(
            f"fixed-point iteration did not converge in {cfg.max_outer} "
            f"outer steps; last parameter change {last:.3e}",
            RuntimeWarning)

    converged = bool(trace and trace[-1] < cfg.tol)
    if n_projected:
        warnings.warn(
            f"R_theta equation lacked a pole-free root on {n_projected} of "
            f"{it} outer steps; the pool sat outside the branch where the "
            "stationary system is defined (warm-start closer, e.g. from a "
            "longer DMFT tail)", RuntimeWarning)
    if last_projected == it:
        converged = False  # the returned R is a projection, not a root
    if len(trace) >= 6 and converged:
        tail = trace[-5:]
        if any(tail[i + 1] > tail[i] * (1 + 1e-9) for i in range(4)):
            warnings.warn("residual norm not monotone over the last 5 "
                          "iterations at convergence", RuntimeWarning)

    state = FixedPointState(
        R_theta_inf=float(R_theta),
        R_eta_inf=float(R_eta),
        R_eta_star=float(R_eta_star),
        Gamma_inf=float(Gamma),
        C_eta_inf=float(C_eta),
        C_theta_inf=C,
        delta=float(delta),
        lambda_ridge=float(lambda_ridge),
        eta_inf=eta,
        w_inf=w_inf,
        w_star=w_star,
        z=z,
        theta_inf=theta_inf,
        theta_star=theta_star,
        u_inf=u_inf,
        iterations=it,
        converged=converged,
        residual_trace=trace,
    )
    return state


def warm_start_from_dmft(dmft_state) -> FixedPointState:
    """Seed the outer loop from the tail of a DMFT run."""
    t = dmft_state.t_theta
    C = np.array([
        [dmft_state.C_theta[t, t], dmft_state.c_theta_star[t]],
        [dmft_state.c_theta_star[t], 1.0],
    ])
    R_theta = float(np.sum(dmft_state.r_theta[t]))
    return FixedPointState(
        R_theta_inf=R_theta, R_eta_inf=0.0, R_eta_star=0.0, Gamma_inf=0.0,
        C_eta_inf=0.0, C_theta_inf=C,
    )


def fixed_point_residuals(state: FixedPointState, loss: LossModel,
                          delta: float = None,
                          lambda_ridge: float = None) -> dict:
    """Numeric residuals of the seven fixed-point equations under the pools."""
    delta = state.delta if delta is None else delta
    lambda_ridge = state.lambda_ridge if lambda_ridge is None else lambda_ridge
    eta, w_star, z = state.eta_inf, state.w_star, state.z
    ell = np.asarray(loss.ell(eta, w_star, z), dtype=float)
    d1 = np.asarray(loss.d1ell(eta, w_star, z), dtype=float)
    d2 = np.asarray(loss.d2ell(eta, w_star, z), dtype=float)
    R = state.R_theta_inf
    lhs1 = (-(lambda_ridge + delta * state.Gamma_inf + state.R_eta_inf) * state.theta_inf
            - state.R_eta_star * state.theta_star + state.u_inf)
    fix1 = float(np.sqrt(fmean(lhs1**2)))
    lhs2 = eta + R * ell - state.w_inf
    fix2 = float(np.sqrt(fmean(lhs2**2)))
    fix3_eta = abs(state.C_eta_inf - delta * fmean(ell**2))
    emp_C = np.array([
        [fmean(state.theta_inf**2), fmean(state.theta_inf * state.theta_star)],
        [fmean(state.theta_inf * state.theta_star), fmean(state.theta_star**2)],
    ])
    fix3_theta = float(np.max(np.abs(emp_C - state.C_theta_inf)))
    fix5 = abs(1.0 / R - (lambda_ridge + delta * state.Gamma_inf + state.R_eta_inf))
    q = d1 * R
    fix6 = abs(delta * state.Gamma_inf + state.R_eta_inf
               - (delta / R) * fmean(1.0 - 1.0 / (1.0 + q)))
    fix7 = abs(state.R_eta_star - delta * fmean(d2 / (1.0 + q)))
    return {
        "fix1_theta_stationarity": fix1,
        "fix2_eta_implicit": fix2,
        "fix3_C_eta": fix3_eta,
        "fix3_C_theta": fix3_theta,
        "fix5_R_theta_inverse": fix5,
        "fix6_R_eta": fix6,
        "fix7_R_eta_star": fix7,
    }
