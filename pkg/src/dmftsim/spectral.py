"""Spectral initialization: the matrix M_n, its leading eigenpair, the
asymptotic overlap/eigenvalue solve, and the two-stage power-iteration
dynamic used to probe the first-stage convergence rate."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .gd import GdConfig, Trajectory, run_gd
from .model import LinkFunction, LossModel, ModelInstance, PreProcess, ScalarDist

Array = np.ndarray

EXACT_EIG_MAX_DIM = 4096
ADMISSIBILITY_FLOOR = 1e3
POLE_GUARD = 1e-9


class WeakRecoveryError(RuntimeError):
    """No sign change found for zeta - phi: weak recovery likely fails."""


@dataclass(frozen=True)
class QuadratureSpec:
    """Quadrature for expectations over G ~ N(0,1), z ~ P(z), Y = phi(G, z).

    Gauss-Hermite in G; z enumerated exactly for point masses, else Monte
    Carlo with a fixed seed.
    """

    gh_nodes: int = 64
    z_samples: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.gh_nodes < 16:
            raise ValueError("gh_nodes must be >= 16")


@dataclass(frozen=True)
class LambdaStarSolution:
    lambda_star: float
    lambda_bar: float
    psi_prime: float
    phi_prime: float
    overlap_a: float
    lam1_lim: float
    lam2_lim: float
    tau: float
    delta: float


@dataclass(frozen=True)
class SpectralResult:
    theta0: Array
    lam1_emp: float
    lam2_emp: float
    overlap_emp: float


@dataclass(frozen=True)
class TwoStageResult:
    stage1_theta: Array      # (T+1, d): power iterates from theta*
    betas: Array             # (T,): empirical normalizations ||M theta|| / sqrt(d)
    gaps: Array              # (T+1,): ||theta_T - sqrt(d) theta_hat|| / sqrt(d)
    stage2: Trajectory


def build_Mn(inst: ModelInstance, pre: PreProcess) -> Array:
    """M_n = X^T diag(Ts(y)) X, symmetrized in floating point."""
    w = np.asarray(pre.Ts(inst.y), dtype=float)
    M = inst.X.T @ (w[:, None] * inst.X)
    return 0.5 * (M + M.T)


def top_two_eigs(M: Array) -> tuple[float, float, Array]:
    """Two largest eigenvalues and the leading eigenvector of symmetric M."""
    d = M.shape[0]
    if d <= EXACT_EIG_MAX_DIM:
        vals, vecs = scipy.linalg.eigh(M, subset_by_index=[d - 2, d - 1])
        return float(vals[1]), float(vals[0]), vecs[:, 1]
    return _power_top_two(M)


def _power_top_two(M: Array, iters: int = 4000, tol: float = 1e-13) -> tuple[float, float, Array]:
    # Shifted power iteration with one deflation step; M is PSD here.
    d = M.shape[0]
    v = np.ones(d) / np.sqrt(d)
    v += 1e-6 * np.cos(np.arange(d))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = M @ v
        lam_new = float(v @ w)
        nv = w / np.linalg.norm(w)
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            v, lam = nv, lam_new
            break
        v, lam = nv, lam_new
    u = np.sin(np.arange(d) + 0.5)
    u -= (v @ u) * v
    u /= np.linalg.norm(u)
    mu = 0.0
    for _ in range(iters):
        w = M @ u - lam * (v @ u) * v
        mu_new = float(u @ w)
        nu = w - (v @ w) * v
        nu /= np.linalg.norm(nu)
        if abs(mu_new - mu) <= tol * max(1.0, abs(mu_new)):
            u, mu = nu, mu_new
            break
        u, mu = nu, mu_new
    return lam, mu, v


def spectral_estimator(inst: ModelInstance, pre: PreProcess) -> SpectralResult:
    """theta^0 = sqrt(d) v1 with the sign fixed so that <theta^0, theta*> >= 0."""
    M = build_Mn(inst, pre)
    if not np.any(M):
        raise ValueError("M_n is the zero matrix; spectral estimator undefined")
    lam1, lam2, v1 = top_two_eigs(M)
    if lam1 - lam2 < 1e-12 * abs(lam1):
        warnings.warn(
            f"degenerate top eigenpair (lam1={lam1:.6g}, lam2={lam2:.6g}); "
            "leading eigenvector tie-broken arbitrarily",
            RuntimeWarning,
        )
    align = float(v1 @ inst.theta_star)
    if align < 0:
        v1 = -v1
        align = -align
    theta0 = np.sqrt(inst.d) * v1
    return SpectralResult(
        theta0=theta0,
        lam1_emp=lam1,
        lam2_emp=lam2,
        overlap_emp=align / np.sqrt(inst.d),
    )


# ---------------------------------------------------------------------------
# Asymptotics: psi/phi/zeta and the lambda* solve
# ---------------------------------------------------------------------------

class EtaIntegrals:
    """Weighted grid over (G, z) for the scalar expectations behind psi/phi.

    Precomputes Z_s = Ts(phi(G, z)) and G^2 on the product grid; each
    lambda-evaluation is then a fixed-order weighted sum.
    """

    def __init__(self, pre: PreProcess, link: LinkFunction, noise: ScalarDist,
                 quad: QuadratureSpec):
        nodes, weights = np.polynomial.hermite.hermgauss(quad.gh_nodes)
        g = np.sqrt(2.0) * nodes
        gw = weights / np.sqrt(np.pi)
        rng = np.random.default_rng(quad.seed)
        z_draws = np.asarray(noise.sample(rng, quad.z_samples), dtype=float)
        if np.all(z_draws == z_draws[0]):
            zs = z_draws[:1]
            zw = np.ones(1)
        else:
            zs = z_draws
            zw = np.full(zs.size, 1.0 / zs.size)
        G, Z = np.meshgrid(g, zs, indexing="ij")
        W = np.outer(gw, zw)
        self.weights = W.ravel()
        self.G2 = (G.ravel()) ** 2
        Y = np.asarray(link.eval(G.ravel(), Z.ravel()), dtype=float)
        self.Zs = np.asarray(pre.Ts(Y), dtype=float)
        self.tau = float(pre.tau)

    def _gap(self, lam: float) -> Array:
        if lam <= self.tau * (1.0 + POLE_GUARD):
            raise ValueError(
                f"lambda={lam!r} too close to the pole at tau={self.tau!r}")
        return lam - self.Zs

    def e_frac(self, lam: float) -> float:
        """E[Z_s / (lam - Z_s)]."""
        return float(np.sum(self.weights * self.Zs / self._gap(lam)))

    def e_frac2(self, lam: float) -> float:
        """E[Z_s / (lam - Z_s)^2]."""
        return float(np.sum(self.weights * self.Zs / self._gap(lam) ** 2))

    def e_g2frac(self, lam: float) -> float:
        """E[Z_s G^2 / (lam - Z_s)]."""
        return float(np.sum(self.weights * self.Zs * self.G2 / self._gap(lam)))

    def e_g2frac2(self, lam: float) -> float:
        """E[Z_s G^2 / (lam - Z_s)^2]."""
        return float(np.sum(self.weights * self.Zs * self.G2 / self._gap(lam) ** 2))


def solve_lambda_star(
    pre: PreProcess,
    link: LinkFunction,
    noise: ScalarDist,
    delta: float,
    quad: Optional[QuadratureSpec] = None,
) -> LambdaStarSolution:
    """Solve zeta_delta(lambda) = phi(lambda) for lambda*, with
    zeta_delta(lambda) = psi_delta(max(lambda, lambda_bar)), and evaluate the
    overlap formula and the limiting top-two eigenvalues of M_n."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    quad = quad or QuadratureSpec()
    integ = EtaIntegrals(pre, link, noise, quad)
    tau = integ.tau

    probe = tau * (1.0 + 1e-6) if tau > 0 else 1e-6
    if integ.e_frac2(probe) < ADMISSIBILITY_FLOOR or integ.e_g2frac(probe) < ADMISSIBILITY_FLOOR:
        warnings.warn(
            "pre-processing admissibility proxy failed: near-pole expectations "
            f"E[Zs/(lam-Zs)^2]={integ.e_frac2(probe):.3g}, "
            f"E[Zs G^2/(lam-Zs)]={integ.e_g2frac(probe):.3g} below 1e3 "
            "(divergence conditions possibly violated)",
            RuntimeWarning,
        )

    def psi(lam: float) -> float:
        return lam * (1.0 / delta + integ.e_frac(lam))

    def phi(lam: float) -> float:
        return lam * integ.e_g2frac(lam)

    def psi_prime(lam: float) -> float:
        return 1.0 / delta + integ.e_frac(lam) - lam * integ.e_frac2(lam)

    def phi_prime(lam: float) -> float:
        return integ.e_g2frac(lam) - lam * integ.e_g2frac2(lam)

    lam_bar = _golden_min(psi, psi_prime, tau)

    def root_fn(lam: float) -> float:
        return psi(max(lam, lam_bar)) - phi(lam)

    lo = lam_bar * (1.0 - 1e-9) + tau * 1e-9
    f_lo = root_fn(lo)
    if f_lo > 0:
        raise WeakRecoveryError(
            "zeta - phi is already positive near lambda_bar: no crossing above; "
            "the weak-recovery condition psi'(lambda*) > 0 likely fails")
    span = max(lam_bar - tau, 1.0)
    hi = lam_bar + span
    for _ in range(200):
        if root_fn(hi) > 0:
            break
        span *= 2.0
        hi = lam_bar + span
    else:
        raise WeakRecoveryError("no sign change of zeta - phi up to very large lambda")

    lam_star = _bisect(root_fn, lo, hi, xtol=1e-10, max_iter=200)

    psp = psi_prime(max(lam_star, lam_bar))
    php = phi_prime(lam_star)
    if psp <= 0:
        overlap = 0.0
    else:
        overlap = float(np.sqrt(psp / (psp - php)))
    return LambdaStarSolution(
        lambda_star=float(lam_star),
        lambda_bar=float(lam_bar),
        psi_prime=float(psp),
        phi_prime=float(php),
        overlap_a=overlap,
        lam1_lim=float(delta * psi(lam_star)),
        lam2_lim=float(delta * psi(lam_bar)),
        tau=tau,
        delta=float(delta),
    )


def _golden_min(psi, psi_prime, tau: float) -> float:
    """Golden-section minimizer of the convex psi on (tau, infinity)."""
    lo = tau * (1.0 + 1e-8) if tau > 0 else 1e-8
    span = max(tau, 1.0)
    hi = lo + span
    for _ in range(200):
        if psi_prime(hi) > 0:
            break
        span *= 2.0
        hi = lo + span
    else:
        raise RuntimeError("psi appears to have no interior minimizer")
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = psi(c), psi(d)
    for _ in range(300):
        if b - a <= 1e-12 * max(1.0, abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = psi(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = psi(d)
    return 0.5 * (a + b)


def _bisect(f, lo: float, hi: float, xtol: float, max_iter: int) -> float:
    f_lo = f(lo)
    if f_lo == 0.0:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid == 0.0:
            return mid
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
        if hi - lo <= xtol:
            return 0.5 * (lo + hi)
    raise RuntimeError(f"bisection did not converge after {max_iter} iterations")


# ---------------------------------------------------------------------------
# Two-stage dynamic: power iteration from theta*, then gradient descent
# ---------------------------------------------------------------------------

def power_stage(M: Array, start: Array, T: int) -> tuple[Array, Array]:
    """T steps of theta <- M theta / (||M theta|| / sqrt(d)) from ``start``."""
    d = start.shape[0]
    iterates = np.empty((T + 1, d))
    betas = np.empty(T)
    theta = np.asarray(start, dtype=float).copy()
    iterates[0] = theta
    for t in range(T):
        w = M @ theta
        beta = np.linalg.norm(w) / np.sqrt(d)
        if beta == 0.0:
            raise ZeroDivisionError("power iteration hit the zero vector")
        theta = w / beta
        betas[t] = beta
        iterates[t + 1] = theta
    return iterates, betas


def two_stage_dynamic(
    inst: ModelInstance,
    pre: PreProcess,
    loss: LossModel,
    gamma: float,
    lambda_ridge: float,
    T_stage: int,
    m: int,
) -> TwoStageResult:
    """Stage 1: T_stage power iterations from theta*.  Stage 2: gradient
    descent from the stage-1 endpoint.  Gaps are measured against the
    sign-aligned spectral initializer sqrt(d) theta_hat^s."""
    if T_stage < 1:
        raise ValueError("T_stage must be >= 1")
    M = build_Mn(inst, pre)
    spec = spectral_estimator(inst, pre)
    iterates, betas = power_stage(M, inst.theta_star, T_stage)
    sqd = np.sqrt(inst.d)
    gaps = np.linalg.norm(iterates - spec.theta0[None, :], axis=1) / sqd
    cfg = GdConfig(gamma=gamma, lambda_ridge=lambda_ridge, m=m)
    stage2 = run_gd(inst, loss, cfg, iterates[-1])
    return TwoStageResult(stage1_theta=iterates, betas=betas, gaps=gaps, stage2=stage2)
