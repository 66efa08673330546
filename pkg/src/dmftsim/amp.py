"""Spectral-initialized AMP whose iterates reproduce gradient descent exactly.

The algorithm iterates

    b^i     = X g_i + (1/delta) sum_{j<i} f_j zeta_{i,j} - ((1/lam*) Z_s X theta^0, 0) zeta_{i,-1}
    a^{i+1} = -(1/delta) X^T f_i + sum_{j<=i} g_j xi_{i,j}

with 2-column nonlinearities given recursively: g_i reconstructs
(theta^i, theta*) and f_i = (ell(X theta^i, X theta*, z), 0).  The module
keeps running reconstructions of theta^i and X theta^i instead of
materializing the recursive closures; the Onsager coefficients cancel
algebraically for any table used consistently on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dmft import DmftLaw, DmftState, fmean
from .gd import Trajectory
from .model import LossModel, ModelInstance, PreProcess
from .spectral import LambdaStarSolution

Array = np.ndarray


@dataclass(frozen=True)
class OnsagerTable:
    """Correction matrices xi_{ij} (0 <= j <= i <= m-1) and zeta_{ij}
    (-1 <= j <= i-1, i <= m), stored with the zeta j-index shifted by one.

    Entry convention: M[k, l] = E[d(output_l) / d(input_k)], so the response
    values live in [0, 0] and the theta*-channel in [1, 0].
    """

    xi: Array     # (m, m, 2, 2); xi[i, j] valid for j <= i
    zeta: Array   # (m+1, m+1, 2, 2); zeta[i, j+1] holds zeta_{i,j}, j <= i-1

    def __post_init__(self):
        self.validate()

    @property
    def m(self) -> int:
        return self.xi.shape[0]

    def validate(self) -> None:
        if self.xi.shape != (self.m, self.m, 2, 2):
            raise ValueError("xi must be (m, m, 2, 2)")
        if self.zeta.shape != (self.m + 1, self.m + 1, 2, 2):
            raise ValueError("zeta must be (m+1, m+1, 2, 2)")
        if np.any(self.xi[:, :, :, 1] != 0.0):
            raise ValueError("second column of every xi must be zero (f_2 = 0)")
        if np.any(self.zeta[:, :, :, 1] != 0.0):
            raise ValueError("second column of every zeta must be zero "
                             "(g_2 = theta* carries no u-dependence)")
        if not np.array_equal(self.zeta[0, 0], np.array([[1.0, 0.0], [0.0, 0.0]])):
            raise ValueError("zeta_{0,-1} must equal [[1,0],[0,0]]")


def random_onsager_table(m: int, rng: np.random.Generator) -> OnsagerTable:
    """iid N(0,1) entries wherever the structural zeros allow."""
    xi = np.zeros((m, m, 2, 2))
    zeta = np.zeros((m + 1, m + 1, 2, 2))
    for i in range(m):
        for j in range(i + 1):
            xi[i, j, 0, 0] = rng.standard_normal()
            xi[i, j, 1, 0] = rng.standard_normal()
    zeta[0, 0, 0, 0] = 1.0
    for i in range(1, m + 1):
        for j in range(-1, i):
            zeta[i, j + 1, 0, 0] = rng.standard_normal()
            zeta[i, j + 1, 1, 0] = rng.standard_normal()
    return OnsagerTable(xi=xi, zeta=zeta)


def onsager_from_dmft(state: DmftState, m: int | None = None) -> OnsagerTable:
    """Tables implied by the DMFT kernels through the response
    correspondence (zeta ~ delta R_theta, xi ~ R_eta / delta).

    Defaults to the largest horizon the state supports."""
    if m is None:
        m = state.t_theta
    if state.t_theta < m or state.t_eta < max(m - 1, 0):
        raise ValueError(
            f"DMFT horizon too short for m={m}: theta side at {state.t_theta}, "
            f"eta side at {state.t_eta}")
    delta = state.delta
    xi = np.zeros((m, m, 2, 2))
    zeta = np.zeros((m + 1, m + 1, 2, 2))
    zeta[0, 0, 0, 0] = 1.0
    for i in range(1, m + 1):
        zeta[i, 0, 0, 0] = state.r_theta_dia[i]
        for j in range(i):
            zeta[i, j + 1, 0, 0] = delta * state.r_theta[i][j]
    for i in range(m):
        if i == 0:
            xi[0, 0, 0, 0] = state.e_d1_T_t0
        else:
            xi[i, i, 0, 0] = state.e_d1[i]
            xi[i, 0, 0, 0] = (state.R_eta[i][0] + state.R_eta_dia[i]) / delta
            for j in range(1, i):
                xi[i, j, 0, 0] = state.R_eta[i][j] / delta
        xi[i, 0, 1, 0] = (state.R_eta_star[i] + state.R_eta_dd[i]) / delta
    return OnsagerTable(xi=xi, zeta=zeta)


@dataclass(frozen=True)
class AmpRun:
    a_iters: list      # a^1..a^m, each (d, 2)
    b_iters: list      # b^0..b^m, each (n, 2)
    theta_rec: Array   # (m+1, d) reconstructed theta^0..theta^m
    eta_rec: Array     # (m+1, n) reconstructed X theta^0..X theta^m


def run_spectral_amp(
    inst: ModelInstance,
    pre: PreProcess,
    lam_sol: LambdaStarSolution,
    theta0: Array,
    onsager: OnsagerTable,
    loss: LossModel,
    gamma: float,
    lambda_ridge: float,
    m: int,
    recon_table: OnsagerTable | None = None,
) -> AmpRun:
    """Run the AMP for m gradient-descent-equivalent steps.

    ``recon_table`` lets the nonlinearity reconstructions use a different
    table than the AMP iteration itself (a deliberate mismatch breaks the
    algebraic cancellation; used as a negative control)."""
    if onsager.m < m:
        raise ValueError(f"Onsager table supports m={onsager.m} < requested {m}")
    recon = recon_table if recon_table is not None else onsager
    if recon.m < m:
        raise ValueError(f"reconstruction table supports m={recon.m} < {m}")
    X, z = inst.X, inst.z
    n, d = inst.n, inst.d
    delta = n / d
    lam_star = lam_sol.lambda_star
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.shape != (d,):
        raise ValueError(f"theta0 must have shape ({d},)")

    Zs = np.asarray(pre.Ts(inst.y), dtype=float)
    Ty = Zs / (lam_star - Zs)
    Xtheta0 = X @ theta0
    extra = np.column_stack([Zs * Xtheta0 / lam_star, np.zeros(n)])

    b0 = np.column_stack([Xtheta0 - Zs * Xtheta0 / lam_star, X @ inst.theta_star])
    eta0 = (1.0 + Ty) * b0[:, 0]
    b_star = b0[:, 1]

    theta_rec = np.empty((m + 1, d))
    eta_rec = np.empty((m + 1, n))
    theta_rec[0] = theta0
    eta_rec[0] = eta0
    f_vals = [np.column_stack([np.asarray(loss.ell(eta0, b_star, z), dtype=float),
                               np.zeros(n)])]
    a_iters: list[Array] = []
    b_iters: list[Array] = [b0]
    xi, zeta = onsager.xi, onsager.zeta
    rxi, rzeta = recon.xi, recon.zeta

    for i in range(m):
        # a^{i+1} from f_i and the xi corrections over g_0..g_i
        a_next = -(X.T @ f_vals[i]) / delta
        for j in range(i + 1):
            G_j = np.column_stack([theta_rec[j], inst.theta_star])
            a_next += G_j @ xi[i, j]
        a_iters.append(a_next)

        # reconstruct theta^{i+1} (Onsager part cancels by construction)
        corr = np.zeros(d)
        star_coef = 0.0
        for j in range(i + 1):
            corr += theta_rec[j] * rxi[i, j, 0, 0]
            star_coef += rxi[i, j, 1, 0]
        theta_rec[i + 1] = (
            (1.0 - gamma * lambda_ridge) * theta_rec[i]
            + gamma * delta * (a_next[:, 0] - corr - star_coef * inst.theta_star)
        )

        # b^{i+1} and the reconstruction of X theta^{i+1}
        G_next = np.column_stack([theta_rec[i + 1], inst.theta_star])
        b_next = X @ G_next - extra @ zeta[i + 1, 0]
        for j in range(i + 1):
            b_next += (f_vals[j] @ zeta[i + 1, j + 1]) / delta
        b_iters.append(b_next)
        eta_next = b_next[:, 0] + Ty * b0[:, 0] * rzeta[i + 1, 0, 0, 0]
        for j in range(i + 1):
            eta_next -= f_vals[j][:, 0] * rzeta[i + 1, j + 1, 0, 0] / delta
        eta_rec[i + 1] = eta_next
        f_vals.append(np.column_stack(
            [np.asarray(loss.ell(eta_next, b_star, z), dtype=float), np.zeros(n)]))

    return AmpRun(a_iters=a_iters, b_iters=b_iters,
                  theta_rec=theta_rec, eta_rec=eta_rec)


def verify_equivalence(amp: AmpRun, gd: Trajectory) -> tuple[float, float]:
    """Max relative error between AMP reconstructions and the GD trajectory,
    for theta and eta separately."""
    m = amp.theta_rec.shape[0] - 1
    if gd.theta.shape[0] - 1 < m:
        raise ValueError("GD trajectory shorter than AMP run")
    err_theta = 0.0
    err_eta = 0.0
    for t in range(m + 1):
        denom = np.linalg.norm(gd.theta[t])
        err_theta = max(err_theta,
                        np.linalg.norm(amp.theta_rec[t] - gd.theta[t]) / denom)
        if gd.eta is not None:
            denom = np.linalg.norm(gd.eta[t])
            err_eta = max(err_eta,
                          np.linalg.norm(amp.eta_rec[t] - gd.eta[t]) / denom)
    return float(err_theta), float(err_eta)


def se_check(amp: AmpRun, law: DmftLaw, theta0: Array, theta_star: Array,
             delta: float) -> dict:
    """State-evolution spot checks: empirical means of test functions of the
    AMP iterates against the matching DMFT-law expectations.

    The correspondence maps the first column of a^i to the DMFT effective
    noise u^{i-1}/delta, theta^0 to a theta* + u_diamond, and theta* to
    theta*.
    """
    d = theta0.shape[0]
    K = law.theta_samples.shape[0]
    m = min(len(amp.a_iters), law.u_samples.shape[1])
    report: dict = {}

    def entry(name, amp_val, dmft_val, tol):
        report[name] = {
            "amp": float(amp_val),
            "dmft": float(dmft_val),
            "diff": float(abs(amp_val - dmft_val)),
            "tol": float(tol),
            "ok": bool(abs(amp_val - dmft_val) <= tol),
        }

    base_tol = 3.0 / np.sqrt(min(d, K))
    entry("mean_theta_star", np.mean(theta_star),
          fmean(law.theta_samples[:, -1]), base_tol)
    entry("second_moment_theta0", np.mean(theta0**2),
          fmean(law.theta_samples[:, 0] ** 2), 3.0 * base_tol)
    if amp.theta_rec.shape[0] > 1 and law.theta_samples.shape[1] >= 3:
        entry("overlap_theta1_star", np.mean(amp.theta_rec[1] * theta_star),
              fmean(law.theta_samples[:, 1] * law.theta_samples[:, -1]), 0.03)
    for i in range(1, m + 1):
        a_col = amp.a_iters[i - 1][:, 0]
        u_scaled = law.u_samples[:, i - 1] / delta
        ref = fmean(u_scaled**2)
        entry(f"second_moment_a{i}", np.mean(a_col**2), ref,
              6.0 * base_tol * max(1.0, ref))
        entry(f"mean_a{i}", np.mean(a_col), fmean(u_scaled),
              3.0 * base_tol * max(1.0, np.sqrt(ref)))
    report["all_ok"] = all(v["ok"] for v in report.values() if isinstance(v, dict))
    return report
