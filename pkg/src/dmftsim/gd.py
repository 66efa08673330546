"""Spectral-initialized gradient descent at finite (n, d), plus Hessian
landscape probes along the trajectory."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .model import LossModel, ModelInstance

Array = np.ndarray

EXACT_EIG_MAX_DIM = 4096


@dataclass(frozen=True)
class GdConfig:
    gamma: float
    lambda_ridge: float
    m: int
    record_eta: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lambda_ridge < 0:
            raise ValueError("lambda_ridge must be >= 0")
        if self.m < 0:
            raise ValueError("horizon m must be >= 0")

    def smoothness_bound(self, loss: LossModel, delta: float) -> float:
        """L = lambda + 4 (1 + sqrt(delta))^2 sup|d1ell|: the smoothness
        constant behind the benign-region step-size cap gamma < 2/L."""
        return self.lambda_ridge + 4.0 * (1.0 + np.sqrt(delta)) ** 2 * loss.d1_bound


@dataclass(frozen=True)
class Trajectory:
    """Iterates theta^0..theta^m (rows) with pre-activations eta^t = X theta^t."""

    theta: Array               # (m+1, d)
    eta: Optional[Array]       # (m+1, n) when recorded
    eta_star: Array            # (n,)
    z: Array                   # (n,)
    gamma: float
    lambda_ridge: float

    @property
    def m(self) -> int:
        return self.theta.shape[0] - 1


@dataclass(frozen=True)
class HessianReport:
    times: Array
    lam_min: Array
    lam_max: Array
    in_region: Array
    radius: float


def run_gd(inst: ModelInstance, loss: LossModel, cfg: GdConfig, theta0: Array) -> Trajectory:
    """Iterate theta^{t+1} = theta^t - gamma X^T ell(X theta^t, X theta*, z)
    - gamma lambda theta^t.  Aborts on the first NaN/Inf iterate."""
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.shape != (inst.d,):
        raise ValueError(f"theta0 must have shape ({inst.d},), got {theta0.shape}")
    X = inst.X
    eta_star = X @ inst.theta_star
    thetas = np.empty((cfg.m + 1, inst.d))
    etas = np.empty((cfg.m + 1, inst.n)) if cfg.record_eta else None
    theta = theta0.copy()
    thetas[0] = theta
    for t in range(cfg.m + 1):
        eta = X @ theta
        if etas is not None:
            etas[t] = eta
        if t == cfg.m:
            break
        grad = X.T @ np.asarray(loss.ell(eta, eta_star, inst.z), dtype=float)
        theta = theta - cfg.gamma * grad - cfg.gamma * cfg.lambda_ridge * theta
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError(f"non-finite iterate at t={t + 1}")
        thetas[t + 1] = theta
    return Trajectory(
        theta=thetas, eta=etas, eta_star=eta_star, z=inst.z,
        gamma=cfg.gamma, lambda_ridge=cfg.lambda_ridge,
    )


def loss_value(inst: ModelInstance, loss: LossModel, lambda_ridge: float, theta: Array) -> float:
    eta = inst.X @ theta
    eta_star = inst.X @ inst.theta_star
    vals = np.asarray(loss.L(eta, eta_star, inst.z), dtype=float)
    return float(np.sum(vals) + 0.5 * lambda_ridge * np.sum(theta**2))


def hessian_extremes(
    inst: ModelInstance, loss: LossModel, lambda_ridge: float, theta: Array
) -> tuple[float, float]:
    """Extreme eigenvalues of lambda I + X^T diag(d1ell(X theta, X theta*, z)) X."""
    if inst.d > EXACT_EIG_MAX_DIM:
        raise ValueError(f"exact Hessian eigensolve limited to d <= {EXACT_EIG_MAX_DIM}")
    eta = inst.X @ np.asarray(theta, dtype=float)
    eta_star = inst.X @ inst.theta_star
    dvals = np.asarray(loss.d1ell(eta, eta_star, inst.z), dtype=float)
    H = inst.X.T @ (dvals[:, None] * inst.X)
    H = 0.5 * (H + H.T)
    H[np.diag_indices_from(H)] += lambda_ridge
    w = scipy.linalg.eigh(H, eigvals_only=True, subset_by_index=[0, inst.d - 1])
    return float(w[0]), float(w[-1])


def hessian_report(
    inst: ModelInstance,
    loss: LossModel,
    lambda_ridge: float,
    traj: Trajectory,
    radius: float = 0.2,
    times: Optional[Sequence[int]] = None,
) -> HessianReport:
    """Per-iterate Hessian extremes and membership of the ball
    ||theta^t - theta*|| / sqrt(d) <= radius."""
    if times is None:
        times = range(traj.m + 1)
    times = np.asarray(list(times), dtype=int)
    lam_min = np.empty(len(times))
    lam_max = np.empty(len(times))
    in_region = np.empty(len(times), dtype=bool)
    sqd = np.sqrt(inst.d)
    for k, t in enumerate(times):
        lam_min[k], lam_max[k] = hessian_extremes(inst, loss, lambda_ridge, traj.theta[t])
        in_region[k] = np.linalg.norm(traj.theta[t] - inst.theta_star) / sqd <= radius
    return HessianReport(times=times, lam_min=lam_min, lam_max=lam_max,
                         in_region=in_region, radius=radius)


def empirical_joint(traj: Trajectory, theta_star: Array) -> tuple[Array, Array]:
    """Sample matrices for distributional comparison: d rows of
    (theta^0_j..theta^m_j, theta*_j) and n rows of (eta^0_i..eta^m_i, eta*_i, z_i)."""
    theta_block = np.column_stack([traj.theta.T, np.asarray(theta_star, dtype=float)])
    if traj.eta is None:
        raise ValueError("trajectory was run without record_eta")
    eta_block = np.column_stack([traj.eta.T, traj.eta_star, traj.z])
    return theta_block, eta_block


def recompute_residual(inst: ModelInstance, loss: LossModel, traj: Trajectory) -> float:
    """Max relative defect of the recorded recursion; 0 for a faithful record."""
    X = inst.X
    worst = 0.0
    for t in range(traj.m):
        eta = X @ traj.theta[t]
        step = (
            traj.theta[t]
            - traj.gamma * (X.T @ np.asarray(loss.ell(eta, traj.eta_star, traj.z), dtype=float))
            - traj.gamma * traj.lambda_ridge * traj.theta[t]
        )
        denom = max(1.0, float(np.linalg.norm(traj.theta[t + 1])))
        worst = max(worst, float(np.linalg.norm(step - traj.theta[t + 1])) / denom)
    return worst
