"""Tests for the long-time fixed-point solver."""

import numpy as np
import pytest

from dmftsim.dmft import fmean
from dmftsim.fixed_point import (
    FixedPointState,
    NoRootError,
    SolverConfig,
    fixed_point_residuals,
    iterate_fixed_point,
    pole_radius,
    solve_R_theta,
    solve_eta_implicit,
)
from dmftsim.model import (
    LossModel,
    abs_link,
    linear_link,
    make_loss,
    point_mass_dist,
)

RWF = make_loss("rwf", L_cut=9.0, U_cut=18.0)


def ridge_loss():
    # ell(a, b, c) = a - b: ridge regression residual on the noiseless
    # linear model; unbounded ell exercises the expanding eta bracket.
    one = lambda a, b, c: np.ones_like(np.asarray(a, dtype=float))
    return LossModel(
        name="ridge",
        L=lambda a, b, c: 0.5 * (np.asarray(a, dtype=float) - b) ** 2,
        ell=lambda a, b, c: np.asarray(a, dtype=float) - b,
        d1ell=one,
        d2ell=lambda a, b, c: -one(a, b, c),
        d1_bound=1.0,
        d2_bound=1.0,
    )


# ---------------------------------------------------------------------------
# scalar root solvers
# ---------------------------------------------------------------------------

def test_solve_R_theta_quadratic_closed_form():
    # d1 == 1, lambda = 1, delta = 2: R^2 + 2R - 1 = 0, R = sqrt(2) - 1
    R = solve_R_theta(np.ones(16), delta=2.0, lambda_ridge=1.0)
    assert abs(R - (np.sqrt(2.0) - 1.0)) <= 1e-10


def test_solve_R_theta_large_ridge_bracket():
    R = solve_R_theta(np.ones(8), delta=2.0, lambda_ridge=100.0)
    assert 1.0 / 102.1 < R < 1.0 / 101.9


def test_solve_R_theta_residual_invariant():
    rng = np.random.default_rng(0)
    for lam, delta in [(0.0, 4.0), (0.5, 2.0), (2.0, 8.0)]:
        d1 = rng.uniform(0.1, 5.0, size=5000)
        R = solve_R_theta(d1, delta, lam)
        q = d1 * R
        g = lam * R + delta * np.mean(q / (1 + q)) - 1.0
        assert abs(g) <= 1e-10


def test_solve_R_theta_no_root_error():
    with pytest.raises(NoRootError, match="sample fraction"):
        solve_R_theta(-np.ones(10), delta=2.0, lambda_ridge=0.0)
    assert pole_radius(-2.0 * np.ones(3)) == 0.5
    assert pole_radius(np.ones(3)) == np.inf


def test_solve_eta_trivial_cases():
    assert solve_eta_implicit(0.0, 3.7, 0.1, 0.2, RWF) == 3.7
    lin = ridge_loss()
    # ell = a with b = 0: eta + 0.5 eta = 3
    assert abs(solve_eta_implicit(0.5, 3.0, 0.0, 0.0, lin) - 2.0) <= 1e-12
    # RWF at the noiseless truth: ell(w*, w*, 0) = 0, so eta = w* is the root
    assert abs(solve_eta_implicit(0.2, 1.3, 1.3, 0.0, RWF) - 1.3) <= 1e-12


def test_solve_eta_multiroot_warning_picks_nearest():
    sin_loss = LossModel(
        name="sin",
        L=lambda a, b, c: -np.cos(np.asarray(a, dtype=float)),
        ell=lambda a, b, c: np.sin(np.asarray(a, dtype=float)),
        d1ell=lambda a, b, c: np.cos(np.asarray(a, dtype=float)),
        d2ell=lambda a, b, c: np.zeros_like(np.asarray(a, dtype=float)),
        d1_bound=1.0,
        d2_bound=0.0,
        ell_bound=1.0,
    )
    w_inf = 0.3
    with pytest.warns(RuntimeWarning, match="multiple crossings"):
        eta = solve_eta_implicit(5.0, w_inf, 0.0, 0.0, sin_loss)
    assert abs(eta + 5.0 * np.sin(eta) - w_inf) <= 1e-10
    assert abs(eta) < 0.2  # the nearest root, not the ones beyond pi


# ---------------------------------------------------------------------------
# ridge regression: closed form + high-dimensional simulation oracle
# ---------------------------------------------------------------------------

def ridge_closed_form(lam, delta):
    R = (-(lam + delta - 1) + np.sqrt((lam + delta - 1) ** 2 + 4 * lam)) / (2 * lam)
    q = R * delta / (1 + R)
    beta = R**2 * delta / (1 + R) ** 2
    c11 = (q**2 + beta * (1 - 2 * q)) / (1 - beta)
    c_eta = delta * (c11 - 2 * q + 1) / (1 + R) ** 2
    return {"R": R, "c12": q, "c11": c11, "C_eta": c_eta,
            "R_eta": 1 / R - lam - delta, "R_eta_star": -delta / (1 + R)}


def test_ridge_fixed_point_matches_closed_form():
    lam, delta = 0.5, 2.0
    ref = ridge_closed_form(lam, delta)
    cfg = SolverConfig(K=200000, damping=0.7, tol=1e-12, max_outer=300, seed=3)
    st = iterate_fixed_point(ridge_loss(), linear_link(), point_mass_dist(0.0),
                             delta, 0.1, lam, cfg)
    assert st.converged
    tol = 4.0 / np.sqrt(cfg.K)
    assert abs(st.R_theta_inf - ref["R"]) <= tol
    assert abs(st.C_theta_inf[0, 1] - ref["c12"]) <= tol
    assert abs(st.C_theta_inf[0, 0] - ref["c11"]) <= tol
    assert abs(st.C_eta_inf - ref["C_eta"]) <= 4 * tol
    assert abs(st.R_eta_inf - ref["R_eta"]) <= 4 * tol
    assert abs(st.R_eta_star - ref["R_eta_star"]) <= 4 * tol


def test_ridge_fixed_point_matches_simulation():
    lam, delta, d = 0.5, 2.0, 1500
    n = int(delta * d)
    rng = np.random.default_rng(11)
    X = rng.standard_normal((n, d)) / np.sqrt(d)
    theta_star = rng.standard_normal(d)
    theta_star *= np.sqrt(d) / np.linalg.norm(theta_star)
    G = X.T @ X
    G[np.diag_indices_from(G)] += lam
    theta_hat = np.linalg.solve(G, X.T @ (X @ theta_star))
    overlap_sim = theta_hat @ theta_star / d
    ref = ridge_closed_form(lam, delta)
    assert abs(overlap_sim - ref["c12"]) <= 0.02


# ---------------------------------------------------------------------------
# phase retrieval branch
# ---------------------------------------------------------------------------

def pr_warm_init(c12=0.998, R=0.03):
    C = np.array([[1.0, c12], [c12, 1.0]])
    return FixedPointState(R_theta_inf=R, R_eta_inf=0.0, R_eta_star=0.0,
                           Gamma_inf=0.0, C_eta_inf=0.0, C_theta_inf=C)


def test_pr_fixed_point_converges_to_truth_branch():
    cfg = SolverConfig(K=30000, damping=0.5, tol=1e-10, max_outer=150, seed=0)
    st = iterate_fixed_point(RWF, abs_link(), point_mass_dist(0.0), 10.0,
                             0.01, 0.0, cfg, init=pr_warm_init())
    assert st.converged
    lim = 2.0 / np.sqrt(cfg.K)
    assert abs(st.C_theta_inf[0, 0] - 1.0) <= lim
    assert abs(st.C_theta_inf[0, 1] - 1.0) <= lim
    assert st.C_eta_inf <= lim
    # on-pool identities of the displayed response formulas
    d1 = RWF.d1ell(st.eta_inf, st.w_star, st.z)
    assert abs(st.R_eta_inf - (1.0 / st.R_theta_inf - 10.0 * np.mean(d1))) <= 5 / np.sqrt(cfg.K)
    assert abs(st.R_eta_star - (-10.0 * np.mean(d1) - st.R_eta_inf)) <= 5 / np.sqrt(cfg.K)
    assert abs(st.R_eta_star + 1.0 / st.R_theta_inf) <= 5 / np.sqrt(cfg.K)


def test_pr_reference_state_residuals():
    # undamped iteration is marginally unstable at the degenerate point;
    # the damped map holds it exactly
    cfg = SolverConfig(K=40000, damping=0.5, tol=1e-10, max_outer=80, seed=1)
    st = iterate_fixed_point(RWF, abs_link(), point_mass_dist(0.0), 10.0,
                             0.01, 0.0, cfg,
                             init=pr_warm_init(c12=1.0, R=0.033))
    assert st.converged
    res = fixed_point_residuals(st, RWF, 10.0, 0.0)
    lim = 5.0 / np.sqrt(cfg.K)
    for name, value in res.items():
        assert value <= lim, (name, value)


def test_residual_sensitivity_to_R_perturbation():
    cfg = SolverConfig(K=20000, damping=1.0, tol=1e-9, max_outer=60, seed=1)
    st = iterate_fixed_point(RWF, abs_link(), point_mass_dist(0.0), 10.0,
                             0.01, 0.0, cfg, init=pr_warm_init(c12=1.0, R=0.033))
    st.R_theta_inf += 0.1
    res = fixed_point_residuals(st, RWF, 10.0, 0.0)
    assert res["fix5_R_theta_inverse"] >= 0.01


def test_residual_noise_floor_halves_with_4K():
    # plug quadrature-exact values into fresh finite pools: the residual of
    # the R_eta_star equation is pure MC noise and scales like 1/sqrt(K).
    # dense midpoint quadrature (the integrand has cutoff kinks that defeat
    # Gauss-Hermite at the accuracy needed here)
    w = np.linspace(1e-7, 8.0, 400001)
    pdf = np.exp(-0.5 * w * w) / np.sqrt(2 * np.pi)
    wt = 2.0 * pdf * (w[1] - w[0])
    d1q = RWF.d1ell(w, w, np.zeros_like(w))

    def solve_quad_R(delta):
        lo, hi = 1e-6, 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            val = delta * np.sum(wt * d1q * mid / (1 + d1q * mid)) - 1.0
            lo, hi = (lo, mid) if val > 0 else (mid, hi)
        return 0.5 * (lo + hi)

    delta = 10.0
    Rq = solve_quad_R(delta)
    Gq = float(np.sum(wt * d1q))
    Rsq = float(delta * np.sum(wt * (-d1q) / (1 + d1q * Rq)))

    def fix7_noise(K, seed):
        rng = np.random.default_rng(seed)
        ws = rng.standard_normal(K)
        z = np.zeros(K)
        ts = rng.standard_normal(K)
        ts /= np.sqrt(fmean(ts**2))
        st = FixedPointState(
            R_theta_inf=Rq, R_eta_inf=1 / Rq - delta * Gq, R_eta_star=Rsq,
            Gamma_inf=Gq, C_eta_inf=0.0,
            C_theta_inf=np.array([[1.0, 1.0], [1.0, 1.0]]),
            eta_inf=ws, w_inf=ws, w_star=ws, z=z, theta_inf=ts,
            theta_star=ts, u_inf=np.zeros(K))
        return fixed_point_residuals(st, RWF, delta, 0.0)["fix7_R_eta_star"]

    small = np.mean([fix7_noise(4000, s) ** 2 for s in range(32)])
    big = np.mean([fix7_noise(16000, s + 100) ** 2 for s in range(32)])
    assert 1.4 <= np.sqrt(small / big) <= 2.9


def test_single_pass_loop_control():
    cfg = SolverConfig(K=5000, damping=1.0, tol=1e9, max_outer=50, seed=0)
    st = iterate_fixed_point(ridge_loss(), linear_link(), point_mass_dist(0.0),
                             2.0, 0.1, 0.5, cfg)
    assert st.iterations == 2  # change is measured from the second pass on
    for v in (st.R_theta_inf, st.R_eta_inf, st.R_eta_star, st.C_eta_inf):
        assert np.isfinite(v)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(K=10, tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(K=10, damping=1.5)
