"""Tests for model primitives: losses, truncation, pre-processing, instances."""

import numpy as np
import pytest

from dmftsim.model import (
    abs_link,
    gaussian_dist,
    linear_link,
    make_instance,
    phase_preprocess,
    point_mass_dist,
    pseudo_huber_loss,
    rwf_loss,
    smoothstep_profile,
)


def central_diff(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2.0 * h)


# ---------------------------------------------------------------------------
# Truncation profile
# ---------------------------------------------------------------------------

def test_smoothstep_boundary_values():
    p = smoothstep_profile(4.0, 9.0)
    assert p.h(np.array(4.0)) == 1.0
    assert p.h(np.array(9.0)) == 0.0
    assert p.h(np.array(0.0)) == 1.0
    assert p.h(np.array(100.0)) == 0.0
    assert p.h1(np.array(4.0)) == 0.0
    assert p.h1(np.array(9.0)) == 0.0


def test_smoothstep_midpoint():
    p = smoothstep_profile(4.0, 9.0)
    assert abs(p.h(np.array(6.5)) - 0.5) < 1e-14


def test_smoothstep_derivatives_match_finite_differences():
    p = smoothstep_profile(2.0, 7.0)
    mid = 4.5
    fd1 = central_diff(lambda u: p.h(np.array(u)), mid, h=1e-6)
    assert abs(p.h1(np.array(mid)) - fd1) <= 1e-8
    for u in np.linspace(2.05, 6.95, 23):
        fd1 = central_diff(lambda v: p.h(np.array(v)), u, h=1e-6)
        fd2 = central_diff(lambda v: p.h1(np.array(v)), u, h=1e-6)
        assert abs(p.h1(np.array(u)) - fd1) <= 1e-7
        assert abs(p.h2(np.array(u)) - fd2) <= 1e-6


def test_smoothstep_monotone_nonincreasing():
    p = smoothstep_profile(1.0, 3.0)
    u = np.linspace(1.0, 3.0, 400)
    hv = p.h(u)
    assert np.all(np.diff(hv) <= 1e-15)
    assert np.all(p.h1(u) <= 0.0)
    assert np.all((hv >= 0.0) & (hv <= 1.0))


def test_smoothstep_rejects_bad_cuts():
    with pytest.raises(ValueError):
        smoothstep_profile(5.0, 5.0)
    with pytest.raises(ValueError):
        smoothstep_profile(-1.0, 2.0)


def test_smoothstep_declared_sups_hold():
    p = smoothstep_profile(3.0, 8.0)
    u = np.linspace(3.0, 8.0, 20001)
    assert np.max(np.abs(p.h1(u))) <= p.h1_sup * (1 + 1e-12)
    assert np.max(np.abs(p.h2(u))) <= p.h2_sup * (1 + 1e-12)


# ---------------------------------------------------------------------------
# RWF loss
# ---------------------------------------------------------------------------

def test_rwf_untruncated_point_value():
    # a=1, b=0, c=0 with L_cut >= 4: h == 1 and h' == 0 there, so ell = 2.
    loss = rwf_loss(smoothstep_profile(4.0, 9.0))
    assert abs(loss.ell(1.0, 0.0, 0.0) - 2.0) < 1e-14


def test_rwf_zero_at_origin():
    loss = rwf_loss(smoothstep_profile(4.0, 9.0))
    for b, c in [(0.3, 0.0), (1.5, 0.2), (-2.0, 0.1)]:
        assert loss.ell(0.0, b, c) == 0.0


def test_rwf_d1ell_matches_finite_difference_at_example_point():
    loss = rwf_loss(smoothstep_profile(5.0, 10.0))
    a, b, c = 0.7, 0.5, 0.0
    fd = central_diff(lambda t: loss.ell(t, b, c), a, h=1e-6)
    ref = loss.d1ell(a, b, c)
    assert abs(ref - fd) <= 1e-6 * max(1.0, abs(ref))


@pytest.mark.parametrize("loss_name", ["rwf", "pseudo_huber"])
def test_loss_finite_difference_consistency(loss_name):
    # ell = dL/da, d1ell = d ell/da, d2ell = d ell/db at 100 random points.
    if loss_name == "rwf":
        loss = rwf_loss(smoothstep_profile(4.0, 8.0))
    else:
        loss = pseudo_huber_loss()
    rng = np.random.default_rng(7)
    pts = rng.uniform(-2.5, 2.5, size=(100, 3))
    h = 1e-5
    for a, b, c in pts:
        if loss_name == "rwf" and abs(abs(b) + c) < 0.05:
            continue  # |b| kink of the link sits under the FD stencil
        fd_ell = (loss.L(a + h, b, c) - loss.L(a - h, b, c)) / (2 * h)
        fd_d1 = (loss.ell(a + h, b, c) - loss.ell(a - h, b, c)) / (2 * h)
        fd_d2 = (loss.ell(a, b + h, c) - loss.ell(a, b - h, c)) / (2 * h)
        assert abs(loss.ell(a, b, c) - fd_ell) <= 1e-5 * max(1.0, abs(fd_ell))
        assert abs(loss.d1ell(a, b, c) - fd_d1) <= 1e-5 * max(1.0, abs(fd_d1))
        assert abs(loss.d2ell(a, b, c) - fd_d2) <= 1e-5 * max(1.0, abs(fd_d2))


def test_loss_lipschitz_in_first_argument():
    # |ell(a,b,c) - ell(a',b,c)| <= d1_bound * |a - a'| on random samples.
    for loss in (rwf_loss(smoothstep_profile(4.0, 8.0)), pseudo_huber_loss()):
        rng = np.random.default_rng(11)
        a = rng.uniform(-4, 4, 500)
        a2 = rng.uniform(-4, 4, 500)
        b = rng.uniform(-3, 3, 500)
        c = rng.uniform(-0.5, 0.5, 500)
        lhs = np.abs(loss.ell(a, b, c) - loss.ell(a2, b, c))
        assert np.all(lhs <= loss.d1_bound * np.abs(a - a2) + 1e-12)


def test_rwf_derivative_bounds_declared():
    loss = rwf_loss(smoothstep_profile(4.0, 8.0))
    rng = np.random.default_rng(3)
    a = rng.uniform(-4, 4, 2000)
    b = rng.uniform(-4, 4, 2000)
    c = np.zeros(2000)
    assert np.max(np.abs(loss.d1ell(a, b, c))) <= loss.d1_bound
    assert np.max(np.abs(loss.d2ell(a, b, c))) <= loss.d2_bound
    assert np.max(np.abs(loss.ell(a, b, c))) <= loss.ell_bound


# ---------------------------------------------------------------------------
# Pre-processing
# ---------------------------------------------------------------------------

def test_phase_preprocess_clip_boundary():
    pre = phase_preprocess(3.0)
    assert pre.Ts(np.array(0.0)) == 0.0
    assert pre.Ts(np.array(3.0)) == 9.0
    assert pre.tau == 9.0


def test_phase_preprocess_saturated_region():
    pre = phase_preprocess(3.0)
    assert pre.Ts(np.array(6.0)) == 9.0
    assert pre.Ts1(np.array(6.0)) == 0.0


def test_phase_preprocess_unclipped_derivative():
    pre = phase_preprocess(3.0)
    assert pre.Ts1(np.array(1.5)) == 3.0


def test_phase_preprocess_range_and_lipschitz():
    pre = phase_preprocess(2.0)
    y = np.linspace(-6, 6, 1001)
    v = pre.Ts(y)
    assert np.all((v >= 0) & (v <= pre.tau))
    slopes = np.abs(np.diff(v) / np.diff(y))
    assert np.max(slopes) <= pre.lipschitz + 1e-9


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------

def test_make_instance_identity_link_no_noise():
    inst = make_instance(4, 2, seed=0, link=linear_link(),
                         noise=point_mass_dist(0.0), signal=gaussian_dist())
    assert np.array_equal(inst.y, inst.X @ inst.theta_star)


def test_make_instance_deterministic():
    kw = dict(n=17, d=5, seed=123, link=abs_link(),
              noise=gaussian_dist(0.3), signal=gaussian_dist())
    a = make_instance(**kw)
    b = make_instance(**kw)
    assert np.array_equal(a.X, b.X)
    assert np.array_equal(a.theta_star, b.theta_star)
    assert np.array_equal(a.z, b.z)
    assert np.array_equal(a.y, b.y)


def test_make_instance_signal_norm_exact():
    inst = make_instance(4000, 2000, seed=5, link=abs_link(),
                         noise=point_mass_dist(0.0), signal=gaussian_dist())
    assert abs(np.sum(inst.theta_star**2) / inst.d - 1.0) < 1e-12


def test_make_instance_entry_variance():
    inst = make_instance(300, 200, seed=2, link=linear_link(),
                         noise=point_mass_dist(0.0), signal=gaussian_dist())
    v = np.var(inst.X) * inst.d
    se = np.sqrt(2.0 / (inst.n * inst.d))  # var of sample variance of N(0,1)
    assert abs(v - 1.0) <= 3 * se


def test_make_instance_rejects_small():
    with pytest.raises(ValueError):
        make_instance(1, 5, 0, linear_link(), point_mass_dist(), gaussian_dist())
    with pytest.raises(ValueError):
        make_instance(5, 1, 0, linear_link(), point_mass_dist(), gaussian_dist())


def test_make_instance_rejects_zero_signal():
    with pytest.raises(ValueError):
        make_instance(4, 2, 0, linear_link(), point_mass_dist(),
                      point_mass_dist(0.0))
