"""Model primitives for single index observations y = phi(<x, theta*>, z).

Defines link functions, loss models (value + the derivatives the dynamics
need), truncation profiles and pre-processing maps for spectral methods,
scalar sampling distributions, and finite-size instance generation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


# ---------------------------------------------------------------------------
# Link functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkFunction:
    """Scalar link y = eval(u, z), applied entrywise, with weak u-derivative."""

    name: str
    eval: Callable[[Array, Array], Array]
    du: Callable[[Array, Array], Array]
    du_bound: float


def linear_link() -> LinkFunction:
    """y = u + z."""
    return LinkFunction(
        name="linear",
        eval=lambda u, z: u + z,
        du=lambda u, z: np.ones_like(np.asarray(u, dtype=float)),
        du_bound=1.0,
    )


def abs_link() -> LinkFunction:
    """Phase retrieval link y = |u| + z; du = sign(u) with du(0) = 0."""
    return LinkFunction(
        name="abs",
        eval=lambda u, z: np.abs(u) + z,
        du=lambda u, z: np.sign(u),
        du_bound=1.0,
    )


# ---------------------------------------------------------------------------
# Truncation profile h for the regularized Wirtinger flow loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TruncationProfile:
    """C^2 cutoff h with h=1 on [0, L_cut], h=0 on [U_cut, inf)."""

    L_cut: float
    U_cut: float
    h: Callable[[Array], Array]
    h1: Callable[[Array], Array]
    h2: Callable[[Array], Array]
    h1_sup: float
    h2_sup: float


def smoothstep_profile(L_cut: float, U_cut: float) -> TruncationProfile:
    """Quintic smoothstep cutoff: h(u) = 1 - s((u-L)/(U-L)) on [L, U].

    s(x) = 6x^5 - 15x^4 + 10x^3 gives s(0)=0, s(1)=1, s'=s''=0 at both ends,
    so h is C^2 with h1(L_cut) = h1(U_cut) = 0.
    """
    if not (0 < L_cut < U_cut):
        raise ValueError(f"need 0 < L_cut < U_cut, got L_cut={L_cut}, U_cut={U_cut}")
    width = U_cut - L_cut

    def _x(u: Array) -> Array:
        return np.clip((np.asarray(u, dtype=float) - L_cut) / width, 0.0, 1.0)

    def h(u: Array) -> Array:
        x = _x(u)
        return 1.0 - x * x * x * (10.0 + x * (-15.0 + 6.0 * x))

    def h1(u: Array) -> Array:
        u = np.asarray(u, dtype=float)
        x = _x(u)
        inside = (u > L_cut) & (u < U_cut)
        return np.where(inside, -30.0 * x * x * (x - 1.0) ** 2 / width, 0.0)

    def h2(u: Array) -> Array:
        u = np.asarray(u, dtype=float)
        x = _x(u)
        inside = (u > L_cut) & (u < U_cut)
        return np.where(inside, -60.0 * x * (2.0 * x - 1.0) * (x - 1.0) / width**2, 0.0)

    # sup|s'| = 30/16 at x=1/2; sup|s''| = 10*sqrt(3)/3 at x = 1/2 +- sqrt(3)/6
    return TruncationProfile(
        L_cut=float(L_cut),
        U_cut=float(U_cut),
        h=h,
        h1=h1,
        h2=h2,
        h1_sup=1.875 / width,
        h2_sup=10.0 * np.sqrt(3.0) / 3.0 / width**2,
    )


# ---------------------------------------------------------------------------
# Loss models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossModel:
    """Separable loss L(a, b, c) with ell = dL/da and its two derivatives.

    d1ell = d ell / da, d2ell = d ell / db.  ``ell_bound`` is a uniform bound
    on |ell| when one exists (needed by the long-time eta solver), else None.
    """

    name: str
    L: Callable[[Array, Array, Array], Array]
    ell: Callable[[Array, Array, Array], Array]
    d1ell: Callable[[Array, Array, Array], Array]
    d2ell: Callable[[Array, Array, Array], Array]
    d1_bound: float
    d2_bound: float
    ell_bound: Optional[float] = None


def rwf_loss(profile: TruncationProfile) -> LossModel:
    """Regularized Wirtinger flow loss for phase retrieval (link |b| + c).

    L(a,b,c) = 0.5 (a^2 - q^2)^2 h(a^2) h(q^2) with q = |b| + c.  The first
    partial is

        ell = 2 a (a^2 - q^2) h(a^2) h(q^2) + a (a^2 - q^2)^2 h'(a^2) h(q^2),

    and d1ell/d2ell follow by one more chain rule:

        d1ell = [2 (3a^2 - q^2) h(a^2) + (9a^2 - q^2)(a^2 - q^2) h'(a^2)
                 + 2 a^2 (a^2 - q^2)^2 h''(a^2)] h(q^2)
        d2ell = sign(b) * [ -4 a q (h(a^2) + (a^2 - q^2) h'(a^2)) h(q^2)
                 + 2 q (2 a (a^2-q^2) h(a^2) + a (a^2-q^2)^2 h'(a^2)) h'(q^2) ].
    """
    h, h1, h2 = profile.h, profile.h1, profile.h2

    def q_of(b: Array, c: Array) -> Array:
        return np.abs(b) + c

    def L_fn(a, b, c):
        a = np.asarray(a, dtype=float)
        q = q_of(np.asarray(b, dtype=float), np.asarray(c, dtype=float))
        r = a * a - q * q
        return 0.5 * r * r * h(a * a) * h(q * q)

    def ell_fn(a, b, c):
        a = np.asarray(a, dtype=float)
        q = q_of(np.asarray(b, dtype=float), np.asarray(c, dtype=float))
        r = a * a - q * q
        return (2.0 * a * r * h(a * a) + a * r * r * h1(a * a)) * h(q * q)

    def d1ell_fn(a, b, c):
        a = np.asarray(a, dtype=float)
        q = q_of(np.asarray(b, dtype=float), np.asarray(c, dtype=float))
        a2, q2 = a * a, q * q
        r = a2 - q2
        return (
            2.0 * (3.0 * a2 - q2) * h(a2)
            + (9.0 * a2 - q2) * r * h1(a2)
            + 2.0 * a2 * r * r * h2(a2)
        ) * h(q2)

    def d2ell_fn(a, b, c):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        q = q_of(b, np.asarray(c, dtype=float))
        a2, q2 = a * a, q * q
        r = a2 - q2
        dq = (
            -4.0 * a * q * (h(a2) + r * h1(a2)) * h(q2)
            + 2.0 * q * (2.0 * a * r * h(a2) + a * r * r * h1(a2)) * h1(q2)
        )
        return dq * np.sign(b)

    d1_b, d2_b, ell_b = _grid_bounds(ell_fn, d1ell_fn, d2ell_fn, profile.U_cut)
    return LossModel(
        name="rwf",
        L=L_fn,
        ell=ell_fn,
        d1ell=d1ell_fn,
        d2ell=d2ell_fn,
        d1_bound=d1_b,
        d2_bound=d2_b,
        ell_bound=ell_b,
    )


def _grid_bounds(ell, d1ell, d2ell, U_cut: float):
    """Numeric sup bounds on the RWF derivatives over their compact support.

    All three functions vanish once a^2 >= U_cut or q^2 >= U_cut, so a dense
    grid over the support gives the declared constants (5% safety margin).
    """
    r = np.sqrt(U_cut) * 1.0001
    a = np.linspace(-r, r, 481)
    q = np.linspace(0.0, r, 241)
    A, Q = np.meshgrid(a, q, indexing="ij")
    Z = np.zeros_like(A)
    d1 = float(np.max(np.abs(d1ell(A, Q, Z)))) * 1.05
    d2 = float(np.max(np.abs(d2ell(A, Q, Z)))) * 1.05
    eb = float(np.max(np.abs(ell(A, Q, Z)))) * 1.05
    return d1, d2, eb


def pseudo_huber_loss(scale: float = 1.0) -> LossModel:
    """Robust loss rho(x) = s^2 (sqrt(1 + (x/s)^2) - 1) on the linear model.

    With link b + c the residual is x = a - b - c, so ell = rho'(x),
    d1ell = rho''(x), d2ell = -rho''(x).  |rho'| <= s and rho'' <= 1.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    s2 = scale * scale

    def resid(a, b, c):
        return np.asarray(a, dtype=float) - np.asarray(b, dtype=float) - np.asarray(c, dtype=float)

    def L_fn(a, b, c):
        x = resid(a, b, c)
        return s2 * (np.sqrt(1.0 + x * x / s2) - 1.0)

    def ell_fn(a, b, c):
        x = resid(a, b, c)
        return x / np.sqrt(1.0 + x * x / s2)

    def rho2(x):
        return (1.0 + x * x / s2) ** -1.5

    return LossModel(
        name="linear-pseudo-huber",
        L=L_fn,
        ell=ell_fn,
        d1ell=lambda a, b, c: rho2(resid(a, b, c)),
        d2ell=lambda a, b, c: -rho2(resid(a, b, c)),
        d1_bound=1.0,
        d2_bound=1.0,
        ell_bound=float(scale),
    )


# ---------------------------------------------------------------------------
# Pre-processing for the spectral matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreProcess:
    """Nonnegative bounded Lipschitz map applied to responses before M_n."""

    name: str
    Ts: Callable[[Array], Array]
    Ts1: Callable[[Array], Array]
    tau: float
    lipschitz: float
    M_clip: Optional[float] = None


def phase_preprocess(M_clip: float) -> PreProcess:
    """Clipped square Ts(y) = min(y, M)^2 on y >= 0, extended as min(y^2, M^2).

    Ts1 is the a.e. derivative of the implemented map: 2 min(y, M) strictly
    inside (-M, M) and 0 on the saturated set.
    """
    if M_clip <= 0:
        raise ValueError("M_clip must be positive")
    M2 = M_clip * M_clip

    def Ts(y: Array) -> Array:
        y = np.asarray(y, dtype=float)
        v = np.minimum(y, M_clip)
        return np.minimum(v * v, M2)

    def Ts1(y: Array) -> Array:
        y = np.asarray(y, dtype=float)
        inside = (y < M_clip) & (y > -M_clip)
        return np.where(inside, 2.0 * np.minimum(y, M_clip), 0.0)

    return PreProcess(
        name="phase-clip",
        Ts=Ts,
        Ts1=Ts1,
        tau=M2,
        lipschitz=2.0 * M_clip,
        M_clip=float(M_clip),
    )


# ---------------------------------------------------------------------------
# Scalar distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarDist:
    """Sampleable scalar law with known second moment."""

    name: str
    sample: Callable[[np.random.Generator, int], Array]
    second_moment: float


def gaussian_dist(sigma: float = 1.0) -> ScalarDist:
    return ScalarDist(
        name=f"gaussian({sigma})",
        sample=lambda rng, size: sigma * rng.standard_normal(size),
        second_moment=sigma * sigma,
    )


def point_mass_dist(value: float = 0.0) -> ScalarDist:
    return ScalarDist(
        name=f"point({value})",
        sample=lambda rng, size: np.full(size, float(value)),
        second_moment=float(value) ** 2,
    )


def rademacher_dist() -> ScalarDist:
    return ScalarDist(
        name="rademacher",
        sample=lambda rng, size: rng.integers(0, 2, size=size) * 2.0 - 1.0,
        second_moment=1.0,
    )


# ---------------------------------------------------------------------------
# Finite-size instance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelInstance:
    """One draw of (X, theta*, z, y) at finite (n, d)."""

    n: int
    d: int
    delta: float
    X: Array
    theta_star: Array
    z: Array
    y: Array
    link: LinkFunction
    seed: int


def make_instance(
    n: int,
    d: int,
    seed: int,
    link: LinkFunction,
    noise: ScalarDist,
    signal: ScalarDist,
) -> ModelInstance:
    """Draw X with iid N(0, 1/d) entries, rescale theta* to norm sqrt(d),
    and evaluate y = phi(X theta*, z) rowwise.  Deterministic given seed."""
    if n < 2 or d < 2:
        raise ValueError(f"need n, d >= 2, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d)) / np.sqrt(d)
    theta_raw = np.asarray(signal.sample(rng, d), dtype=float)
    norm = np.linalg.norm(theta_raw)
    if norm == 0.0:
        raise ValueError("signal distribution produced a zero-norm vector")
    theta_star = theta_raw * (np.sqrt(d) / norm)
    z = np.asarray(noise.sample(rng, n), dtype=float)
    y = np.asarray(link.eval(X @ theta_star, z), dtype=float)
    return ModelInstance(
        n=n, d=d, delta=n / d, X=X, theta_star=theta_star, z=z, y=y,
        link=link, seed=seed,
    )


# ---------------------------------------------------------------------------
# Registries (names referenced from experiment configs)
# ---------------------------------------------------------------------------

LINKS = {
    "linear": linear_link,
    "abs": abs_link,
}

DISTS = {
    "gaussian": gaussian_dist,
    "point": point_mass_dist,
    "rademacher": rademacher_dist,
}


def get_link(name: str) -> LinkFunction:
    if name not in LINKS:
        raise KeyError(f"unknown link '{name}' (known: {sorted(LINKS)})")
    return LINKS[name]()


def make_loss(name: str, **params) -> LossModel:
    if name == "rwf":
        profile = smoothstep_profile(params["L_cut"], params["U_cut"])
        return rwf_loss(profile)
    if name == "linear-pseudo-huber":
        return pseudo_huber_loss(params.get("scale", 1.0))
    raise KeyError(f"unknown loss '{name}' (known: ['rwf', 'linear-pseudo-huber'])")


def make_preprocess(name: str, **params) -> PreProcess:
    if name == "phase-clip":
        return phase_preprocess(params["M_clip"])
    raise KeyError(f"unknown pre-processor '{name}' (known: ['phase-clip'])")


def make_dist(name: str, **params) -> ScalarDist:
    if name == "gaussian":
        return gaussian_dist(params.get("sigma", 1.0))
    if name == "point":
        return point_mass_dist(params.get("value", 0.0))
    if name == "rademacher":
        return rademacher_dist()
    raise KeyError(f"unknown distribution '{name}' (known: {sorted(DISTS)})")
