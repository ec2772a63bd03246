"""Maxwellian-derived kernels and samplers.

All functions broadcast over leading axes; velocities live on the last axis
(length 3).  ``beta`` is the inverse temperature, so each velocity component
of the background is centred Gaussian with variance ``1/beta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

#: hemisphere integral of the positive part of a cosine over the unit sphere
LAMBDA0 = np.pi

COINCIDENCE_TOL = 1e-12
UNIT_TOL = 1e-12

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class CoincidentArgumentsError(ValueError):
    pass


@dataclass(frozen=True)
class KernelContext:
    beta: float
    quadrature_tolerance: float = 1e-10

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 < self.quadrature_tolerance <= 1e-4:
            raise ValueError("quadrature_tolerance out of (0, 1e-4]")


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.square(v), axis=-1))


def maxwellian_density(v, beta: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return (beta / (2 * np.pi)) ** 1.5 * np.exp(-0.5 * beta * np.sum(v * v, axis=-1))


def sample_maxwellian(beta: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    shape = (3,) if size is None else (size, 3)
    return rng.standard_normal(shape) / np.sqrt(beta)


def _sample_speed_biased(beta: float, rng: np.random.Generator, n: int) -> np.ndarray:
    # density proportional to M(w)|w|: speed**2 * beta / 2 is Gamma(2)
    speed = np.sqrt(2.0 * rng.gamma(2.0, size=n) / beta)
    return speed[:, None] * sample_unit_sphere(rng, n)


def sample_unit_sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def mean_relative_speed(v, beta: float) -> np.ndarray:
    """E|v - W| for W ~ M_beta, in closed form (noncentral chi mean)."""
    sigma = 1.0 / np.sqrt(beta)
    r = _norm(np.asarray(v, dtype=float)) / sigma
    small = r < 1e-6
    rs = np.where(small, 1.0, r)
    g = _SQRT_2_OVER_PI * np.exp(-0.5 * rs * rs) + (rs + 1.0 / rs) * special.erf(rs / np.sqrt(2.0))
    g_small = _SQRT_2_OVER_PI * (2.0 + r * r / 3.0)
    return sigma * np.where(small, g_small, g)


def collision_rate(v, beta: float) -> np.ndarray:
    """lambda(v) = LAMBDA0 * E|v - W|, W ~ M_beta."""
    return LAMBDA0 * mean_relative_speed(v, beta)


def collision_rate_quad(v, ctx: KernelContext) -> float:
    """Quadrature fallback for :func:`collision_rate` at a single velocity.

    Integrates |u| M(v + u) over spheres |u| = r analytically in angle and
    numerically in r.
    """
    beta = ctx.beta
    a = float(_norm(np.asarray(v, dtype=float)))
    pref = (beta / (2 * np.pi)) ** 1.5 * 4 * np.pi

    if a == 0.0:
        def integrand(r):
            return r**3 * np.exp(-0.5 * beta * r * r)
    else:
        def integrand(r):
            x = 2 * beta * a * r
            # sinh(x)/x written to avoid overflow: exp(x/2 - ...) form
            shape = -np.expm1(-x) / x if x > 0 else 1.0
            return r**3 * np.exp(-0.5 * beta * (r - a) ** 2) * shape

    upper = a + 40.0 / np.sqrt(beta)
    points = [a] if a > 0 else None
    val, _ = integrate.quad(
        integrand, 0.0, upper, points=points, epsabs=0.0, epsrel=ctx.quadrature_tolerance * 1e-2, limit=500
    )
    return LAMBDA0 * pref * val


def mean_collision_rate(beta: float) -> float:
    """<lambda> = LAMBDA0 * E|V - V1| with V, V1 independent Maxwellians."""
    # V - V1 has per-component variance 2/beta
    return float(LAMBDA0 * 2 * _SQRT_2_OVER_PI * np.sqrt(2.0 / beta))


def plane_distance(v_from, v_to) -> np.ndarray:
    """Signed distance from the origin of the plane through ``v_to``
    orthogonal to ``v_to - v_from``."""
    v_from = np.asarray(v_from, dtype=float)
    v_to = np.asarray(v_to, dtype=float)
    d = v_to - v_from
    nd = _norm(d)
    if np.any(nd < COINCIDENCE_TOL):
        raise CoincidentArgumentsError("velocities coincide (|v - v'| < 1e-12)")
    return np.sum(v_to * d, axis=-1) / nd


def e_function(v, v_prime, beta: float) -> np.ndarray:
    """Gaussian mass of the plane through ``v_prime`` orthogonal to
    ``v_prime - v``: the one-dimensional Maxwellian marginal evaluated at the
    plane's distance from the origin."""
    d = plane_distance(v, v_prime)
    return np.sqrt(beta / (2 * np.pi)) * np.exp(-0.5 * beta * d * d)


def carleman_kernel(v_from, v_to, beta: float) -> np.ndarray:
    """Gain-kernel rate density for the jump ``v_from -> v_to``.

    Integrates to ``collision_rate(v_from)`` over ``v_to`` and satisfies
    k(u, w) M(u) = k(w, u) M(w).
    """
    v_from = np.asarray(v_from, dtype=float)
    v_to = np.asarray(v_to, dtype=float)
    return e_function(v_from, v_to, beta) / _norm(v_to - v_from)


def sample_collision_partner(v, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Draw partner velocities with density proportional to M(v1)|v - v1|.

    Rejection from the envelope M(v1)(|v| + |v1|), itself a two-component
    mixture: a plain Maxwellian with weight |v| and the speed-biased
    Maxwellian with weight E|W|.  Accepts with probability
    |v - v1| / (|v| + |v1|).
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    vv = np.atleast_2d(v)
    n = vv.shape[0]
    out = np.empty_like(vv)
    speed = _norm(vv)
    mean_w = 2 * _SQRT_2_OVER_PI / np.sqrt(beta)
    p_plain = speed / (speed + mean_w)
    pending = np.arange(n)
    while pending.size:
        m = pending.size
        plain = rng.random(m) < p_plain[pending]
        cand = np.empty((m, 3))
        n_plain = int(plain.sum())
        cand[plain] = sample_maxwellian(beta, rng, n_plain)
        cand[~plain] = _sample_speed_biased(beta, rng, m - n_plain)
        rel = _norm(vv[pending] - cand)
        accept = rng.random(m) * (speed[pending] + _norm(cand)) < rel
        out[pending[accept]] = cand[accept]
        pending = pending[~accept]
    return out[0] if single else out


def orthonormal_frame(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing the unit vectors ``d`` (shape (n, 3)) to
    right-handed orthonormal frames."""
    helper = np.zeros_like(d)
    use_x = np.abs(d[:, 0]) < 0.9
    helper[use_x, 0] = 1.0
    helper[~use_x, 1] = 1.0
    e1 = np.cross(helper, d)
    e1 /= _norm(e1)[:, None]
    e2 = np.cross(d, e1)
    return e1, e2


def sample_impact_direction(v_rel, rng: np.random.Generator) -> np.ndarray:
    """Unit normals with density proportional to [v_rel . n]_+ on the sphere."""
    v_rel = np.asarray(v_rel, dtype=float)
    single = v_rel.ndim == 1
    vr = np.atleast_2d(v_rel)
    nr = _norm(vr)
    if np.any(nr <= 0.0):
        raise ValueError("zero relative velocity")
    d = vr / nr[:, None]
    m = d.shape[0]
    cos_t = np.sqrt(rng.random(m))
    phi = rng.uniform(0.0, 2 * np.pi, m)
    sin_t = np.sqrt(1.0 - cos_t * cos_t)
    e1, e2 = orthonormal_frame(d)
    n = (
        cos_t[:, None] * d
        + (sin_t * np.cos(phi))[:, None] * e1
        + (sin_t * np.sin(phi))[:, None] * e2
    )
    return n[0] if single else n


def elastic_collide(v, v1, n) -> tuple[np.ndarray, np.ndarray]:
    """Equal-mass hard-sphere collision with momentum transfer along ``n``."""
    v = np.asarray(v, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    n = np.asarray(n, dtype=float)
    if np.any(np.abs(_norm(n) - 1.0) > UNIT_TOL):
        raise ValueError("contact normal is not a unit vector")
    s = np.sum(n * (v - v1), axis=-1)[..., None]
    return v - s * n, v1 + s * n


def e_function_quad(v, v_prime, ctx: KernelContext) -> float:
    """Quadrature fallback for :func:`e_function` at one pair: integrates the
    3D Maxwellian over the plane in polar coordinates around the foot of the
    perpendicular from the origin."""
    beta = ctx.beta
    d = float(plane_distance(v, v_prime))
    pref = (beta / (2 * np.pi)) ** 1.5 * np.exp(-0.5 * beta * d * d)
    val, _ = integrate.quad(
        lambda r: 2 * np.pi * r * np.exp(-0.5 * beta * r * r),
        0.0, 40.0 / np.sqrt(beta), epsabs=0.0, epsrel=ctx.quadrature_tolerance * 1e-2, limit=200,
    )
    return float(pref * val)
