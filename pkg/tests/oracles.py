"""Independent reference computations used by several test modules."""

import math

import numpy as np
from scipy import integrate, stats

from rayleigh_gas.maxwellian import collision_rate, maxwellian_density


def ncx_mean_oracle(speed: float, beta: float) -> float:
    """E|v - W| for W Maxwellian: |v - W| * sqrt(beta) is a noncentral chi
    with 3 degrees of freedom; integrate sqrt(y) against the scipy
    noncentral chi-square density."""
    sigma = 1 / math.sqrt(beta)
    nc = (speed / sigma) ** 2
    dist = stats.chi2(3) if nc == 0 else stats.ncx2(3, nc)
    lo, hi = dist.ppf(1e-16) if nc > 0 else 0.0, dist.isf(1e-18)
    pts = [nc] if lo < nc < hi else None
    val, _ = integrate.quad(lambda y: math.sqrt(y) * dist.pdf(y), lo, hi, points=pts,
                            epsabs=0, epsrel=1e-13, limit=500)
    return sigma * val


def planar_oracle(v, vp, beta: float, nodes: int = 60) -> float:
    """Mass of the 3D Maxwellian on the plane through vp orthogonal to
    vp - v, by tensor Gauss-Hermite quadrature in plane coordinates."""
    v, vp = np.asarray(v, float), np.asarray(vp, float)
    n = (vp - v) / np.linalg.norm(vp - v)
    a = np.cross(n, [1.0, 0, 0] if abs(n[0]) < 0.9 else [0, 1.0, 0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    foot = n * (vp @ n)
    x, w = np.polynomial.hermite.hermgauss(nodes)
    s = math.sqrt(2 / beta)
    X, Y = np.meshgrid(x * s, x * s, indexing="ij")
    pts = foot + X[..., None] * a + Y[..., None] * b
    # Gauss-Hermite integrates g(x) exp(-x^2); undo the weight explicitly
    weight = np.exp(-(X**2 + Y**2) * beta / 2)
    vals = maxwellian_density(pts, beta) / weight
    return float(s * s * np.einsum("i,j,ij->", w, w, vals))


def rate_average_oracle(mu: float, t: float, beta: float = 1.0) -> float:
    """E exp(-mu lambda(V) t) for Maxwellian V, by radial quadrature."""
    sb = math.sqrt(beta)

    def f(s):
        return stats.chi.pdf(s * sb, 3) * sb * math.exp(-mu * t * float(collision_rate([s, 0, 0], beta)))

    return integrate.quad(f, 0, 40 / sb, limit=200)[0]
