"""Grand-canonical obstacle fields: marked Poisson points in a bounded region."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, stats

from .core import Mark, Obstacle, SimParams
from .maxwellian import sample_maxwellian


class RegionTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class Ball:
    """Ball of radius ``radius`` around ``center``, optionally with the inner
    ball of radius ``inner`` removed (a shell)."""

    center: tuple[float, float, float]
    radius: float
    inner: float = 0.0

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * (self.radius**3 - self.inner**3)


@dataclass(frozen=True)
class ObstacleField:
    ids: np.ndarray
    centers: np.ndarray
    velocities: np.ndarray
    marks: np.ndarray
    region: Ball
    x0: np.ndarray
    params: SimParams

    def __len__(self) -> int:
        return len(self.ids)

    def obstacles(self) -> list[Obstacle]:
        return [
            Obstacle(int(i), c, w, Mark(int(m)))
            for i, c, w, m in zip(self.ids, self.centers, self.velocities, self.marks)
        ]

    def merged(self, other: "ObstacleField") -> "ObstacleField":
        """Union with a field sampled on a disjoint region (ids are renumbered
        after the existing ones)."""
        region = Ball(self.region.center, max(self.region.radius, other.region.radius), 0.0)
        return ObstacleField(
            np.arange(len(self) + len(other)),
            np.concatenate([self.centers, other.centers]),
            np.concatenate([self.velocities, other.velocities]),
            np.concatenate([self.marks, other.marks]),
            region,
            self.x0,
            self.params,
        )


def sample_field(params: SimParams, x0, region: Ball, rng: np.random.Generator) -> ObstacleField:
    """Poisson field of intensity mu/eps**2 on ``region`` minus B_eps(x0),
    Maxwellian velocities and Bernoulli(alpha) annihilation marks."""
    x0 = np.asarray(x0, dtype=float)
    c = np.asarray(region.center, dtype=float)
    eps = params.epsilon
    if region.inner == 0.0 and np.linalg.norm(x0 - c) + eps > region.radius:
        raise RegionTooSmallError("region does not contain the exclusion ball around x0")
    n = rng.poisson(params.mu_eps * region.volume)
    # uniform in the (shell) ball by the radial inverse cdf
    r = np.cbrt(region.inner**3 + rng.random(n) * (region.radius**3 - region.inner**3))
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    centers = c + r[:, None] * dirs
    w = sample_maxwellian(params.beta, rng, n)
    marks = np.where(rng.random(n) < params.alpha, int(Mark.ANNIHILATING), int(Mark.ELASTIC))
    # thinning: the ball around the starting point carries no obstacles
    keep = np.sum((centers - x0) ** 2, axis=1) > eps * eps
    centers, w, marks = centers[keep], w[keep], marks[keep]
    return ObstacleField(
        np.arange(len(centers)), centers, w, marks.astype(np.int8), region, x0, params
    )


def speed_cutoff(quantile: float, beta: float) -> float:
    """Speed below which a Maxwellian obstacle falls with probability ``quantile``."""
    return float(stats.chi.ppf(quantile, 3) / np.sqrt(beta))


def required_radius(
    params: SimParams,
    t_max: float,
    w_cut: float,
    v_bound: float | None = None,
    margin: float | None = None,
) -> float:
    """Localization radius R = eps + (v_bound + w_cut) * t_max + margin.

    ``v_bound`` (the tagged-speed budget) defaults to ``w_cut``; ``margin``
    defaults to the policy's margin.
    """
    if not w_cut > 0:
        raise ValueError("w_cut must be positive")
    if v_bound is None:
        v_bound = w_cut
    if margin is None:
        margin = params.localization.margin
    return params.epsilon + (v_bound + w_cut) * t_max + margin


def path_excursion(times: np.ndarray, positions: np.ndarray, center) -> float:
    """Largest distance from ``center`` along a piecewise-linear path given by
    its vertices (the maximum of a convex function sits at a vertex)."""
    if len(positions) == 0:
        return 0.0
    return float(np.max(np.linalg.norm(np.asarray(positions) - np.asarray(center), axis=1)))


def miss_probability_bound(
    params: SimParams, region: Ball, excursion: float, duration: float
) -> tuple[float, bool]:
    """Expected number of unsampled obstacles (centres outside ``region``)
    whose worldline can reach B_{excursion+eps}(center) within ``duration``.

    Returns ``(bound, flagged)``; the trial is flagged (bound reported as 1)
    when the path leaves the safe core of radius R - eps - w_cut * duration,
    or when the bound exceeds the miss tolerance.
    """
    if duration <= 0:
        return 0.0, False
    eps = params.epsilon
    R = region.radius
    w_cut = speed_cutoff(params.localization.speed_cutoff_quantile, params.beta)
    if excursion > R - eps - w_cut * duration:
        return 1.0, True
    reach = excursion + eps
    sb = np.sqrt(params.beta)
    s0 = (R - reach) / duration

    def integrand(s):
        # speed density of a Maxwellian, chi(3) scaled by 1/sqrt(beta)
        dens = sb * stats.chi.pdf(s * sb, 3)
        return dens * 4.0 / 3.0 * np.pi * ((reach + s * duration) ** 3 - R**3)

    val, _ = integrate.quad(integrand, s0, s0 + 40.0 / sb, limit=200)
    bound = float(min(1.0, params.mu_eps * max(val, 0.0)))
    return bound, bound > params.localization.miss_tolerance


def write_field_csv(field: ObstacleField, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "cx", "cy", "cz", "wx", "wy", "wz", "mark"])
        for i, c, v, m in zip(field.ids, field.centers, field.velocities, field.marks):
            w.writerow([int(i), *map(repr, map(float, c)), *map(repr, map(float, v)), int(m)])
