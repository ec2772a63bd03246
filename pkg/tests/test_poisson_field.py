import numpy as np
import pytest
from scipy import integrate, stats

from rayleigh_gas.core import Mark, SimParams
from rayleigh_gas.poisson_field import (
    Ball,
    RegionTooSmallError,
    miss_probability_bound,
    path_excursion,
    required_radius,
    sample_field,
    speed_cutoff,
    write_field_csv,
)

P = SimParams(epsilon=0.1, mu=1.0, beta=1.0, alpha=0.3, t_max=1.0)


def test_mean_count_in_unit_ball():
    # intensity 100 on the unit ball minus the exclusion ball of radius 0.1
    expected = 100 * 4 / 3 * np.pi * (1 - 0.1**3)
    assert expected == pytest.approx(418.460, abs=1e-3)
    rng = np.random.default_rng(0)
    counts = [len(sample_field(P, np.zeros(3), Ball((0, 0, 0), 1.0), rng)) for _ in range(400)]
    assert abs(np.mean(counts) - expected) < 4 * np.sqrt(expected / 400)


def test_field_geometry_marks_and_velocities():
    rng = np.random.default_rng(1)
    f = sample_field(P.with_(epsilon=0.05), np.zeros(3), Ball((0, 0, 0), 4.0), rng)
    r = np.linalg.norm(f.centers, axis=1)
    assert r.max() <= 4.0 and r.min() > 0.05
    # uniform in the ball: r**3 / R**3 is uniform
    assert stats.kstest((r / 4.0) ** 3, "uniform").pvalue > 1e-3
    frac = np.mean(f.marks == Mark.ANNIHILATING)
    n = len(f)
    assert n > 100_000
    assert abs(frac - 0.3) < 3 * np.sqrt(0.21 / n)
    assert np.allclose(f.velocities.var(axis=0), 1.0, rtol=0.02)


def test_alpha_zero_gives_only_elastic_marks():
    f = sample_field(P.with_(alpha=0.0), np.zeros(3), Ball((0, 0, 0), 1.0), np.random.default_rng(2))
    assert np.all(f.marks == Mark.ELASTIC)


def test_shell_sampling_and_merge():
    rng = np.random.default_rng(3)
    inner = sample_field(P, np.zeros(3), Ball((0, 0, 0), 1.0), rng)
    shell = sample_field(P, np.zeros(3), Ball((0, 0, 0), 1.5, inner=1.0), rng)
    r = np.linalg.norm(shell.centers, axis=1)
    assert r.min() >= 1.0 and r.max() <= 1.5
    both = inner.merged(shell)
    assert len(both) == len(inner) + len(shell)
    assert np.array_equal(both.ids, np.arange(len(both)))
    assert both.region.radius == 1.5


def test_region_must_contain_exclusion_ball():
    with pytest.raises(RegionTooSmallError):
        sample_field(P, np.array([0.95, 0, 0]), Ball((0, 0, 0), 1.0), np.random.default_rng(0))


def test_speed_cutoff_is_chi_quantile():
    q = 1 - 1e-6
    w = speed_cutoff(q, 1.0)
    # independent check through the Maxwellian speed cdf
    cdf = integrate.quad(lambda s: np.sqrt(2 / np.pi) * s * s * np.exp(-s * s / 2), 0, w)[0]
    assert cdf == pytest.approx(q, abs=1e-10)
    assert speed_cutoff(q, 4.0) == pytest.approx(w / 2)


def test_required_radius_linear_in_time():
    margin = P.localization.margin
    assert required_radius(P, 0.0, 5.0) == pytest.approx(P.epsilon + margin)
    r1 = required_radius(P, 1.0, 5.0) - P.epsilon - margin
    r2 = required_radius(P, 2.0, 5.0) - P.epsilon - margin
    assert r2 == pytest.approx(2 * r1)


def test_miss_bound_cases():
    region = Ball((0, 0, 0), 20.0)
    assert miss_probability_bound(P, region, 0.5, 0.0) == (0.0, False)
    bound, flagged = miss_probability_bound(P, region, 0.5, 1.0)
    assert 0.0 < bound < 1e-6 and not flagged
    # leaving the safe core is flagged with the conservative value 1
    assert miss_probability_bound(P, region, 19.0, 1.0) == (1.0, True)


def test_miss_bound_against_tail_oracle():
    """Obstacles starting outside R that reach the ball of radius a within t
    need speed above (R - a)/t; crude upper bound from the whole shell mass."""
    region = Ball((0, 0, 0), 8.0)
    bound, _ = miss_probability_bound(P, region, 1.0, 1.0)
    a = 1.1
    s0 = (8.0 - a) / 1.0
    tail = stats.chi.sf(s0, 3)
    crude = P.mu_eps * 4 / 3 * np.pi * ((a + 40 + s0) ** 3 - 8.0**3) * tail
    assert 0 < bound <= crude


def test_path_excursion_uses_vertices():
    xs = np.array([[0, 0, 0], [1, 0, 0], [1, 2, 0]], dtype=float)
    assert path_excursion(np.arange(3), xs, (0, 0, 0)) == pytest.approx(np.sqrt(5))


def test_field_csv(tmp_path):
    f = sample_field(P, np.zeros(3), Ball((0, 0, 0), 0.5), np.random.default_rng(4))
    write_field_csv(f, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "id,cx,cy,cz,wx,wy,wz,mark"
    assert len(lines) == len(f) + 1
