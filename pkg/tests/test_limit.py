import math

import numpy as np
import pytest
from scipy import integrate, stats

from rayleigh_gas.core import ANNIHILATED, InitialLaw, SimParams
from rayleigh_gas.limit import (
    MAX_SERIES_ORDER,
    collision_moments,
    ensemble_limit,
    maxwellian_rate_moment,
    series_mass,
    series_solution,
    series_tail_bound,
    simulate_batch,
    simulate_limit,
    stationarity_check,
    survival_mass,
)
from rayleigh_gas.maxwellian import collision_rate, maxwellian_density, mean_collision_rate

from oracles import rate_average_oracle

P = SimParams(epsilon=0.1, mu=1.0, beta=1.0, alpha=0.2, t_max=1.0)


def test_first_jump_survival_is_exponential():
    v0 = np.array([0.7, -0.2, 1.1])
    n = 100_000
    rng = np.random.default_rng(1)
    b = simulate_batch(P.with_(alpha=0.0), np.zeros((n, 3)), np.tile(v0, (n, 1)), rng, [0.3])
    none = (b.record.collisions[:, 0] == 0).mean()
    p = math.exp(-float(collision_rate(v0, 1.0)) * 0.3)
    assert abs(none - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_alpha_one_kills_at_first_jump():
    v0 = np.array([1.0, 0, 0])
    n = 50_000
    b = simulate_batch(P.with_(alpha=1.0), np.zeros((n, 3)), np.tile(v0, (n, 1)), np.random.default_rng(2), [0.2])
    dead = 1 - b.record.alive[:, 0].mean()
    p = 1 - math.exp(-float(collision_rate(v0, 1.0)) * 0.2)
    assert abs(dead - p) <= 3 * math.sqrt(p * (1 - p) / n)
    assert b.counts.max() <= 1


def test_single_and_batch_paths_have_the_same_law():
    rng = np.random.default_rng(3)
    singles = [simulate_limit(P.with_(alpha=0.0), np.zeros(3), [1.0, 0, 0], rng) for _ in range(4000)]
    n_single = np.array([len(s.jumps) for s in singles])
    b = simulate_batch(P.with_(alpha=0.0), np.zeros((4000, 3)), np.tile([1.0, 0, 0], (4000, 1)),
                       np.random.default_rng(4))
    assert stats.mannwhitneyu(n_single, b.counts).pvalue > 0.001


def test_batch_grid_matches_single_trajectories():
    b = ensemble_limit(P.with_(seed=5), [0.5, 1.0], n_trials=200)
    grid = [0.0, 0.25, 0.5, 0.99]
    x, v, alive = b.on_grid(grid)
    for i in range(0, 200, 17):
        tr = b.trajectory(i)
        for g, tg in enumerate(grid):
            st = tr.state_at(tg)
            if st is ANNIHILATED:
                assert not alive[i, g]
            else:
                assert alive[i, g] and np.allclose(st.x, x[i, g]) and np.allclose(st.v, v[i, g])
    assert np.array_equal(b.record.alive[:, 0], alive[:, 2])


def test_ensemble_thread_independence():
    a = ensemble_limit(P.with_(seed=6), n_trials=5000, threads=1)
    b = ensemble_limit(P.with_(seed=6), n_trials=5000, threads=4)
    assert np.array_equal(a.time, b.time) and np.array_equal(a.v_post, b.v_post, equal_nan=True)


def test_energy_conserved_at_every_jump():
    b = ensemble_limit(P.with_(alpha=0.0), n_trials=3000)
    e0 = np.sum(b.v_pre**2 + b.partner_pre**2, axis=1)
    e1 = np.sum(b.v_post**2 + b.partner_post**2, axis=1)
    assert np.max(np.abs(e1 - e0) / e0) < 1e-12


def test_maxwellian_is_stationary():
    p = P.with_(alpha=0.0, t_max=5 / mean_collision_rate(1.0), seed=7)
    rec = ensemble_limit(p, n_trials=20_000).record
    v = rec.v[:, -1]
    for a in range(3):
        assert stats.kstest(v[:, a], "norm").pvalue > 0.001


def test_survival_alpha_zero_and_one():
    s0 = survival_mass(P.with_(alpha=0.0), [0.5, 1.0], n_trials=2000)
    assert np.all(s0.direct == 1) and np.all(s0.rao_blackwell == 1)
    s1 = survival_mass(P.with_(alpha=1.0), [1.0], n_trials=50_000)
    ref = rate_average_oracle(1.0, 1.0)
    assert abs(s1.rao_blackwell[0] - ref) <= 3 * s1.rao_blackwell_stderr[0]
    assert abs(s1.direct[0] - ref) <= 3 * s1.direct_stderr[0]


def test_survival_estimators_agree():
    s = survival_mass(P, [0.5, 1.0], n_trials=40_000)
    assert np.all(np.abs(s.direct - s.rao_blackwell) <= 3 * np.hypot(s.direct_stderr, s.rao_blackwell_stderr))
    # conditioning can only reduce the variance
    assert np.all(s.rao_blackwell_stderr < s.direct_stderr)


def test_series_zero_order_is_exact():
    v = np.array([0.3, 1.0, -0.4])
    p = P.with_(mu=0.7)
    r = series_solution(p, 0.5, v, 0, 10, np.random.default_rng(0))
    exact = float(maxwellian_density(v, 1.0) * np.exp(-0.7 * float(collision_rate(v, 1.0)) * 0.5))
    assert r.value == pytest.approx(exact, rel=1e-14)
    assert r.stderr <= 1e-14 * exact


def test_series_alpha_one_keeps_only_first_term():
    r = series_mass(P.with_(alpha=1.0, mu=0.2), 1.0, 3, 2000, np.random.default_rng(1))
    assert np.all(r.terms[1:] == 0) and r.truncation_bound == 0
    assert r.value == pytest.approx(rate_average_oracle(0.2, 1.0), abs=4 * r.stderr + 1e-12)


def test_series_stationary_density_without_annihilation():
    """With alpha=0 and a Maxwellian start the density stays Maxwellian, so
    the truncated series must approach M(v) from below within the bound."""
    p = P.with_(alpha=0.0, mu=0.2)
    v = np.array([0.5, 0.0, 0.0])
    r = series_solution(p, 1.0, v, 4, 40_000, np.random.default_rng(2))
    m = float(maxwellian_density(v, 1.0))
    assert r.value <= m + 3 * r.stderr
    assert m - r.value <= r.truncation_bound * m * 10 + 3 * r.stderr


def test_series_order_limit():
    with pytest.raises(ValueError):
        series_mass(P, 1.0, MAX_SERIES_ORDER + 1, 10, np.random.default_rng(0))


def test_tail_bound_monotone_and_moment_values():
    assert maxwellian_rate_moment(1, 1.0) == pytest.approx(mean_collision_rate(1.0), rel=1e-8)
    assert maxwellian_rate_moment(0, 1.0) == pytest.approx(1.0, rel=1e-10)
    b = [series_tail_bound(P.with_(mu=0.2), 1.0, n) for n in range(5)]
    assert all(x > y for x, y in zip(b, b[1:]))


def test_moments_at_time_zero_and_mean():
    m = collision_moments(P, [0.0, 0.5], n_trials=20_000)
    assert m.mean[0] == 0 and m.second[0] == 0
    assert abs(m.mean[1] - 0.5 * mean_collision_rate(1.0)) <= 3 * m.mean_stderr[1]


def test_stationarity_degenerate_lags():
    assert stationarity_check(P, 0.0, 1.0, n_trials=10).deviation == 0
    assert stationarity_check(P, 1.0, 1.0, n_trials=10).deviation == 0
    with pytest.raises(ValueError):
        stationarity_check(P, 2.0, 1.0)


def test_rate_scale_speeds_up_the_clock():
    a = ensemble_limit(P.with_(alpha=0.0, seed=8), n_trials=20_000, rate_scale=3.0, keep_jumps=False)
    assert abs(a.record.collisions[:, -1].mean() - 3 * mean_collision_rate(1.0)) < 0.1
    assert a.time.size == 0


def test_initial_blob_positions():
    b = ensemble_limit(P, n_trials=20_000, initial=InitialLaw(position_sd=2.0))
    assert np.allclose(b.x0.std(axis=0), 2.0, rtol=0.03)
