import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rayleigh_gas.core import SimParams
from rayleigh_gas.diagnostics import (
    ComparisonRow,
    EmpiricalDensity,
    FitRejectedError,
    GridMismatchError,
    blob_density,
    compare_micro_limit,
    compare_records,
    green_kubo_estimator,
    heat_kernel_masses,
    hydrodynamic_experiment,
    l1_distance,
    limit_law_check,
    mark_weights,
    msd_estimator,
    noise_floor,
    split_half_l1,
)
from rayleigh_gas.limit import ensemble_limit
from rayleigh_gas.maxwellian import mean_collision_rate
from rayleigh_gas.micro import ensemble_micro

P = SimParams(epsilon=0.1, mu=1.0, beta=1.0, alpha=0.0, t_max=1.0)

masses = hnp.arrays(float, 12, elements=st.floats(0, 10)).filter(lambda a: a.sum() > 0)


def dens(m):
    return EmpiricalDensity.from_masses(m, 0.0, 1.0)


@given(masses, masses, masses)
@settings(max_examples=100, deadline=None)
def test_l1_is_a_metric(a, b, c):
    A, B, C = dens(a), dens(b), dens(c)
    ab = l1_distance(A, B)
    assert 0 <= ab <= 2 + 1e-12
    assert ab == pytest.approx(l1_distance(B, A))
    assert l1_distance(A, C) <= ab + l1_distance(B, C) + 1e-12
    assert l1_distance(A, A) == 0


def test_l1_extremes_and_grid_check():
    a = EmpiricalDensity.from_samples(np.full(10, 0.1), 0, 1, 4)
    b = EmpiricalDensity.from_samples(np.full(10, 0.9), 0, 1, 4)
    assert l1_distance(a, b) == pytest.approx(2.0)
    c = EmpiricalDensity.from_samples(np.full(10, 0.9), 0, 2, 4)
    with pytest.raises(GridMismatchError):
        l1_distance(a, c)
    off = EmpiricalDensity.from_samples(np.array([0.5, 5.0]), 0, 1, 4)
    assert off.outside == 1 and off.total == 2


def test_same_law_samples_sit_at_the_split_half_floor():
    rng = np.random.default_rng(0)
    n = 1_000_000
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    lo, hi, bins = -4.0, 4.0, 32
    d = l1_distance(EmpiricalDensity.from_samples(a, lo, hi, bins), EmpiricalDensity.from_samples(b, lo, hi, bins))
    floor = noise_floor(split_half_l1(a, None, lo, hi, bins, rng, 2), split_half_l1(b, None, lo, hi, bins, rng, 2))
    assert d <= 1.05 * floor


def test_mark_weights():
    rec, _ = ensemble_micro(P.with_(epsilon=0.2), n_trials=200)
    w = mark_weights(rec, 0.3)
    distinct = rec.collisions - rec.recollisions
    assert np.allclose(w, 0.7**distinct)
    assert np.all(mark_weights(rec, 0.0) == 1)


def test_alpha_zero_comparison_has_zero_mass_gap():
    rows = compare_micro_limit(P, [0.2], [0.5, 1.0], 300, 1000, coupled=False)
    assert all(r.annihil_micro == 0 and r.annihil_limit == 0 and r.gap == 0 for r in rows)
    assert len(rows[0].row()) == len(ComparisonRow.COLUMNS)


def test_coupled_comparison_pairs_trials():
    p = P.with_(alpha=0.2, seed=4)
    rows = compare_micro_limit(p, [0.2, 0.05], [1.0], 3000, 0)
    # common random numbers make the paired error much smaller than the
    # independent-sample one
    for r in rows:
        assert r.paired_gap_stderr < 0.5 * np.hypot(r.annihil_micro_stderr, r.annihil_limit_stderr)
    assert rows[0].gap > rows[1].gap
    assert rows[0].speed_l1 > rows[1].speed_l1


def test_paired_records_need_equal_sizes():
    rec, _ = ensemble_micro(P, n_trials=20)
    lim = ensemble_limit(P, n_trials=30).record
    with pytest.raises(ValueError):
        compare_records(0.1, rec, lim, 0.2, np.random.default_rng(0), paired=True)


def test_ballistic_regime():
    t = np.array([0.002, 0.004])
    b = ensemble_limit(P.with_(t_max=0.004), n_trials=200_000)
    x, _, _ = b.on_grid(t)
    msd = np.mean(np.sum((x - b.x0[:, None]) ** 2, axis=2), axis=0)
    assert np.allclose(msd, 3 * t**2, rtol=0.05)


def test_msd_window_and_scaling():
    with pytest.raises(FitRejectedError):
        msd_estimator(P, [0.1, 0.2, 0.3], 100)
    times = np.linspace(2, 6, 9)
    d1 = msd_estimator(P.with_(seed=1), times, 20_000)
    d2 = msd_estimator(P.with_(seed=2, mu=2.0), times / 2, 20_000)
    assert d1.r2 >= 0.99
    assert abs(d1.D / d2.D - 2) <= 2 * (d1.ci / d1.D + d2.ci / d2.D) * 2
    d4 = msd_estimator(P.with_(seed=3, beta=4.0), times * 2, 20_000)
    # speed and rate both scale as beta**-1/2, so D ~ beta**-1/2
    assert abs(d1.D / d4.D - 2) <= 2 * (d1.ci / d1.D + d4.ci / d4.D) * 2


def test_green_kubo_basics():
    gk = green_kubo_estimator(P, 2.5, 2000)
    # (1/3) E|V|^2 = 1/beta at lag zero
    assert gk.autocorrelation[0] / 3 == pytest.approx(1.0, rel=0.03)
    assert gk.autocorrelation[-1] < 0.05 * gk.autocorrelation[0]
    assert gk.correlation_time == pytest.approx(1.5 / mean_collision_rate(1.0), rel=0.2)
    with pytest.raises(FitRejectedError):
        green_kubo_estimator(P, 0.5, 500)


def test_blob_density_at_zero_displacement_is_the_heat_kernel():
    edges = np.linspace(-4, 4, 17)
    m = blob_density(np.zeros((3, 3)), edges)
    assert np.allclose(m, heat_kernel_masses(edges, 1.0), atol=1e-15)
    # symmetrization leaves a symmetric law unchanged in mean
    rng = np.random.default_rng(0)
    d = rng.normal(size=(20_000, 3)) * 0.5
    m = blob_density(d, edges)
    assert abs(m.sum() - heat_kernel_masses(edges, 1.25).sum()) < 1e-3
    assert np.abs(m - heat_kernel_masses(edges, 1.25)).sum() < 0.01


def test_hydro_zero_time_residual():
    lv = hydrodynamic_experiment(P, [4], [0.0], 10, D=0.2)
    assert lv[0].residual < 1e-12


def test_hydro_residual_decreases_with_scale():
    lv = hydrodynamic_experiment(P.with_(seed=5), [1, 16], [0.1], 20_000, D=0.2161)
    r = {x.M: x.residual for x in lv}
    assert r[16] < r[1]
    assert lv[1].variance == pytest.approx(2 * 0.2161 * 0.1, rel=0.1)


def test_limit_law_check_accepts_the_limit_process():
    p = SimParams(epsilon=0.1, mu=1.0, beta=1.0, alpha=0.3, t_max=0.5, seed=41)
    lc = limit_law_check(p, n_trials=300, n_jumps=5000, is_samples=400_000)
    assert lc.post_jump_dof == 23 and lc.n_holding > 300
    assert lc.passed(1e-4)


def test_limit_law_check_rejects_a_wrong_rate(monkeypatch):
    # the check believes in half the true rate, so the scaled holding times are too short
    from rayleigh_gas import diagnostics

    p = SimParams(epsilon=0.1, mu=1.0, beta=1.0, alpha=0.0, t_max=0.5, seed=42)
    true_rate = diagnostics.collision_rate
    monkeypatch.setattr(diagnostics, "collision_rate", lambda v, beta: 0.5 * true_rate(v, beta))
    bad = limit_law_check(p, n_trials=300, n_jumps=2000, is_samples=100_000)
    assert bad.holding_p < 1e-6 and bad.post_jump_p < 1e-6
