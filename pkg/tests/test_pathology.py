import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rayleigh_gas.core import Alive, SimParams
from rayleigh_gas.limit import Jump, LimitTrajectory, ensemble_limit, simulate_limit
from rayleigh_gas.maxwellian import elastic_collide
from rayleigh_gas.micro import ensemble_micro
from rayleigh_gas.pathology import (
    TANGENCY_MARGIN,
    classify,
    classify_batch,
    compare_pathology,
    estimate_psi,
    loglog_slope,
    micro_pathology_rate,
    psi_sweep,
    virtual_obstacles,
)

P = SimParams(epsilon=0.1, mu=1.0, beta=1.0, alpha=0.0, t_max=1.0)


def grid_scan(traj, eps, dt=1e-5):
    """Brute force: sample the tagged path on a fine grid and look for any
    time at which it is strictly inside an obstacle's ball, on the outgoing
    branch after the contact (recollision) or on the incoming branch before
    it (interference).  Returns (rec, inter)."""
    times, xs, vs = traj.vertices()
    t_end = traj.t_max if not (traj.jumps and traj.jumps[-1].annihilating) else times[-1]
    grid = np.arange(0.0, t_end + dt / 2, dt)
    k = np.clip(np.searchsorted(times, grid, side="right") - 1, 0, len(times) - 1)
    vel = np.where(np.isnan(vs[k]), 0.0, vs[k])
    path = xs[k] + vel * (grid - times[k])[:, None]
    rec = inter = False
    for ob in virtual_obstacles(traj, eps):
        after = grid > ob.contact_time
        before = grid < ob.contact_time
        if ob.w_post is not None and after.any():
            d = np.linalg.norm(path[after] - (ob.center + ob.w_post * (grid[after] - ob.contact_time)[:, None]), axis=1)
            rec |= bool(np.any(d < eps))
        if before.any():
            d = np.linalg.norm(path[before] - (ob.center + ob.w_pre * (grid[before] - ob.contact_time)[:, None]), axis=1)
            inter |= bool(np.any(d < eps))
    return rec, inter


def test_short_paths_cannot_be_pathological():
    rng = np.random.default_rng(0)
    for _ in range(200):
        tr = simulate_limit(P.with_(mu=0.3), np.zeros(3), rng.normal(size=3), rng)
        if len(tr.jumps) <= 1:
            assert not classify(tr, 0.5).pathological


def constructed_recollision():
    """Planar two-jump path: the first obstacle leaves along (1,1)/2 and the
    particle, turned by the second collision, runs into it again."""
    eps = 0.1
    v0 = np.array([1.0, 0, 0])
    xi1 = np.zeros(3)
    n1 = np.array([1.0, 1.0, 0]) / np.sqrt(2)
    v1, xi1p = elastic_collide(v0, xi1, n1)
    c1 = np.array([1.0, 0, 0]) + eps * n1
    x2 = np.array([1.0, 0, 0]) + v1 * 1.0
    target = c1 + xi1p * 3.0  # obstacle 1 at time 4
    v2 = (target - x2) / 2.0
    xi2 = v2.copy()
    n2 = (v1 - v2) / np.linalg.norm(v1 - v2)
    v2p, xi2p = elastic_collide(v1, xi2, n2)
    assert np.allclose(v2p, v2)
    jumps = [Jump(1.0, v0, xi1, n1, v1, xi1p), Jump(2.0, v1, xi2, n2, v2p, xi2p)]
    return LimitTrajectory(np.zeros(3), v0, jumps, Alive(x2 + v2 * 3, v2), 5.0), eps


def test_constructed_recollision_on_third_segment():
    tr, eps = constructed_recollision()
    rep = classify(tr, eps)
    assert rep.has_recollision and (1, 2) in rep.recollision_pairs
    assert not rep.has_interference
    assert grid_scan(tr, eps) == (True, False)
    # a tiny radius sees no overlap
    assert not classify(tr, 1e-6).pathological


def test_classification_matches_grid_scan_oracle():
    p = P.with_(seed=21)
    batch = ensemble_limit(p, n_trials=1000)
    eps = 0.2
    checked = 0
    for i in range(batch.n_trials):
        tr = batch.trajectory(i)
        rep = classify(tr, eps)
        if rep.ambiguous:
            continue
        margins = np.array(list(rep.margins.values()) or [np.inf])
        # grid resolution cannot resolve approaches within ~1e-3 eps of tangency
        if np.min(np.abs(margins)) < 1e-3 * eps:
            continue
        rec, inter = grid_scan(tr, eps)
        assert (rep.has_recollision, rep.has_interference) == (rec, inter), i
        checked += 1
    assert checked > 950


def test_batch_and_single_classification_agree():
    batch = ensemble_limit(P.with_(seed=22, t_max=1.5), n_trials=1500)
    cls = classify_batch(batch, 0.15)
    for i in range(batch.n_trials):
        rep = classify(batch.trajectory(i), 0.15)
        assert rep.ambiguous == cls.ambiguous[i]
        if not rep.ambiguous:
            assert rep.has_recollision == cls.has_recollision[i]
            assert rep.has_interference == cls.has_interference[i]


def _transform(tr, q, shift):
    jumps = [
        Jump(j.time, q @ j.v_pre, q @ j.partner_pre, q @ j.normal,
             None if j.v_post is None else q @ j.v_post, None if j.partner_post is None else q @ j.partner_post)
        for j in tr.jumps
    ]
    return LimitTrajectory(q @ tr.x0 + shift, q @ tr.v0, jumps, tr.final_state, tr.t_max)


@given(st.integers(0, 10_000), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
@settings(max_examples=40, deadline=None)
def test_invariant_under_rigid_motions(seed, shift):
    rng = np.random.default_rng(seed)
    tr = simulate_limit(P.with_(t_max=2.0), np.zeros(3), rng.normal(size=3), rng)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    a = classify(tr, 0.2)
    b = classify(_transform(tr, q, np.array(shift)), 0.2)
    for key, m in a.margins.items():
        assert b.margins[key] == pytest.approx(m, abs=1e-9)
    if not a.ambiguous and min(map(abs, a.margins.values()), default=1) > 1e-8:
        assert (a.has_recollision, a.has_interference) == (b.has_recollision, b.has_interference)


def test_psi_vanishes_for_short_times():
    est = estimate_psi(P.with_(mu=0.01, epsilon=0.2), n_trials=20_000)
    assert est.psi <= 3 * est.stderr + 1e-12


def test_psi_sweep_shares_paths_and_orders_in_eps():
    res = psi_sweep(P.with_(seed=3), [0.3, 0.1], n_trials=20_000)
    assert res[0].psi > res[1].psi
    assert res[0].n_trials + res[0].n_ambiguous == 20_000
    slope = loglog_slope([r.epsilon for r in res], [r.psi for r in res])
    assert slope.slope > 0


def test_loglog_slope_exact_power():
    eps = np.array([0.2, 0.1, 0.05])
    fit = loglog_slope(eps, 3 * eps**0.7, 0.01 * 3 * eps**0.7)
    assert fit.slope == pytest.approx(0.7, abs=1e-10)


def test_tangency_margin_value():
    assert TANGENCY_MARGIN == 1e-4


def test_micro_recollision_rates_trivial_cases():
    rec, _ = ensemble_micro(P.with_(alpha=1.0), n_trials=300)
    assert micro_pathology_rate(rec) == (0.0, 0.0)
    rec, _ = ensemble_micro(P.with_(mu=1e-9), n_trials=50)
    assert micro_pathology_rate(rec)[0] == 0.0


def test_compare_pathology_row():
    rec, _ = ensemble_micro(P.with_(epsilon=0.2), n_trials=500)
    psi = estimate_psi(P.with_(epsilon=0.2), n_trials=5000)
    row = compare_pathology(rec, psi)
    assert row.epsilon == 0.2 and 0 <= row.micro_recollision_rate <= row.psi + 0.1
