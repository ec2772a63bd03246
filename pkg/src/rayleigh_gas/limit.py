"""The limiting velocity-jump process with annihilation, and an independent
Duhamel-series evaluation of its law."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, stats

from .core import (
    ANNIHILATED,
    Alive,
    InitialLaw,
    Purpose,
    SimParams,
    TaggedState,
    derive_stream,
    run_chunked,
    stream_id,
    validate,
)
from .maxwellian import (
    carleman_kernel,
    collision_rate,
    elastic_collide,
    maxwellian_density,
    sample_collision_partner,
    sample_impact_direction,
    sample_maxwellian,
)
from .micro import EnsembleRecord

MAX_SERIES_ORDER = 4


@dataclass(frozen=True)
class Jump:
    time: float
    v_pre: np.ndarray
    partner_pre: np.ndarray
    normal: np.ndarray | None = None
    v_post: np.ndarray | None = None
    partner_post: np.ndarray | None = None

    @property
    def annihilating(self) -> bool:
        return self.v_post is None


@dataclass
class LimitTrajectory:
    x0: np.ndarray
    v0: np.ndarray
    jumps: list[Jump]
    final_state: TaggedState
    t_max: float

    def vertices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        times = [0.0]
        xs = [np.asarray(self.x0, dtype=float)]
        vs = [np.asarray(self.v0, dtype=float)]
        for j in self.jumps:
            xs.append(xs[-1] + vs[-1] * (j.time - times[-1]))
            times.append(j.time)
            vs.append(np.full(3, np.nan) if j.annihilating else j.v_post)
        return np.array(times), np.array(xs), np.array(vs)

    def state_at(self, t: float) -> TaggedState:
        x = np.asarray(self.x0, dtype=float)
        v = np.asarray(self.v0, dtype=float)
        last = 0.0
        for j in self.jumps:
            if j.time > t:
                break
            x = x + v * (j.time - last)
            last = j.time
            if j.annihilating:
                return ANNIHILATED
            v = j.v_post
        return Alive(x + v * (t - last), v)


def simulate_limit(params: SimParams, x0, v0, rng: np.random.Generator) -> LimitTrajectory:
    """One trajectory: Exp(mu lambda(v)) holding times, annihilation with
    probability alpha at each jump, otherwise a mechanical collision with a
    partner drawn from the collision-weighted Maxwellian."""
    mu, beta, alpha, t_max = params.mu, params.beta, params.alpha, params.t_max
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    t = 0.0
    jumps: list[Jump] = []
    while True:
        rate = mu * float(collision_rate(v, beta))
        t_next = t + rng.exponential() / rate
        if t_next > t_max:
            return LimitTrajectory(np.array(x0, dtype=float), np.array(v0, dtype=float), jumps,
                                   Alive(x + v * (t_max - t), v), t_max)
        x = x + v * (t_next - t)
        t = t_next
        xi = sample_collision_partner(v, beta, rng)
        # the impact direction is drawn even for a killing collision so the
        # contact geometry is always defined
        n_hat = sample_impact_direction(v - xi, rng)
        if rng.random() < alpha:
            jumps.append(Jump(t, v.copy(), xi, n_hat))
            return LimitTrajectory(np.array(x0, dtype=float), np.array(v0, dtype=float), jumps,
                                   ANNIHILATED, t_max)
        v_post, xi_post = elastic_collide(v, xi, n_hat)
        jumps.append(Jump(t, v.copy(), xi, n_hat, v_post, xi_post))
        v = v_post


@dataclass
class LimitBatch:
    """Many trajectories stored as flat jump arrays, sorted by (trial, time).

    ``start[i]:start[i+1]`` indexes the jumps of trial ``i``; an annihilating
    jump has NaN post-collision velocities.
    """

    x0: np.ndarray
    v0: np.ndarray
    t_max: float
    start: np.ndarray
    time: np.ndarray
    v_pre: np.ndarray
    partner_pre: np.ndarray
    normal: np.ndarray
    v_post: np.ndarray
    partner_post: np.ndarray
    annihilating: np.ndarray
    record: EnsembleRecord | None = None

    @property
    def n_trials(self) -> int:
        return len(self.x0)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.start)

    def trajectory(self, i: int) -> LimitTrajectory:
        jumps = []
        final: TaggedState | None = None
        for k in range(self.start[i], self.start[i + 1]):
            if self.annihilating[k]:
                jumps.append(Jump(float(self.time[k]), self.v_pre[k], self.partner_pre[k], self.normal[k]))
                final = ANNIHILATED
            else:
                jumps.append(Jump(float(self.time[k]), self.v_pre[k], self.partner_pre[k],
                                  self.normal[k], self.v_post[k], self.partner_post[k]))
        tr = LimitTrajectory(self.x0[i], self.v0[i], jumps, ANNIHILATED, self.t_max)
        if final is None:
            tr.final_state = tr.state_at(self.t_max)
        return tr

    def on_grid(self, grid: Sequence[float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Positions, velocities (NaN once annihilated) and alive flags of every
        trajectory at the times ``grid``; arrays are (trial, time[, 3])."""
        grid = np.asarray(grid, dtype=float)
        n, g = self.n_trials, len(grid)
        counts = self.counts
        trial = np.repeat(np.arange(n), counts)
        first = self.start[:-1]
        # time since the previous vertex, and cumulative displacement per trial
        prev_t = np.empty_like(self.time)
        if len(self.time):
            prev_t[1:] = self.time[:-1]
            prev_t[first[counts > 0]] = 0.0
        step = self.v_pre * (self.time - prev_t)[:, None]
        csum = np.cumsum(step, axis=0)
        base = np.zeros((n, 3))
        has = counts > 0
        base[has] = csum[first[has]] - step[first[has]]
        x_vertex = self.x0[trial] + csum - base[trial]
        # last jump at or before each grid time, found on a (trial, time) key
        span = float(max(self.t_max, grid.max(initial=0.0))) + 1.0
        keys = trial * span + self.time
        q = (np.arange(n)[:, None] * span + grid[None, :]).ravel()
        k = np.searchsorted(keys, q, side="right") - 1
        tr = np.repeat(np.arange(n), g)
        own = (k >= 0) & (k < len(keys))
        own[own] = trial[k[own]] == tr[own]
        t_v = np.where(own, self.time[np.where(own, k, 0)] if len(keys) else 0.0, 0.0)
        x_v = np.where(own[:, None], x_vertex[np.where(own, k, 0)] if len(keys) else 0.0, self.x0[tr])
        v_v = np.where(own[:, None], self.v_post[np.where(own, k, 0)] if len(keys) else 0.0, self.v0[tr])
        tg = np.tile(grid, n)
        x = (x_v + v_v * (tg - t_v)[:, None]).reshape(n, g, 3)
        v = v_v.reshape(n, g, 3)
        alive = ~np.isnan(v[..., 0])
        x[~alive] = np.nan
        return x, v, alive

    @classmethod
    def concatenate(cls, parts: Sequence["LimitBatch"]) -> "LimitBatch":
        offsets = np.cumsum([0] + [len(p.time) for p in parts[:-1]])
        start = np.concatenate([p.start[:-1] + o for p, o in zip(parts, offsets)] + [[sum(len(p.time) for p in parts)]])
        rec = None
        if parts[0].record is not None:
            rec = EnsembleRecord.concatenate([p.record for p in parts])
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        return cls(cat("x0"), cat("v0"), parts[0].t_max, start.astype(np.int64), cat("time"),
                   cat("v_pre"), cat("partner_pre"), cat("normal"), cat("v_post"),
                   cat("partner_post"), cat("annihilating"), rec)


def simulate_batch(
    params: SimParams,
    x0: np.ndarray,
    v0: np.ndarray,
    rng: np.random.Generator,
    checkpoints: Sequence[float] | None = None,
    rate_scale: float = 1.0,
    keep_jumps: bool = True,
) -> LimitBatch:
    """Vectorized :func:`simulate_limit` over the rows of ``x0``/``v0``.

    ``rate_scale`` multiplies the jump rate (used by the hydrodynamic
    rescaling).  With ``checkpoints`` the batch also carries an
    :class:`EnsembleRecord`.  ``keep_jumps=False`` drops the per-jump arrays
    (the batch then has no jumps) to save memory on long runs.
    """
    mu = params.mu * rate_scale
    beta, alpha, t_max = params.beta, params.alpha, params.t_max
    n = len(x0)
    cps = np.asarray([] if checkpoints is None else checkpoints, dtype=float)
    m = len(cps)
    alive_c = np.zeros((n, m), dtype=bool)
    x_c = np.full((n, m, 3), np.nan)
    v_c = np.full((n, m, 3), np.nan)
    n_c = np.zeros((n, m), dtype=np.int64)

    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    t = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    rec_trial, rec_cols = [], []
    while active.size:
        va = v[active]
        rate = mu * collision_rate(va, beta)
        t_next = t[active] + rng.exponential(size=active.size) / rate
        for c, tc in enumerate(cps):
            # checkpoints falling inside the current flight
            hit = (t[active] <= tc) & (tc < t_next)
            if np.any(hit):
                idx = active[hit]
                alive_c[idx, c] = True
                x_c[idx, c] = x[idx] + v[idx] * (tc - t[idx])[:, None]
                v_c[idx, c] = v[idx]
                n_c[idx, c] = count[idx]
        done = t_next > t_max
        go = ~done
        idx = active[go]
        tn = t_next[go]
        x[idx] += v[idx] * (tn - t[idx])[:, None]
        t[idx] = tn
        count[idx] += 1
        vv = v[idx]
        xi = sample_collision_partner(vv, beta, rng) if idx.size else np.empty((0, 3))
        normal = sample_impact_direction(vv - xi, rng) if idx.size else np.empty((0, 3))
        kill = rng.random(idx.size) < alpha
        vpost = np.full((idx.size, 3), np.nan)
        xpost = np.full((idx.size, 3), np.nan)
        el = ~kill
        if np.any(el):
            vp, xp = elastic_collide(vv[el], xi[el], normal[el])
            vpost[el], xpost[el] = vp, xp
            v[idx[el]] = vp
        if keep_jumps:
            rec_trial.append(idx)
            rec_cols.append((tn, vv, xi, normal, vpost, xpost, kill))
        # annihilated trials: later checkpoints see them dead, with their jump count
        dead = idx[kill]
        for c, tc in enumerate(cps):
            late = t[dead] <= tc
            n_c[dead[late], c] = count[dead[late]]
        active = idx[el]

    trial = np.concatenate(rec_trial) if rec_trial else np.empty(0, dtype=np.int64)
    order = np.argsort(trial, kind="stable")

    def col(j, shape):
        if not rec_cols:
            return np.empty(shape)
        return np.concatenate([r[j] for r in rec_cols])[order]

    start = np.concatenate([[0], np.cumsum(np.bincount(trial, minlength=n))]).astype(np.int64)
    record = None
    if m:
        record = EnsembleRecord(cps, alive_c, x_c, v_c, n_c, np.zeros((n, m), dtype=np.int64),
                                np.zeros(n, dtype=bool))
    return LimitBatch(
        np.array(x0, dtype=float), np.array(v0, dtype=float), t_max, start,
        col(0, (0,)), col(1, (0, 3)), col(2, (0, 3)), col(3, (0, 3)), col(4, (0, 3)),
        col(5, (0, 3)), col(6, (0,)).astype(bool), record,
    )


def ensemble_limit(
    params: SimParams,
    checkpoints: Sequence[float] | None = None,
    initial: InitialLaw | None = None,
    n_trials: int | None = None,
    threads: int = 1,
    purpose: Purpose = Purpose.LIMIT,
    rate_scale: float = 1.0,
    keep_jumps: bool = True,
) -> LimitBatch:
    """Chunked batch simulation; chunk ``k`` draws from its own stream so the
    output does not depend on ``threads``."""
    validate(params)
    n = params.n_trials if n_trials is None else n_trials
    cps = [params.t_max] if checkpoints is None else list(checkpoints)
    law = initial or InitialLaw()

    def block(k: int, start: int, stop: int) -> LimitBatch:
        rng = derive_stream(params.seed, stream_id(purpose, k))
        x0, v0 = law.sample(rng, stop - start, params.beta)
        return simulate_batch(params, x0, v0, rng, cps, rate_scale, keep_jumps)

    return LimitBatch.concatenate(run_chunked(block, n, threads))


# -- mass bookkeeping ------------------------------------------------------------


@dataclass
class SurvivalEstimate:
    times: np.ndarray
    direct: np.ndarray
    direct_stderr: np.ndarray
    rao_blackwell: np.ndarray
    rao_blackwell_stderr: np.ndarray


def survival_mass(
    params: SimParams,
    times: Sequence[float],
    n_trials: int | None = None,
    initial: InitialLaw | None = None,
    threads: int = 1,
) -> SurvivalEstimate:
    """Alive mass by two estimators.

    The direct one counts survivors of the process with annihilation.  The
    second runs the process without annihilation and averages
    (1 - alpha)**N(t), the conditional survival probability given the
    collision count.
    """
    times = np.asarray(times, dtype=float)
    p = params.with_(t_max=float(times.max()))
    direct = ensemble_limit(p, times, initial, n_trials, threads).record
    alive = direct.alive.astype(float)
    free = ensemble_limit(p.with_(alpha=0.0), times, initial, n_trials, threads,
                          purpose=Purpose.LIMIT_ALPHA0).record
    w = (1.0 - params.alpha) ** free.collisions.astype(float)
    n = alive.shape[0]
    return SurvivalEstimate(
        times,
        alive.mean(axis=0),
        alive.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(times)),
        w.mean(axis=0),
        w.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(times)),
    )


# -- Duhamel series --------------------------------------------------------------


@dataclass
class SeriesResult:
    value: float
    stderr: float
    terms: np.ndarray
    term_stderr: np.ndarray
    truncation_bound: float


def _check_order(n_max: int) -> None:
    if not 0 <= n_max <= MAX_SERIES_ORDER:
        raise ValueError(f"n_max must be in [0, {MAX_SERIES_ORDER}] (Monte Carlo variance grows with order)")


def maxwellian_rate_moment(m: int, beta: float) -> float:
    """E[lambda(V)**m] for V Maxwellian, by radial quadrature."""
    sb = math.sqrt(beta)

    def integrand(s):
        return stats.chi.pdf(s * sb, 3) * sb * float(collision_rate(np.array([s, 0.0, 0.0]), beta)) ** m

    val, _ = integrate.quad(integrand, 0.0, 40.0 / sb, limit=200)
    return val


def series_tail_bound(params: SimParams, t: float, n_max: int, f0_ratio: float = 1.0) -> float:
    """Bound on the L1 mass of all series terms beyond ``n_max``.

    For a stationary start the k-th factorial moment of the collision count
    is at most (mu t)**k E[lambda**k] (Hoelder along the path), which bounds
    P(N > n_max); each surviving term also carries (1 - alpha)**(n_max+1).
    ``f0_ratio`` is sup f0 / M and scales the bound for other initial laws.
    """
    m = n_max + 1
    tail = (params.mu * t) ** m * maxwellian_rate_moment(m, params.beta) / math.factorial(m)
    return float(f0_ratio * (1.0 - params.alpha) ** m * min(1.0, tail))


def _series_weights(
    params: SimParams,
    t: float,
    v_end: np.ndarray,
    n_max: int,
    rng: np.random.Generator,
    f0: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Per-sample estimates of each Duhamel term at the end velocities
    ``v_end`` (shape (S, 3)); returns an (S, n_max+1) array.

    The chain v_n = v_end, v_{n-1}, ..., v_0 is proposed by mechanical jumps
    from v_end, and the jump times uniformly on the ordered simplex; the
    weight is integrand / proposal density with every factor evaluated
    explicitly.
    """
    mu, beta, alpha = params.mu, params.beta, params.alpha
    S = len(v_end)
    out = np.zeros((S, n_max + 1))
    lam_end = collision_rate(v_end, beta)
    out[:, 0] = f0(v_end) * np.exp(-mu * lam_end * t)
    if n_max == 0:
        return out
    chain = [v_end]
    ratio = np.ones(S)  # product of k(v_{j-1} -> v_j) / q(v_{j-1} | v_j)
    for n in range(1, n_max + 1):
        cur = chain[-1]
        xi = sample_collision_partner(cur, beta, rng)
        nh = sample_impact_direction(cur - xi, rng)
        prev, _ = elastic_collide(cur, xi, nh)
        lam_cur = collision_rate(cur, beta)
        proposal = carleman_kernel(cur, prev, beta) / lam_cur
        ratio = ratio * carleman_kernel(prev, cur, beta) / proposal
        chain.append(prev)
        # velocities in forward order v_0 .. v_n and jump times on the simplex
        vel = chain[::-1]
        s = np.sort(rng.random((S, n)) * t, axis=1)
        gaps = np.diff(np.concatenate([np.zeros((S, 1)), s, np.full((S, 1), t)], axis=1), axis=1)
        expo = np.zeros(S)
        for j in range(n + 1):
            expo += collision_rate(vel[j], beta) * gaps[:, j]
        simplex_volume = t**n / math.factorial(n)
        out[:, n] = ((1 - alpha) * mu) ** n * simplex_volume * f0(vel[0]) * ratio * np.exp(-mu * expo)
    return out


def series_solution(
    params: SimParams,
    t: float,
    v,
    n_max: int,
    mc_samples: int,
    rng: np.random.Generator,
    f0: Callable[[np.ndarray], np.ndarray] | None = None,
    f0_ratio: float = 1.0,
) -> SeriesResult:
    """Truncated Duhamel series for the homogeneous density f(t, v)."""
    _check_order(n_max)
    f0 = f0 or (lambda u: maxwellian_density(u, params.beta))
    v_end = np.tile(np.asarray(v, dtype=float), (mc_samples, 1))
    w = _series_weights(params, t, v_end, n_max, rng, f0)
    return _series_result(w, series_tail_bound(params, t, n_max, f0_ratio))


def series_mass(
    params: SimParams,
    t: float,
    n_max: int,
    mc_samples: int,
    rng: np.random.Generator,
    f0: Callable[[np.ndarray], np.ndarray] | None = None,
    f0_ratio: float = 1.0,
) -> SeriesResult:
    """Truncated series for the alive mass, integrating f(t, v) over v by
    importance sampling v from the Maxwellian."""
    _check_order(n_max)
    f0 = f0 or (lambda u: maxwellian_density(u, params.beta))
    v_end = sample_maxwellian(params.beta, rng, mc_samples)
    w = _series_weights(params, t, v_end, n_max, rng, f0)
    w = w / maxwellian_density(v_end, params.beta)[:, None]
    return _series_result(w, series_tail_bound(params, t, n_max, f0_ratio))


def _series_result(w: np.ndarray, bound: float) -> SeriesResult:
    S = w.shape[0]
    total = w.sum(axis=1)
    se = float(total.std(ddof=1) / np.sqrt(S)) if S > 1 else 0.0
    return SeriesResult(
        float(total.mean()), se, w.mean(axis=0),
        w.std(axis=0, ddof=1) / np.sqrt(S) if S > 1 else np.zeros(w.shape[1]), bound,
    )


# -- collision-count moments ------------------------------------------------------


@dataclass
class MomentEstimate:
    times: np.ndarray
    mean: np.ndarray
    mean_stderr: np.ndarray
    second: np.ndarray
    second_stderr: np.ndarray


def collision_moments(
    params: SimParams, times: Sequence[float], n_trials: int | None = None, threads: int = 1
) -> MomentEstimate:
    """First and second moments of the jump count of the process without
    annihilation, started from the Maxwellian."""
    times = np.asarray(times, dtype=float)
    p = params.with_(alpha=0.0, t_max=float(max(times.max(), 0.0)))
    counts = ensemble_limit(p, times, None, n_trials, threads, purpose=Purpose.LIMIT_ALPHA0).record.collisions
    c = counts.astype(float)
    n = c.shape[0]
    sd = lambda a: a.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(a.shape[1])  # noqa: E731
    return MomentEstimate(times, c.mean(axis=0), sd(c), (c**2).mean(axis=0), sd(c**2))


@dataclass
class StationarityResult:
    deviation: float
    stderr: float

    @property
    def z(self) -> float:
        return self.deviation / self.stderr if self.stderr > 0 else 0.0


def stationarity_check(
    params: SimParams, lag: float, t: float, n_trials: int | None = None, threads: int = 1
) -> StationarityResult:
    """Compare E[N(lag, t)**2] with E[N(0, t - lag)**2] on paired trajectories
    of the process without annihilation started from the Maxwellian."""
    if not 0 <= lag <= t:
        raise ValueError("need 0 <= lag <= t")
    if lag == 0 or lag == t:
        return StationarityResult(0.0, 0.0)
    times = [t - lag, lag, t]
    p = params.with_(alpha=0.0, t_max=t)
    counts = ensemble_limit(p, times, None, n_trials, threads, purpose=Purpose.LIMIT_ALPHA0).record.collisions
    counts = counts.astype(float)
    d = (counts[:, 2] - counts[:, 1]) ** 2 - counts[:, 0] ** 2
    return StationarityResult(float(d.mean()), float(d.std(ddof=1) / np.sqrt(len(d))))
