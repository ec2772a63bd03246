"""Event-driven hard-sphere dynamics of one tagged particle in an ideal gas
of moving, marked obstacles.

Two engines share the same collision rules:

* :func:`run_trajectory` works on a pre-sampled :class:`ObstacleField`
  (deterministic given the field).
* :func:`run_trajectory_lazy` never builds the field.  It samples first
  contacts sequentially: candidates arrive at the free-flight rate and are
  discarded when their unperturbed worldline would already have touched the
  tagged particle's recorded path, which is exactly the thinning the Poisson
  field imposes.  Obstacles that were hit are kept and can be met again.
  With ``ideal=True`` the thinning and the re-encounters are switched off and
  the same random numbers drive the limit jump process instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    ANNIHILATED,
    Alive,
    InitialLaw,
    Mark,
    Purpose,
    SimParams,
    TaggedState,
    derive_stream,
    run_chunked,
    stream_id,
    validate,
)
from .maxwellian import (
    collision_rate,
    elastic_collide,
    sample_collision_partner,
    sample_impact_direction,
)
from .poisson_field import (
    Ball,
    ObstacleField,
    miss_probability_bound,
    path_excursion,
    required_radius,
    sample_field,
    speed_cutoff,
)

GRAZING_TOL = 1e-14
SIMULTANEOUS_TOL = 1e-12
# relative slack below which a start position counts as touching, not overlapping
OVERLAP_TOL = 1e-9


class OverlapError(ValueError):
    """The tagged particle starts strictly inside an obstacle."""


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    obstacle_id: int
    kind: Mark
    normal: np.ndarray
    x: np.ndarray
    v_pre: np.ndarray
    w_pre: np.ndarray
    v_post: np.ndarray | None = None
    w_post: np.ndarray | None = None
    center: np.ndarray | None = None


@dataclass
class MicroTrajectory:
    x0: np.ndarray
    v0: np.ndarray
    events: list[CollisionEvent]
    final_state: TaggedState
    t_end: float
    recollision_count: int
    flags: dict[str, bool] = field(
        default_factory=lambda: {
            "boundary_violation": False,
            "grazing_detected": False,
            "simultaneous_detected": False,
        }
    )
    miss_bound: float = 0.0
    n_obstacles: int = 0

    @property
    def flagged(self) -> bool:
        return any(self.flags.values())

    @property
    def annihilated_at(self) -> float:
        if self.events and self.events[-1].kind == Mark.ANNIHILATING:
            return self.events[-1].time
        return math.inf

    def vertices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Times, positions and outgoing velocities at the start and after each
        elastic event (the path is linear between vertices)."""
        times = [0.0]
        xs = [self.x0]
        vs = [self.v0]
        for ev in self.events:
            if ev.kind == Mark.ANNIHILATING:
                break
            times.append(ev.time)
            xs.append(ev.x)
            vs.append(ev.v_post)
        return np.array(times), np.array(xs), np.array(vs)

    def state_at(self, t: float) -> TaggedState:
        if t >= self.annihilated_at:
            return ANNIHILATED
        times, xs, vs = self.vertices()
        k = int(np.searchsorted(times, t, side="right")) - 1
        return Alive(xs[k] + vs[k] * (t - times[k]), vs[k])

    def collisions_by(self, t: float) -> int:
        return sum(1 for ev in self.events if ev.time <= t)

    def recollisions_by(self, t: float) -> int:
        seen: set[int] = set()
        count = 0
        for ev in self.events:
            if ev.time > t:
                break
            if ev.obstacle_id in seen:
                count += 1
            seen.add(ev.obstacle_id)
        return count


def _contact_times(xr: np.ndarray, vr: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Earliest entry times into the eps-ball for relative positions ``xr``
    and velocities ``vr`` (rows).  Returns ``(s, grazing)`` with ``s = inf``
    where no approaching contact exists.

    The root is written as c / (-b + sqrt(disc)) so that nearly tangent
    approaches do not lose digits to cancellation.
    """
    b = np.einsum("ij,ij->i", xr, vr)
    a = np.einsum("ij,ij->i", vr, vr)
    c = np.einsum("ij,ij->i", xr, xr) - eps * eps
    disc = b * b - a * c
    approaching = b < 0
    grazing = approaching & (np.abs(disc) <= GRAZING_TOL * b * b)
    hit = approaching & (disc > 0) & ~grazing
    s = np.full(len(b), np.inf)
    if np.any(hit):
        sq = np.sqrt(disc[hit])
        s[hit] = np.maximum(c[hit], 0.0) / (-b[hit] + sq)
    return s, grazing


def time_to_contact(x, v, c, w, eps: float) -> float | None:
    """Time until the tagged point at ``x`` moving with ``v`` first touches
    the sphere of radius ``eps`` centred at ``c`` moving with ``w``; None when
    they never touch."""
    xr = np.asarray(x, dtype=float) - np.asarray(c, dtype=float)
    d2 = float(xr @ xr)
    if d2 < eps * eps * (1.0 - OVERLAP_TOL):
        raise OverlapError("tagged particle starts inside the obstacle")
    vr = np.asarray(v, dtype=float) - np.asarray(w, dtype=float)
    s, grazing = _contact_times(xr[None, :], vr[None, :], eps)
    if grazing[0] or not np.isfinite(s[0]):
        return None
    return float(s[0])


class _Obstacles:
    """Growable store of obstacle worldlines ``anchor + vel * (t - t_anchor)``."""

    def __init__(self, capacity: int = 64):
        self.n = 0
        self.anchor = np.empty((capacity, 3))
        self.t_anchor = np.empty(capacity)
        self.vel = np.empty((capacity, 3))
        self.mark = np.empty(capacity, dtype=np.int8)
        self.ids = np.empty(capacity, dtype=np.int64)

    def extend(self, centers, t0, vel, marks, ids) -> None:
        m = len(centers)
        if self.n + m > len(self.t_anchor):
            cap = max(2 * len(self.t_anchor), self.n + m)
            for name in ("anchor", "t_anchor", "vel", "mark", "ids"):
                old = getattr(self, name)
                new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
                new[: self.n] = old[: self.n]
                setattr(self, name, new)
        sl = slice(self.n, self.n + m)
        self.anchor[sl] = centers
        self.t_anchor[sl] = t0
        self.vel[sl] = vel
        self.mark[sl] = marks
        self.ids[sl] = ids
        self.n += m

    def positions(self, t: float) -> np.ndarray:
        n = self.n
        return self.anchor[:n] + self.vel[:n] * (t - self.t_anchor[:n, None])


def _next_contact(store: _Obstacles, x, v, t, eps, flags) -> tuple[float, int]:
    """Earliest contact among stored obstacles; returns (s, row) or (inf, -1)."""
    if store.n == 0:
        return math.inf, -1
    pos = store.positions(t)
    xr = x - pos
    vr = v - store.vel[: store.n]
    s, grazing = _contact_times(xr, vr, eps)
    if np.any(grazing):
        flags["grazing_detected"] = True
    k = int(np.argmin(s))
    s_min = s[k]
    if not np.isfinite(s_min):
        return math.inf, -1
    tied = np.flatnonzero(s <= s_min + SIMULTANEOUS_TOL)
    if len(tied) > 1:
        flags["simultaneous_detected"] = True
        k = int(tied[np.argmin(store.ids[tied])])
        s_min = s[k]
    return float(s_min), k


def _event_loop(params: SimParams, x0, v0, store: _Obstacles, explore=None) -> MicroTrajectory:
    """Advance from (x0, v0) at time 0 to ``params.t_max``.

    ``explore(x, v, t)`` (optional) is called at the start of every flight
    leg before contacts are searched, and may add obstacles to ``store``.
    """
    eps = params.epsilon
    t_max = params.t_max
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    t = 0.0
    events: list[CollisionEvent] = []
    flags = {"boundary_violation": False, "grazing_detected": False, "simultaneous_detected": False}
    seen: set[int] = set()
    recollisions = 0
    final: TaggedState | None = None
    while t < t_max:
        if explore is not None:
            explore(x, v, t)
        s, k = _next_contact(store, x, v, t, eps, flags)
        if t + s > t_max:
            break
        t_hit = t + s
        x_hit = x + v * s
        c = store.anchor[k] + store.vel[k] * (t_hit - store.t_anchor[k])
        rel = x_hit - c
        n_hat = rel / np.linalg.norm(rel)
        w_pre = store.vel[k].copy()
        oid = int(store.ids[k])
        if oid in seen:
            recollisions += 1
        seen.add(oid)
        if store.mark[k] == Mark.ANNIHILATING:
            events.append(
                CollisionEvent(t_hit, oid, Mark.ANNIHILATING, n_hat, x_hit, v.copy(), w_pre, center=c)
            )
            final = ANNIHILATED
            t = t_hit
            break
        v_post, w_post = elastic_collide(v, w_pre, n_hat)
        events.append(
            CollisionEvent(t_hit, oid, Mark.ELASTIC, n_hat, x_hit, v.copy(), w_pre, v_post, w_post, c)
        )
        store.anchor[k] = c
        store.t_anchor[k] = t_hit
        store.vel[k] = w_post
        x, v, t = x_hit, v_post, t_hit
    if final is None:
        final = Alive(x + v * (t_max - t), v)
        t = t_max
    return MicroTrajectory(
        np.array(x0, dtype=float), np.array(v0, dtype=float), events, final, t, recollisions, flags
    )


def run_trajectory(params: SimParams, x0, v0, field: ObstacleField) -> MicroTrajectory:
    """Deterministic dynamics in a given obstacle field, with the localization
    miss certificate evaluated on the realized path."""
    x0 = np.asarray(x0, dtype=float)
    eps = params.epsilon
    if len(field):
        d2 = np.sum((field.centers - x0) ** 2, axis=1)
        if np.any(d2 < eps * eps * (1.0 - OVERLAP_TOL)):
            raise OverlapError("tagged particle starts inside an obstacle")
    store = _Obstacles(max(len(field), 1))
    store.extend(field.centers, 0.0, field.velocities, field.marks, field.ids)
    traj = _event_loop(params, x0, v0, store)
    times, xs, _ = traj.vertices()
    end = traj.final_state.x if traj.final_state is not ANNIHILATED else xs[-1]
    excursion = path_excursion(np.append(times, traj.t_end), np.vstack([xs, end]), field.region.center)
    bound, flagged = miss_probability_bound(params, field.region, excursion, params.t_max)
    traj.miss_bound = bound
    traj.flags["boundary_violation"] = flagged
    traj.n_obstacles = len(field)
    return traj


def run_trajectory_localized(
    params: SimParams, x0, v0, rng: np.random.Generator
) -> MicroTrajectory:
    """Sample a field on a ball around ``x0`` and run :func:`run_trajectory`.

    In adaptive mode the ball grows by ``growth`` (adding an independent shell,
    so earlier obstacles are kept) until the miss certificate passes.
    """
    loc = params.localization
    w_cut = speed_cutoff(loc.speed_cutoff_quantile, params.beta)
    v_bound = max(w_cut, float(np.linalg.norm(v0)))
    radius = loc.radius or required_radius(params, params.t_max, w_cut, v_bound)
    center = tuple(float(c) for c in np.asarray(x0, dtype=float))
    fld = sample_field(params, x0, Ball(center, radius), rng)
    traj = run_trajectory(params, x0, v0, fld)
    if loc.mode == "adaptive":
        for _ in range(loc.max_growth_steps):
            if not traj.flags["boundary_violation"]:
                break
            new_radius = radius * loc.growth
            shell = sample_field(params, x0, Ball(center, new_radius, inner=radius), rng)
            fld = fld.merged(shell)
            radius = new_radius
            traj = run_trajectory(params, x0, v0, fld)
    return traj


# -- on-demand field ------------------------------------------------------------


def _touches_path(c0: np.ndarray, w: np.ndarray, legs: list, eps: float) -> bool:
    """Whether the unperturbed worldline c0 + w s passes within eps of any
    recorded flight leg (x_m + v_m (s - a_m) for s in [a_m, e_m])."""
    for xm, vm, am, em in legs:
        p = xm - (c0 + w * am)
        q = vm - w
        qq = float(q @ q)
        u = 0.0 if qq == 0 else min(max(-float(p @ q) / qq, 0.0), em - am)
        d = p + q * u
        if float(d @ d) <= eps * eps:
            return True
    return False


def run_trajectory_lazy(
    params: SimParams, x0, v0, rng: np.random.Generator, ideal: bool = False
) -> MicroTrajectory:
    """Exact dynamics in an infinite Poisson field, sampled in order of first
    contact.

    Along a flight leg with velocity v, obstacles that have not yet been met
    enter the eps-ball around the tagged particle as a Poisson process in
    time with rate mu * lambda(v); at an entry the obstacle velocity has
    density proportional to M(w)|v - w| and the impact point is uniform on
    the cross-section, so the contact normal is cosine-weighted about v - w.
    Space-time already explored is not fresh: a candidate whose unperturbed
    worldline would have touched an earlier leg, or that overlapped the
    starting point at time 0, does not exist and is thinned out.  Obstacles
    that were hit are kept and can be met again.

    With ``ideal=True`` thinning and re-encounters are switched off, which
    turns the engine into the limit jump process driven by the same random
    numbers (events then carry no obstacle identity beyond their index).
    """
    mu, beta, alpha, eps, t_max = params.mu, params.beta, params.alpha, params.epsilon, params.t_max
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    x_start = x.copy()
    t = 0.0
    store = _Obstacles()
    legs: list[tuple[np.ndarray, np.ndarray, float, float]] = []
    events: list[CollisionEvent] = []
    flags = {"boundary_violation": False, "grazing_detected": False, "simultaneous_detected": False}
    seen: set[int] = set()
    recollisions = 0
    final: TaggedState | None = None
    next_id = 0
    while True:
        # earliest re-encounter with an obstacle already hit
        s_known, k = (math.inf, -1) if ideal else _next_contact(store, x, v, t, eps, flags)
        horizon = min(t_max, t + s_known)
        rate = mu * float(collision_rate(v, beta))
        s_new = t
        fresh = None
        while True:
            s_new += rng.exponential() / rate
            if s_new > horizon:
                break
            w = sample_collision_partner(v, beta, rng)
            n_hat = sample_impact_direction(v - w, rng)
            x_hit = x + v * (s_new - t)
            c = x_hit + eps * n_hat
            if not ideal:
                c0 = c - w * s_new
                if float(np.sum((c0 - x_start) ** 2)) <= eps * eps or _touches_path(c0, w, legs, eps):
                    continue
            fresh = (w, n_hat, x_hit, c)
            break
        if fresh is None and t + s_known > t_max:
            legs.append((x.copy(), v.copy(), t, t_max))
            break
        if fresh is not None:
            w_pre, n_hat, x_hit, c = fresh
            t_hit = s_new
            mark = Mark.ANNIHILATING if rng.random() < alpha else Mark.ELASTIC
            oid = next_id
            next_id += 1
            row = None
        else:
            t_hit = t + s_known
            x_hit = x + v * s_known
            c = store.anchor[k] + store.vel[k] * (t_hit - store.t_anchor[k])
            rel = c - x_hit
            n_hat = rel / np.linalg.norm(rel)
            w_pre = store.vel[k].copy()
            mark = Mark(int(store.mark[k]))
            oid = int(store.ids[k])
            row = k
        legs.append((x.copy(), v.copy(), t, t_hit))
        if oid in seen:
            recollisions += 1
        seen.add(oid)
        # the event normal points from the obstacle centre to the particle
        normal = -n_hat
        if mark == Mark.ANNIHILATING:
            events.append(CollisionEvent(t_hit, oid, mark, normal, x_hit, v.copy(), w_pre, center=c))
            final = ANNIHILATED
            t = t_hit
            break
        v_post, w_post = elastic_collide(v, w_pre, n_hat)
        events.append(CollisionEvent(t_hit, oid, mark, normal, x_hit, v.copy(), w_pre, v_post, w_post, c))
        if not ideal:
            if row is None:
                store.extend(c[None, :], t_hit, w_post[None, :], [int(mark)], [oid])
            else:
                store.anchor[row] = c
                store.t_anchor[row] = t_hit
                store.vel[row] = w_post
        x, v, t = x_hit, v_post, t_hit
    if final is None:
        final = Alive(x + v * (t_max - t), v)
        t = t_max
    traj = MicroTrajectory(np.array(x0, dtype=float), np.array(v0, dtype=float), events, final, t,
                           recollisions, flags)
    traj.n_obstacles = next_id
    return traj


# -- ensembles -----------------------------------------------------------------


@dataclass
class EnsembleRecord:
    """Per-trial observables at each checkpoint, shared by the micro and
    limit engines.  Arrays are indexed (trial, checkpoint)."""

    checkpoints: np.ndarray
    alive: np.ndarray
    x: np.ndarray
    v: np.ndarray
    collisions: np.ndarray
    recollisions: np.ndarray
    flagged: np.ndarray
    contact_residual: float = 0.0

    @property
    def n_trials(self) -> int:
        return len(self.flagged)

    @classmethod
    def concatenate(cls, parts: Sequence["EnsembleRecord"]) -> "EnsembleRecord":
        return cls(
            parts[0].checkpoints,
            np.concatenate([p.alive for p in parts]),
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.v for p in parts]),
            np.concatenate([p.collisions for p in parts]),
            np.concatenate([p.recollisions for p in parts]),
            np.concatenate([p.flagged for p in parts]),
            max(p.contact_residual for p in parts),
        )

    def select(self, mask) -> "EnsembleRecord":
        return EnsembleRecord(self.checkpoints, self.alive[mask], self.x[mask], self.v[mask],
                              self.collisions[mask], self.recollisions[mask], self.flagged[mask],
                              self.contact_residual)


@dataclass
class EnsembleStats:
    checkpoints: np.ndarray
    alive_frac: np.ndarray
    annihil_frac: np.ndarray
    annihil_stderr: np.ndarray
    mean_collisions: np.ndarray
    mean_collisions_stderr: np.ndarray
    second_moment: np.ndarray
    recollision_rate: np.ndarray
    recollision_stderr: np.ndarray
    flagged_frac: float
    n_used: int

    COLUMNS = (
        "checkpoint",
        "alive_frac",
        "annihil_frac",
        "mean_collisions",
        "second_moment",
        "recollision_rate",
        "flagged_frac",
    )

    def rows(self) -> list[list[float]]:
        return [
            [
                float(self.checkpoints[i]),
                float(self.alive_frac[i]),
                float(self.annihil_frac[i]),
                float(self.mean_collisions[i]),
                float(self.second_moment[i]),
                float(self.recollision_rate[i]),
                float(self.flagged_frac),
            ]
            for i in range(len(self.checkpoints))
        ]


def _stderr(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    if n < 2:
        return np.zeros(x.shape[1:])
    return x.std(axis=0, ddof=1) / np.sqrt(n)


def summarize(rec: EnsembleRecord) -> EnsembleStats:
    """Checkpoint statistics over unflagged trials."""
    use = ~rec.flagged
    n = int(use.sum())
    alive = rec.alive[use].astype(float)
    coll = rec.collisions[use].astype(float)
    recol = (rec.recollisions[use] > 0).astype(float)
    if n == 0:
        z = np.full(len(rec.checkpoints), np.nan)
        return EnsembleStats(rec.checkpoints, z, z, z, z, z, z, z, z, 1.0, 0)
    return EnsembleStats(
        rec.checkpoints,
        alive.mean(axis=0),
        1.0 - alive.mean(axis=0),
        _stderr(alive),
        coll.mean(axis=0),
        _stderr(coll),
        (coll**2).mean(axis=0),
        recol.mean(axis=0),
        _stderr(recol),
        float(rec.flagged.mean()),
        n,
    )


def _record_micro(trajs: list[MicroTrajectory], checkpoints: np.ndarray, eps: float) -> EnsembleRecord:
    n, m = len(trajs), len(checkpoints)
    alive = np.zeros((n, m), dtype=bool)
    x = np.full((n, m, 3), np.nan)
    v = np.full((n, m, 3), np.nan)
    coll = np.zeros((n, m), dtype=np.int64)
    recol = np.zeros((n, m), dtype=np.int64)
    flagged = np.zeros(n, dtype=bool)
    resid = 0.0
    for i, tr in enumerate(trajs):
        flagged[i] = tr.flagged
        times = np.array([ev.time for ev in tr.events])
        ids = [ev.obstacle_id for ev in tr.events]
        seen: set[int] = set()
        rep = np.zeros(len(ids), dtype=np.int64)
        for j, oid in enumerate(ids):
            rep[j] = oid in seen
            seen.add(oid)
        rep_cum = np.cumsum(rep)
        for ev in tr.events:
            if ev.center is not None:
                resid = max(resid, abs(float(np.linalg.norm(ev.x - ev.center)) - eps))
        vt, vx, vv = tr.vertices()
        t_dead = tr.annihilated_at
        for k, tc in enumerate(checkpoints):
            cnt = int(np.searchsorted(times, tc, side="right"))
            coll[i, k] = cnt
            recol[i, k] = rep_cum[cnt - 1] if cnt else 0
            if tc < t_dead:
                alive[i, k] = True
                j = int(np.searchsorted(vt, tc, side="right")) - 1
                x[i, k] = vx[j] + vv[j] * (tc - vt[j])
                v[i, k] = vv[j]
    return EnsembleRecord(checkpoints, alive, x, v, coll, recol, flagged, resid)


def ensemble_micro(
    params: SimParams,
    checkpoints: Sequence[float] | None = None,
    initial: InitialLaw | None = None,
    n_trials: int | None = None,
    engine: str = "lazy",
    threads: int = 1,
    keep_trajectories: bool = False,
    ideal: bool = False,
) -> tuple[EnsembleRecord, list[MicroTrajectory] | None]:
    """Run independent micro trajectories and record checkpoint observables.

    Trial ``i`` draws its start and its obstacles from its own stream, so the
    record is identical for any thread count.  ``engine`` is ``"lazy"``
    (exact on-demand field) or ``"field"`` (localized pre-sampled field).
    ``ideal=True`` runs the lazy engine with geometry switched off: trial
    ``i`` is then the limit-process twin of micro trial ``i``, driven by the
    same random numbers up to its first pathology.
    """
    validate(params)
    if engine not in ("lazy", "field"):
        raise ValueError(f"unknown engine {engine!r}")
    if ideal and engine != "lazy":
        raise ValueError("the ideal twin exists only for the lazy engine")
    n = params.n_trials if n_trials is None else n_trials
    cps = np.asarray([params.t_max] if checkpoints is None else checkpoints, dtype=float)
    if np.any(cps > params.t_max) or np.any(cps < 0):
        raise ValueError("checkpoints must lie in [0, t_max]")
    law = initial or InitialLaw()

    def block(_k: int, start: int, stop: int):
        trajs = []
        for i in range(start, stop):
            rng = derive_stream(params.seed, stream_id(Purpose.MICRO, i))
            x0, v0 = law.sample(rng, 1, params.beta)
            if engine == "lazy":
                trajs.append(run_trajectory_lazy(params, x0[0], v0[0], rng, ideal))
            else:
                trajs.append(run_trajectory_localized(params, x0[0], v0[0], rng))
        return _record_micro(trajs, cps, params.epsilon), (trajs if keep_trajectories else None)

    parts = run_chunked(block, n, threads, chunk=256)
    record = EnsembleRecord.concatenate([p[0] for p in parts])
    trajs = [t for p in parts for t in p[1]] if keep_trajectories else None
    return record, trajs


def write_event_log(traj: MicroTrajectory, path) -> None:
    """Per-event debug log of one trajectory as CSV."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "obstacle_id", "kind", "nx", "ny", "nz", "vx_pre", "vy_pre", "vz_pre",
                    "vx_post", "vy_post", "vz_post"])
        for ev in traj.events:
            post = ev.v_post if ev.v_post is not None else [math.nan] * 3
            w.writerow([repr(ev.time), ev.obstacle_id, ev.kind.name.lower(),
                        *map(repr, map(float, ev.normal)), *map(repr, map(float, ev.v_pre)),
                        *map(repr, map(float, post))])
