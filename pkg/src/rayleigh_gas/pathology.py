"""Recollisions and interferences of limit-process paths dressed with
virtual hard-sphere obstacles, and the Monte Carlo rate of such paths.

Each jump of a limit trajectory is realized as a contact with a virtual
obstacle of radius eps whose centre at the jump time sits at distance eps
from the tagged particle along the impact direction.  Before the jump the
obstacle moves with the incoming partner velocity, afterwards with the
outgoing one.  In forward time:

* a *recollision* is a later flight segment of the tagged particle that
  comes within eps of an already-hit obstacle's outgoing branch;
* an *interference* is an earlier flight segment that enters the open
  eps-ball around a not-yet-hit obstacle's incoming branch.

All checks minimize a quadratic in time on each segment in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import InitialLaw, Purpose, SimParams, validate
from .limit import LimitBatch, LimitTrajectory, ensemble_limit
from .micro import EnsembleRecord

TANGENCY_MARGIN = 1e-4


@dataclass(frozen=True)
class VirtualObstacle:
    index: int
    contact_time: float
    center: np.ndarray
    w_pre: np.ndarray
    w_post: np.ndarray | None

    def position(self, s: float) -> np.ndarray:
        w = self.w_pre if s <= self.contact_time or self.w_post is None else self.w_post
        return self.center + w * (s - self.contact_time)


def virtual_obstacles(traj: LimitTrajectory, eps: float) -> list[VirtualObstacle]:
    times, xs, _ = traj.vertices()
    out = []
    for i, j in enumerate(traj.jumps, start=1):
        n_hat = j.normal if j.normal is not None else np.full(3, np.nan)
        out.append(VirtualObstacle(i, j.time, xs[i] + eps * n_hat, j.partner_pre, j.partner_post))
    return out


@dataclass
class PathologyReport:
    """Pairs are (obstacle, segment) for recollisions and (segment, obstacle)
    for interferences; obstacles are numbered from 1 in jump order and
    segment k is the flight after the k-th jump (segment 0 starts at time 0).
    ``margins`` maps each checked pair to its closest approach minus eps."""

    has_recollision: bool
    has_interference: bool
    recollision_pairs: list[tuple[int, int]] = field(default_factory=list)
    interference_pairs: list[tuple[int, int]] = field(default_factory=list)
    margins: dict[tuple[str, int, int], float] = field(default_factory=dict)
    ambiguous: bool = False

    @property
    def pathological(self) -> bool:
        return self.has_recollision or self.has_interference


def _segment_min(p: np.ndarray, q: np.ndarray, length: np.ndarray) -> np.ndarray:
    """min over u in [0, length] of |p + q u| (broadcast over leading axes)."""
    qq = np.sum(q * q, axis=-1)
    pq = np.sum(p * q, axis=-1)
    u = np.where(qq > 0, -pq / np.where(qq > 0, qq, 1.0), 0.0)
    u = np.clip(u, 0.0, length)
    d = p + q * u[..., None]
    return np.sqrt(np.sum(d * d, axis=-1))


def _approach_tables(
    tau: np.ndarray,
    xj: np.ndarray,
    vseg: np.ndarray,
    normal: np.ndarray,
    w_pre: np.ndarray,
    w_post: np.ndarray,
    t_end: np.ndarray,
    eps: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Closest approaches for ``T`` trajectories with ``n`` jumps each.

    Inputs: jump times ``tau`` (T, n), tagged positions at jumps ``xj``
    (T, n, 3), segment velocities ``vseg`` (T, n+1, 3), impact directions,
    partner velocities, and path end times ``t_end`` (T,).  Returns
    ``(rec, rec_mask, inter, inter_mask)``: distances of shape (T, n, n+1)
    indexed by (obstacle, segment) with masks of the pairs that count.
    """
    T, n = tau.shape
    seg_start = np.concatenate([np.zeros((T, 1)), tau], axis=1)
    seg_end = np.concatenate([tau, t_end[:, None]], axis=1)
    x_start = np.concatenate([xj[:, :1] - vseg[:, :1] * tau[:, :1, None], xj], axis=1)
    center = xj + eps * normal
    length = np.maximum(seg_end - seg_start, 0.0)

    def dist(w):
        # obstacle j, segment k: relative position at the segment start
        obst_at = center[:, :, None, :] + w[:, :, None, :] * (
            seg_start[:, None, :, None] - tau[:, :, None, None]
        )
        p = x_start[:, None, :, :] - obst_at
        q = vseg[:, None, :, :] - w[:, :, None, :]
        return _segment_min(p, q, np.broadcast_to(length[:, None, :], p.shape[:-1]))

    j = np.arange(n)[:, None]
    k = np.arange(n + 1)[None, :]
    # obstacle j (0-based) is hit between segments j and j+1
    rec_mask = np.broadcast_to(k >= j + 2, (T, n, n + 1))
    inter_mask = np.broadcast_to(k <= j - 1, (T, n, n + 1))
    with np.errstate(invalid="ignore"):
        rec = dist(w_post)
        inter = dist(w_pre)
    return rec, rec_mask, inter, inter_mask


def _trajectory_arrays(traj: LimitTrajectory):
    times, xs, vs = traj.vertices()
    n = len(traj.jumps)
    tau = times[1:][None, :]
    xj = xs[1:][None, :]
    vseg = vs[None, :]
    vseg = np.where(np.isnan(vseg), 0.0, vseg)
    normal = np.array([j.normal for j in traj.jumps]).reshape(1, n, 3)
    w_pre = np.array([j.partner_pre for j in traj.jumps]).reshape(1, n, 3)
    w_post = np.array(
        [j.partner_post if j.partner_post is not None else np.full(3, np.nan) for j in traj.jumps]
    ).reshape(1, n, 3)
    dead = bool(traj.jumps) and traj.jumps[-1].annihilating
    t_end = np.array([times[-1] if dead else traj.t_max])
    return tau, xj, vseg, normal, w_pre, w_post, t_end


def classify(traj: LimitTrajectory, eps: float) -> PathologyReport:
    """Recollision and interference pairs of one trajectory."""
    n = len(traj.jumps)
    if n < 2:
        return PathologyReport(False, False)
    rec, rm, inter, im = _approach_tables(*_trajectory_arrays(traj), eps)
    report = PathologyReport(False, False)
    tol = TANGENCY_MARGIN * eps
    for j in range(n):
        for k in range(n + 1):
            if rm[0, j, k] and np.isfinite(rec[0, j, k]):
                m = float(rec[0, j, k] - eps)
                report.margins[("recollision", j + 1, k)] = m
                if abs(m) < tol:
                    report.ambiguous = True
                elif m <= 0:
                    report.recollision_pairs.append((j + 1, k))
            if im[0, j, k] and np.isfinite(inter[0, j, k]):
                m = float(inter[0, j, k] - eps)
                report.margins[("interference", k, j + 1)] = m
                if abs(m) < tol:
                    report.ambiguous = True
                elif m < 0:
                    report.interference_pairs.append((k, j + 1))
    report.has_recollision = bool(report.recollision_pairs)
    report.has_interference = bool(report.interference_pairs)
    return report


@dataclass
class BatchClassification:
    has_recollision: np.ndarray
    has_interference: np.ndarray
    ambiguous: np.ndarray

    @property
    def indicator_sum(self) -> np.ndarray:
        return self.has_recollision.astype(float) + self.has_interference.astype(float)


def classify_batch(batch: LimitBatch, eps: float, t_end: float | None = None) -> BatchClassification:
    """Vectorized :func:`classify` over a batch of trajectories, restricted to
    the time window [0, t_end] (default: the whole run)."""
    t_end = batch.t_max if t_end is None else float(t_end)
    T = batch.n_trials
    rec_any = np.zeros(T, dtype=bool)
    int_any = np.zeros(T, dtype=bool)
    amb = np.zeros(T, dtype=bool)
    start = batch.start
    # jumps are time-ordered within a trial, so the window keeps a prefix
    cs = np.concatenate([[0], np.cumsum(batch.time <= t_end)])
    counts = cs[start[1:]] - cs[start[:-1]]
    tol = TANGENCY_MARGIN * eps
    for n in np.unique(counts):
        if n < 2:
            continue
        trials = np.flatnonzero(counts == n)
        rows = start[trials][:, None] + np.arange(n)[None, :]
        tau = batch.time[rows]
        v_pre = batch.v_pre[rows]
        w_pre = batch.partner_pre[rows]
        w_post = batch.partner_post[rows]
        normal = batch.normal[rows]
        killed = batch.annihilating[rows]
        v_post = np.where(killed[..., None], 0.0, batch.v_post[rows])
        vseg = np.concatenate([v_pre[:, :1], v_post], axis=1)
        # tagged positions at the jumps
        x0 = batch.x0[trials]
        seg_t = np.diff(np.concatenate([np.zeros((len(trials), 1)), tau], axis=1), axis=1)
        xj = x0[:, None, :] + np.cumsum(vseg[:, :n] * seg_t[..., None], axis=1)
        end = np.where(killed[:, -1], tau[:, -1], t_end)
        rec, rm, inter, im = _approach_tables(tau, xj, vseg, normal, w_pre, w_post, end, eps)
        with np.errstate(invalid="ignore"):
            rec_hit = rm & (rec - eps <= -tol)
            int_hit = im & (inter - eps <= -tol)
            near = (rm & (np.abs(rec - eps) < tol)) | (im & (np.abs(inter - eps) < tol))
        rec_any[trials] = rec_hit.any(axis=(1, 2))
        int_any[trials] = int_hit.any(axis=(1, 2))
        amb[trials] = near.any(axis=(1, 2))
    return BatchClassification(rec_any, int_any, amb)


# -- estimators --------------------------------------------------------------------


@dataclass
class PsiEstimate:
    epsilon: float
    t: float
    psi: float
    stderr: float
    n_trials: int
    n_ambiguous: int
    recollision_frac: float
    interference_frac: float


def _psi_from(cls: BatchClassification, eps: float, t: float) -> PsiEstimate:
    use = ~cls.ambiguous
    s = cls.indicator_sum[use]
    n = int(use.sum())
    se = float(s.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return PsiEstimate(
        eps, t, float(s.mean()) if n else float("nan"), se, n, int(cls.ambiguous.sum()),
        float(cls.has_recollision[use].mean()) if n else float("nan"),
        float(cls.has_interference[use].mean()) if n else float("nan"),
    )


def psi_sweep(
    params: SimParams,
    epsilons: Sequence[float],
    times: Sequence[float] | None = None,
    n_trials: int | None = None,
    initial: InitialLaw | None = None,
    threads: int = 1,
) -> list[PsiEstimate]:
    """Rate of pathological paths for each (eps, t); one set of trajectories
    of the process without annihilation is shared by the whole grid."""
    validate(params)
    times = [params.t_max] if times is None else list(times)
    p = params.with_(alpha=0.0, t_max=float(max(times)))
    batch = ensemble_limit(p, [p.t_max], initial, n_trials, threads, purpose=Purpose.PSI)
    out = []
    for eps in epsilons:
        for t in times:
            out.append(_psi_from(classify_batch(batch, float(eps), t), float(eps), float(t)))
    return out


def estimate_psi(
    params: SimParams, t: float | None = None, n_trials: int | None = None,
    initial: InitialLaw | None = None, threads: int = 1,
) -> PsiEstimate:
    """E[1_rec + 1_int] over paths without annihilation, at ``params.epsilon``."""
    t = params.t_max if t is None else t
    return psi_sweep(params.with_(t_max=t), [params.epsilon], [t], n_trials, initial, threads)[0]


@dataclass
class SlopeFit:
    slope: float
    slope_stderr: float
    intercept: float


def loglog_slope(eps: Sequence[float], psi: Sequence[float], stderr: Sequence[float] | None = None) -> SlopeFit:
    """Weighted least-squares slope of log psi against log eps."""
    x = np.log(np.asarray(eps, dtype=float))
    y = np.log(np.asarray(psi, dtype=float))
    if stderr is None:
        w = np.ones_like(x)
    else:
        rel = np.asarray(stderr, dtype=float) / np.asarray(psi, dtype=float)
        w = 1.0 / np.maximum(rel, 1e-12) ** 2
    (slope, intercept), cov = np.polyfit(x, y, 1, w=np.sqrt(w), cov="unscaled") if len(x) > 2 else (
        np.polyfit(x, y, 1), np.zeros((2, 2)))
    return SlopeFit(float(slope), float(np.sqrt(max(cov[0, 0], 0.0))), float(intercept))


@dataclass
class MicroPathologyRow:
    epsilon: float
    t: float
    micro_recollision_rate: float
    micro_stderr: float
    psi: float
    psi_stderr: float


def micro_pathology_rate(record: EnsembleRecord, checkpoint: int = -1) -> tuple[float, float]:
    """Fraction of (unflagged) micro trials with at least one recollision by
    the given checkpoint, with its standard error."""
    use = ~record.flagged
    r = (record.recollisions[use, checkpoint] > 0).astype(float)
    n = len(r)
    if n == 0:
        return float("nan"), float("nan")
    return float(r.mean()), float(r.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def compare_pathology(record: EnsembleRecord, psi: PsiEstimate, checkpoint: int = -1) -> MicroPathologyRow:
    rate, se = micro_pathology_rate(record, checkpoint)
    return MicroPathologyRow(psi.epsilon, float(record.checkpoints[checkpoint]), rate, se, psi.psi, psi.stderr)
