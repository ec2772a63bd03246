"""Histograms, L1 distances between empirical laws, micro-vs-limit
comparison, and the diffusion experiments without annihilation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, special, stats

from .core import (
    InitialLaw,
    Purpose,
    SimParams,
    chunk_bounds,
    derive_stream,
    run_chunked,
    stream_id,
    validate,
)
from .limit import ensemble_limit, simulate_batch
from .maxwellian import carleman_kernel, collision_rate, mean_collision_rate
from .micro import EnsembleRecord, ensemble_micro


class GridMismatchError(ValueError):
    pass


class FitRejectedError(RuntimeError):
    pass


# -- empirical densities -------------------------------------------------------------


@dataclass
class EmpiricalDensity:
    """Weighted histogram on a regular grid.

    ``counts`` holds the weight per bin; ``outside`` the weight that fell off
    the grid, so ``counts.sum() + outside == total``.
    """

    lo: np.ndarray
    hi: np.ndarray
    bins: tuple[int, ...]
    counts: np.ndarray
    outside: float
    total: float

    @property
    def widths(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.bins)

    @property
    def bin_volume(self) -> float:
        return float(np.prod(self.widths))

    def density(self) -> np.ndarray:
        return self.counts / (self.total * self.bin_volume)

    def same_grid(self, other: "EmpiricalDensity") -> bool:
        return (
            self.bins == other.bins
            and np.allclose(self.lo, other.lo, rtol=0, atol=0)
            and np.allclose(self.hi, other.hi, rtol=0, atol=0)
        )

    @classmethod
    def from_samples(cls, samples, lo, hi, bins, weights=None) -> "EmpiricalDensity":
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        d = samples.shape[1]
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (d,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (d,)).copy()
        bins = tuple(np.broadcast_to(np.asarray(bins, dtype=int), (d,)).tolist())
        if np.any(hi <= lo) or min(bins) < 1:
            raise ValueError("bin widths must be positive")
        w = np.ones(len(samples)) if weights is None else np.asarray(weights, dtype=float)
        counts, _ = np.histogramdd(samples, bins=bins, range=list(zip(lo, hi)), weights=w)
        total = float(w.sum())
        return cls(lo, hi, bins, counts, total - float(counts.sum()), total)

    @classmethod
    def from_masses(cls, masses, lo, hi, outside: float = 0.0) -> "EmpiricalDensity":
        masses = np.asarray(masses, dtype=float)
        d = masses.ndim
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (d,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (d,)).copy()
        return cls(lo, hi, masses.shape, masses, outside, float(masses.sum()) + outside)


def l1_distance(a: EmpiricalDensity, b: EmpiricalDensity) -> float:
    """L1 distance between the two laws after normalizing each to unit mass;
    off-grid mass is one extra bin."""
    if not a.same_grid(b):
        raise GridMismatchError("densities live on different grids")
    if a.total <= 0 or b.total <= 0:
        return float("nan")
    inside = np.abs(a.counts / a.total - b.counts / b.total).sum()
    return float(inside + abs(a.outside / a.total - b.outside / b.total))


def split_half_l1(samples, weights, lo, hi, bins, rng: np.random.Generator, repeats: int = 8) -> float:
    """Mean L1 between histograms of two random halves of one sample set."""
    samples = np.asarray(samples, dtype=float)
    n = len(samples)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    vals = []
    for _ in range(repeats):
        perm = rng.permutation(n)
        h1, h2 = perm[: n // 2], perm[n // 2 : 2 * (n // 2)]
        vals.append(l1_distance(
            EmpiricalDensity.from_samples(samples[h1], lo, hi, bins, w[h1]),
            EmpiricalDensity.from_samples(samples[h2], lo, hi, bins, w[h2]),
        ))
    return float(np.mean(vals))


def noise_floor(split_a: float, split_b: float) -> float:
    """Expected L1 between two independent full-size sample sets of the same
    law, from their split-half values (L1 noise scales like n**-1/2, and a
    split compares two half-size sets)."""
    return 0.5 * float(np.hypot(split_a, split_b))


# -- micro vs limit --------------------------------------------------------------------


@dataclass
class ComparisonRow:
    epsilon: float
    checkpoint: float
    annihil_micro: float
    annihil_micro_stderr: float
    annihil_limit: float
    annihil_limit_stderr: float
    speed_l1: float
    noise_floor: float
    mean_collisions_micro: float
    mean_collisions_micro_stderr: float
    mean_collisions_limit: float
    mean_collisions_limit_stderr: float
    recollision_rate: float
    flagged_frac: float
    # stderr of the per-trial difference when the two ensembles are coupled
    paired_gap_stderr: float | None = None

    @property
    def gap(self) -> float:
        return abs(self.annihil_micro - self.annihil_limit)

    @property
    def gap_stderr(self) -> float:
        if self.paired_gap_stderr is not None:
            return self.paired_gap_stderr
        return float(np.hypot(self.annihil_micro_stderr, self.annihil_limit_stderr))

    @property
    def collision_gap(self) -> float:
        return self.mean_collisions_micro - self.mean_collisions_limit

    COLUMNS = (
        "epsilon", "checkpoint", "annihil_micro", "annihil_micro_stderr", "annihil_limit",
        "annihil_limit_stderr", "annihil_gap", "annihil_gap_stderr", "speed_l1", "noise_floor",
        "mean_collisions_micro", "mean_collisions_micro_stderr", "mean_collisions_limit",
        "mean_collisions_limit_stderr", "recollision_rate", "flagged_frac",
    )

    def row(self) -> list[float]:
        return [
            self.epsilon, self.checkpoint, self.annihil_micro, self.annihil_micro_stderr,
            self.annihil_limit, self.annihil_limit_stderr, self.gap, self.gap_stderr, self.speed_l1,
            self.noise_floor, self.mean_collisions_micro, self.mean_collisions_micro_stderr,
            self.mean_collisions_limit, self.mean_collisions_limit_stderr, self.recollision_rate,
            self.flagged_frac,
        ]


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def mark_weights(record: EnsembleRecord, alpha: float) -> np.ndarray:
    """Survival probability of each trial at each checkpoint given its path
    without annihilation: (1 - alpha) to the number of distinct obstacles
    met.  For the limit process every jump meets a fresh obstacle."""
    distinct = record.collisions - record.recollisions
    return (1.0 - alpha) ** distinct.astype(float)


@dataclass(frozen=True)
class SpeedGrid:
    lo: float = 0.0
    hi: float = 5.0
    bins: int = 40


def compare_records(
    eps: float,
    micro: EnsembleRecord,
    limit: EnsembleRecord,
    alpha: float,
    rng: np.random.Generator,
    grid: SpeedGrid = SpeedGrid(),
    paired: bool = False,
) -> list[ComparisonRow]:
    """Comparison rows from two ensembles run *without* annihilation.

    Annihilation is integrated out exactly: each path carries the weight
    (1 - alpha)**(distinct obstacles met), which is its conditional survival
    probability over the independent marks.  Alive-mass, speed law and
    collision counts are all read from these weighted paths.

    ``paired`` declares that trial i of both records was driven by common
    random numbers; the gap error bar then comes from per-trial differences.
    """
    rows = []
    use = ~micro.flagged
    wm_all = mark_weights(micro, alpha)[use]
    if paired:
        if len(limit.flagged) != len(micro.flagged):
            raise ValueError("paired records need equal trial counts")
        limit = limit.select(use)
    wl_all = mark_weights(limit, alpha)
    for c, tc in enumerate(micro.checkpoints):
        wm, wl = wm_all[:, c], wl_all[:, c]
        am, am_se = _mean_se(1.0 - wm)
        al, al_se = _mean_se(1.0 - wl)
        sm = np.linalg.norm(micro.v[use, c], axis=1)
        sl = np.linalg.norm(limit.v[:, c], axis=1)
        hm = EmpiricalDensity.from_samples(sm, grid.lo, grid.hi, grid.bins, wm)
        hl = EmpiricalDensity.from_samples(sl, grid.lo, grid.hi, grid.bins, wl)
        floor = noise_floor(
            split_half_l1(sm, wm, grid.lo, grid.hi, grid.bins, rng),
            split_half_l1(sl, wl, grid.lo, grid.hi, grid.bins, rng),
        )
        cm, cm_se = _mean_se(micro.collisions[use, c].astype(float))
        cl, cl_se = _mean_se(limit.collisions[:, c].astype(float))
        rr, _ = _mean_se((micro.recollisions[use, c] > 0).astype(float))
        pse = _mean_se(wl - wm)[1] if paired else None
        rows.append(ComparisonRow(
            eps, float(tc), am, am_se, al, al_se, l1_distance(hm, hl), floor,
            cm, cm_se, cl, cl_se, rr, float(micro.flagged.mean()), pse,
        ))
    return rows


def compare_micro_limit(
    params: SimParams,
    epsilons: Sequence[float],
    checkpoints: Sequence[float],
    n_micro: int,
    n_limit: int,
    threads: int = 1,
    grid: SpeedGrid = SpeedGrid(),
    engine: str = "lazy",
    coupled: bool = True,
) -> list[ComparisonRow]:
    """Micro and limit ensembles at the same (mu, beta, alpha) for each eps.

    The limit ensemble does not depend on eps and is simulated once.  When
    ``coupled`` (lazy engine only) it is the ideal twin of the micro
    ensemble: same trial streams, so micro and limit paths coincide until
    the first recollision or interference and every eps shares one set of
    random numbers.  ``n_limit`` is then ignored.  Otherwise an independent
    vectorized limit ensemble of size ``n_limit`` is used.
    """
    validate(params)
    cps = list(checkpoints)
    p0 = params.with_(alpha=0.0, t_max=float(max(cps)))
    coupled = coupled and engine == "lazy"
    if coupled:
        limit, _ = ensemble_micro(p0, cps, None, n_micro, "lazy", threads, ideal=True)
    else:
        limit = ensemble_limit(p0, cps, None, n_limit, threads, purpose=Purpose.LIMIT_ALPHA0).record
    rows = []
    for i, eps in enumerate(epsilons):
        micro, _ = ensemble_micro(p0.with_(epsilon=float(eps)), cps, None, n_micro, engine, threads)
        rng = derive_stream(params.seed, stream_id(Purpose.SPLIT, i))
        rows += compare_records(float(eps), micro, limit, params.alpha, rng, grid, paired=coupled)
    return rows


# -- law of the limit process ---------------------------------------------------------


@dataclass
class LawCheck:
    """Goodness-of-fit p-values for the holding times, the post-jump law and
    stationarity of the Maxwellian under the limit process."""

    holding_p: float
    n_holding: int
    post_jump_chi2: float
    post_jump_dof: int
    post_jump_p: float
    stationarity_p: float

    def passed(self, level: float = 0.01) -> bool:
        return min(self.holding_p, self.post_jump_p, self.stationarity_p) > level


_SPEED_EDGES = np.array([0.6, 1.0, 1.4, 1.9, 2.6])
_COS_EDGES = np.array([-0.5, 0.0, 0.5])


def _speed_cos_bins(u: np.ndarray, axis: np.ndarray) -> np.ndarray:
    s = np.linalg.norm(u, axis=1)
    c = u @ axis / np.maximum(s, 1e-300)
    return np.digitize(s, _SPEED_EDGES) * (len(_COS_EDGES) + 1) + np.digitize(c, _COS_EDGES)


def limit_law_check(
    params: SimParams,
    n_trials: int = 8000,
    n_jumps: int = 100_000,
    is_samples: int = 8_000_000,
    threads: int = 1,
) -> LawCheck:
    """KS test of mu lambda(v) times the holding times, chi-square test of
    the first jump from v = (1, 0, 0) binned in (speed, cosine), and KS tests
    of the velocity at time t_max started from equilibrium.

    Holding intervals are kept only when they start before ``t_max``; the run
    continues 40 mean holding times past that so they are uncensored.
    """
    p = params.with_(alpha=0.0)
    lam0 = float(collision_rate(np.zeros(3), p.beta))
    long = p.with_(t_max=p.t_max + 40.0 / (p.mu * lam0))
    b = ensemble_limit(long, n_trials=n_trials, threads=threads, purpose=Purpose.LIMIT_ALPHA0)
    holds, rates = [], []
    for i in range(b.n_trials):
        s, e = b.start[i], b.start[i + 1]
        t = np.concatenate([[0.0], b.time[s:e]])
        vel = np.vstack([b.v0[i][None], b.v_post[s:e]])
        keep = t[:-1] < p.t_max
        holds.append(np.diff(t)[keep])
        rates.append(p.mu * collision_rate(vel[:-1][keep], p.beta))
    scaled = np.concatenate(holds) * np.concatenate(rates)
    holding_p = float(stats.kstest(scaled, "expon").pvalue)

    rng = derive_stream(p.seed, stream_id(Purpose.GENERIC, 1))
    v = np.array([1.0, 0.0, 0.0])
    one = p.with_(t_max=50.0 / (p.mu * float(collision_rate(v, p.beta))))
    bb = simulate_batch(one, np.zeros((n_jumps, 3)), np.tile(v, (n_jumps, 1)), rng)
    obs = np.bincount(_speed_cos_bins(bb.v_post[bb.start[:-1]], v), minlength=24)
    # expected bin masses of the normalized kernel by importance sampling
    sd = 1.5 / np.sqrt(p.beta)
    prop = v + rng.standard_normal((is_samples, 3)) * sd
    q = np.exp(-0.5 * np.sum((prop - v) ** 2, axis=1) / sd**2) / (2 * np.pi * sd**2) ** 1.5
    w = carleman_kernel(v, prop, p.beta) / q / float(collision_rate(v, p.beta))
    idx = _speed_cos_bins(prop, v)
    mass = np.bincount(idx, weights=w, minlength=24) / is_samples
    var = (np.bincount(idx, weights=w * w, minlength=24) / is_samples - mass**2) / is_samples
    expected = mass * n_jumps
    chi2 = float(np.sum((obs - expected) ** 2 / (expected + var * n_jumps**2)))
    dof = len(obs) - 1

    vs = ensemble_limit(p, n_trials=n_jumps, threads=threads, purpose=Purpose.LIMIT_ALPHA0).record.v[:, -1]
    sig = 1.0 / np.sqrt(p.beta)
    stat_p = min(stats.kstest(np.linalg.norm(vs, axis=1), stats.chi(3, scale=sig).cdf).pvalue,
                 stats.kstest(vs[:, 0], stats.norm(scale=sig).cdf).pvalue)
    return LawCheck(holding_p, len(scaled), chi2, dof, float(stats.chi2.sf(chi2, dof)), float(stat_p))


# -- diffusion ---------------------------------------------------------------------------


@dataclass
class MsdFit:
    D: float
    ci: float
    r2: float
    times: np.ndarray
    msd: np.ndarray
    msd_stderr: np.ndarray
    window_start: float


def _batch_ci(values: np.ndarray) -> float:
    b = len(values)
    return float(1.96 * values.std(ddof=1) / np.sqrt(b)) if b > 1 else float("inf")


def _fit_slope(t: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    A = np.vstack([t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[0]), float(coef[1])


def msd_estimator(
    params: SimParams,
    times: Sequence[float],
    n_trials: int,
    threads: int = 1,
    n_batches: int = 20,
    purpose: Purpose = Purpose.DIFFUSION,
) -> MsdFit:
    """D from the slope of E|X(t) - X(0)|**2 = 6 D t + c on the window
    t >= 10 / (mu <lambda>) where the motion is diffusive."""
    times = np.asarray(times, dtype=float)
    p = params.with_(alpha=0.0, t_max=float(times.max()))
    batch = ensemble_limit(p, [p.t_max], None, n_trials, threads, purpose=purpose)
    x, _, _ = batch.on_grid(times)
    sq = np.sum((x - batch.x0[:, None, :]) ** 2, axis=2)
    t0 = 10.0 / (params.mu * mean_collision_rate(params.beta))
    win = times >= t0
    if win.sum() < 3:
        raise FitRejectedError(f"fewer than 3 times beyond the diffusive window start {t0:.3g}")
    msd = sq.mean(axis=0)
    slope, icpt = _fit_slope(times[win], msd[win])
    resid = msd[win] - (slope * times[win] + icpt)
    ss_tot = np.sum((msd[win] - msd[win].mean()) ** 2)
    r2 = 1.0 - float(np.sum(resid**2) / ss_tot) if ss_tot > 0 else 0.0
    if r2 < 0.99:
        raise FitRejectedError(f"MSD fit R^2 = {r2:.4f} < 0.99")
    parts = np.array_split(np.arange(len(sq)), n_batches)
    slopes = np.array([_fit_slope(times[win], sq[idx][:, win].mean(axis=0))[0] for idx in parts])
    return MsdFit(slope / 6.0, _batch_ci(slopes / 6.0), r2, times, msd,
                  sq.std(axis=0, ddof=1) / np.sqrt(len(sq)), t0)


@dataclass
class GreenKuboFit:
    D: float
    ci: float
    lags: np.ndarray
    autocorrelation: np.ndarray
    correlation_time: float
    tail: float
    tail_rate: float


def _autocorr_sums(v: np.ndarray, max_lag: int) -> np.ndarray:
    """Sum over trials and time origins of v(t).v(t + lag*h) for each lag,
    normalized per origin count; computed with an FFT along time."""
    n, k, _ = v.shape
    size = 1 << int(np.ceil(np.log2(2 * k)))
    fv = np.fft.rfft(v, n=size, axis=1)
    acf = np.fft.irfft(np.sum(fv * np.conj(fv), axis=2), n=size, axis=1)[:, : max_lag + 1]
    origins = k - np.arange(max_lag + 1)
    return acf.sum(axis=0) / origins


def green_kubo_estimator(
    params: SimParams,
    t_corr: float,
    n_trials: int,
    threads: int = 1,
    dt: float | None = None,
    run_length: float | None = None,
    n_batches: int = 20,
) -> GreenKuboFit:
    """D = (1/3) int_0^inf E[V(0).V(s)] ds.

    The stationary autocorrelation is averaged over all time origins of
    trajectories of length ``run_length`` started from the Maxwellian,
    integrated by the trapezoid rule up to ``t_corr`` and continued by an
    exponential tail fitted where the correlation falls from 1/10 to 1/100
    of its initial value.
    """
    p = params.with_(alpha=0.0)
    rate = params.mu * mean_collision_rate(params.beta)
    dt = dt or 0.05 / rate
    max_lag = int(round(t_corr / dt))
    run_length = run_length or 4.0 * t_corr
    grid = np.arange(0.0, run_length + 0.5 * dt, dt)
    if len(grid) <= max_lag:
        raise ValueError("run_length must exceed t_corr")
    p = p.with_(t_max=float(grid[-1]))

    def block(k: int, start: int, stop: int):
        rng = derive_stream(params.seed, stream_id(Purpose.DIFFUSION, (1 << 40) + k))
        x0, v0 = InitialLaw().sample(rng, stop - start, params.beta)
        b = simulate_batch(p, x0, v0, rng)
        _, v, _ = b.on_grid(grid)
        return _autocorr_sums(v, max_lag)

    parts = run_chunked(block, n_trials, threads, chunk=512)
    sizes = np.array([stop - start for _, start, stop in chunk_bounds(n_trials, 512)], dtype=float)
    C = np.sum(parts, axis=0) / n_trials
    lags = np.arange(max_lag + 1) * dt

    def integrate_acf(c: np.ndarray) -> tuple[float, float, float, float]:
        c0 = c[0]
        area = integrate.trapezoid(c, lags)
        tau_c = area / c0
        sel = (c <= c0 / 10) & (c >= c0 / 100)
        if sel.sum() >= 3:
            slope, icpt = _fit_slope(lags[sel], np.log(c[sel]))
        else:
            slope, icpt = -1.0 / max(tau_c, dt), np.log(max(c[-1], 1e-300)) + lags[-1] / max(tau_c, dt)
        r = -slope
        tail = float(np.exp(icpt - r * lags[-1]) / r) if r > 0 else 0.0
        return (area + tail) / 3.0, tau_c, tail / 3.0, r

    D, tau_c, tail, r = integrate_acf(C)
    if t_corr < 5 * tau_c:
        raise FitRejectedError(f"t_corr = {t_corr:.3g} is shorter than 5 correlation times ({tau_c:.3g})")
    # batch means over groups of blocks
    groups = np.array_split(np.arange(len(parts)), min(n_batches, len(parts)))
    Ds = np.array([
        integrate_acf(np.sum([parts[i] for i in g], axis=0) / sizes[g].sum())[0] for g in groups
    ])
    return GreenKuboFit(D, _batch_ci(Ds), lags, C, tau_c, tail, r)


# -- hydrodynamic rescaling ---------------------------------------------------------------


@dataclass
class HydroLevel:
    M: int
    tau: float
    residual: float
    variance: float
    variance_stderr: float
    target_variance: float


@dataclass
class DiffusionReport:
    D_msd: float
    D_msd_ci: float
    D_gk: float
    D_gk_ci: float
    levels: list[HydroLevel] = field(default_factory=list)
    floor: float = 0.0

    def residuals(self, tau: float) -> dict[int, float]:
        return {lv.M: lv.residual for lv in self.levels if lv.tau == tau}


def _axis_masses(edges: np.ndarray, shift: np.ndarray, sd: float) -> np.ndarray:
    """Mass of N(shift, sd**2) in each interval between ``edges``; shift is (n,)."""
    cdf = special.ndtr((edges[None, :] - shift[:, None]) / sd)
    return np.diff(cdf, axis=1)


def blob_density(displacements: np.ndarray, edges: np.ndarray, symmetrize: bool = True) -> np.ndarray:
    """Bin masses of the law of X0 + D with X0 a standard Gaussian blob
    independent of the displacement D, averaged over the sampled D.

    Integrating the blob out exactly leaves only the displacement noise.
    With ``symmetrize`` the estimate is averaged over sign flips and axis
    permutations of every displacement (the symmetries of the isotropic
    target), which cancels its odd moments; ``edges`` must then be symmetric
    about 0.
    """
    disp = np.asarray(displacements, dtype=float)
    b = len(edges) - 1
    out = np.zeros((b, b, b))
    for s in range(0, len(disp), 4096):
        d = disp[s : s + 4096]
        m = [_axis_masses(edges, d[:, a], 1.0) for a in range(3)]
        if symmetrize:
            m = [0.5 * (ma + ma[:, ::-1]) for ma in m]
        xy = (m[0][:, :, None] * m[1][:, None, :]).reshape(len(d), b * b)
        out += (xy.T @ m[2]).reshape(b, b, b)
    out /= len(disp)
    if symmetrize:
        out = sum(out.transpose(p) for p in itertools.permutations(range(3))) / 6.0
    return out


def heat_kernel_masses(edges: np.ndarray, variance: float) -> np.ndarray:
    m = _axis_masses(edges, np.zeros(1), float(np.sqrt(variance)))[0]
    return np.einsum("i,j,k->ijk", m, m, m)


def _masses_to_density(masses: np.ndarray, edges: np.ndarray) -> EmpiricalDensity:
    lo, hi = float(edges[0]), float(edges[-1])
    return EmpiricalDensity.from_masses(masses, lo, hi, outside=max(0.0, 1.0 - float(masses.sum())))


def hydrodynamic_experiment(
    params: SimParams,
    levels: Sequence[int],
    taus: Sequence[float],
    n_trials: int,
    D: float,
    threads: int = 1,
    half_width: float = 4.0,
    bins: int = 32,
) -> list[HydroLevel]:
    """Spatial density after rescaled time M tau with jump rate multiplied by
    M, against the Gaussian heat kernel of variance 1 + 2 D tau per axis.

    Starting points are a standard Gaussian blob and velocities Maxwellian.
    The density estimate integrates the blob exactly given each simulated
    displacement (see :func:`blob_density`), so residuals reflect the law of
    the displacement rather than sampling noise in the starting points.
    """
    edges = np.linspace(-half_width, half_width, bins + 1)
    out = []
    for M in levels:
        for tau in taus:
            if tau == 0:
                disp = np.zeros((1, 3))
            else:
                p = params.with_(alpha=0.0, t_max=float(M * tau))
                batch = ensemble_limit(p, [p.t_max], None, n_trials, threads,
                                       purpose=Purpose.HYDRO, rate_scale=float(M), keep_jumps=False)
                disp = batch.record.x[:, 0] - batch.x0
            masses = blob_density(disp, edges)
            target = heat_kernel_masses(edges, 1.0 + 2.0 * D * tau)
            res = l1_distance(_masses_to_density(masses, edges), _masses_to_density(target, edges))
            per_axis = (disp**2).reshape(-1)
            var = float(per_axis.mean())
            se = float(per_axis.std(ddof=1) / np.sqrt(len(per_axis))) if len(per_axis) > 1 else 0.0
            out.append(HydroLevel(int(M), float(tau), res, var, se, 2.0 * D * tau))
    return out
