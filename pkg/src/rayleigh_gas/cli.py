"""Batch front end.

    python -m rayleigh_gas <subcommand> [--config PATH] [--seed N] [--trials N]
                                        [--out DIR] [--threads N]

Subcommands: micro, limit, compare, pathology, moments, diffusion, kernels.
Each writes CSV tables and ``summary.json`` into ``--out`` and finishes by
writing ``manifest.json``; a run is complete iff its manifest exists.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .core import (
    InitialLaw,
    Purpose,
    SimParams,
    ValidationError,
    derive_stream,
    load_config,
    stream_id,
    sub_seed,
    validate,
)
from .diagnostics import (
    ComparisonRow,
    compare_micro_limit,
    green_kubo_estimator,
    hydrodynamic_experiment,
    limit_law_check,
    msd_estimator,
)
from .limit import collision_moments, ensemble_limit, series_mass, stationarity_check, survival_mass
from .maxwellian import (
    KernelContext,
    carleman_kernel,
    collision_rate,
    collision_rate_quad,
    e_function,
    e_function_quad,
    elastic_collide,
    maxwellian_density,
    mean_collision_rate,
    sample_impact_direction,
    sample_maxwellian,
)
from .micro import EnsembleStats, ensemble_micro, summarize, write_event_log
from .pathology import loglog_slope, micro_pathology_rate, psi_sweep

SUBCOMMANDS = ("micro", "limit", "compare", "pathology", "moments", "diffusion", "kernels")
SWEEP_AXES = ("epsilon", "alpha", "mu", "t_max")

DEFAULT_PARAMS = {"epsilon": 0.1, "mu": 1.0, "beta": 1.0, "alpha": 0.2, "t_max": 1.0}


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    params: dict[str, Any]
    subcommand: str
    sweep: dict[str, list[float]]
    out_dir: str
    version: str
    wall_clock_s: float
    flagged_fractions: list[float]
    files: dict[str, str] = field(default_factory=dict)

    def write(self, out: Path) -> None:
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


class _Outputs:
    """Tracks files written in the output directory (for the manifest)."""

    def __init__(self, out: Path):
        self.out = out
        self.files: list[str] = []

    def csv(self, name: str, header, rows) -> None:
        with open(self.out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(x) for x in r])
        self.files.append(name)

    def json(self, name: str, data) -> None:
        (self.out / name).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
        self.files.append(name)

    def digests(self) -> dict[str, str]:
        return {f: hashlib.sha256((self.out / f).read_bytes()).hexdigest() for f in sorted(set(self.files))}


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        f = float(x)
        return f if np.isfinite(f) else str(f)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


# -- configuration ------------------------------------------------------------------------


def _resolve(args) -> tuple[SimParams, dict[str, Any]]:
    data: dict[str, Any] = dict(DEFAULT_PARAMS)
    run: dict[str, Any] = {}
    if args.config:
        cfg = load_config(args.config)
        if not isinstance(cfg, dict):
            raise ValidationError("config", "config must be a table/object")
        run = dict(cfg.pop("run", {}) or {})
        data.update(cfg)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.trials is not None:
        data["n_trials"] = args.trials
    params = validate(SimParams.from_dict(data))
    return params, run


def _sweep_cells(params: SimParams, run: dict[str, Any]) -> tuple[dict[str, list[float]], list[SimParams]]:
    sweep = run.get("sweep") or {}
    bad = set(sweep) - set(SWEEP_AXES)
    if bad:
        name = sorted(bad)[0]
        raise ValidationError(f"run.sweep.{name}", f"cannot sweep over {name!r}")
    axes = {k: [float(v) for v in sweep[k]] for k in SWEEP_AXES if k in sweep}
    if not axes:
        return {}, [params]
    cells = []
    for i, combo in enumerate(itertools.product(*axes.values())):
        p = params.with_(**dict(zip(axes, combo)), seed=sub_seed(params.seed, i))
        cells.append(validate(p))
    return axes, cells


def _checkpoints(params: SimParams, run: dict[str, Any]) -> list[float]:
    cps = run.get("checkpoints")
    if cps is None:
        return [params.t_max]
    cps = [float(c) for c in cps]
    if any(c < 0 or c > params.t_max for c in cps):
        raise ValidationError("run.checkpoints", "checkpoints must lie in [0, t_max]")
    return cps


# -- subcommands ------------------------------------------------------------------------------


def _stats_rows(stats: EnsembleStats, prefix: list) -> list[list]:
    return [prefix + r for r in stats.rows()]


def cmd_micro(params, run, args, out: _Outputs) -> list[float]:
    axes, cells = _sweep_cells(params, run)
    engine = run.get("engine", "lazy")
    rows, flagged, summary = [], [], []
    for ci, p in enumerate(cells):
        cps = _checkpoints(p, run)
        rec, trajs = ensemble_micro(p, cps, None, None, engine, args.threads,
                                    keep_trajectories=bool(run.get("event_logs")))
        stats = summarize(rec)
        prefix = [ci] + [getattr(p, a) for a in axes] if axes else []
        rows += _stats_rows(stats, prefix)
        flagged.append(stats.flagged_frac)
        summary.append({"cell": ci, "epsilon": p.epsilon, "alpha": p.alpha, "mu": p.mu, "t_max": p.t_max,
                        "annihil_frac": stats.annihil_frac[-1], "annihil_stderr": stats.annihil_stderr[-1],
                        "max_contact_residual_over_eps": rec.contact_residual / p.epsilon})
        if trajs:
            for k, tr in enumerate(trajs[: int(run["event_logs"])]):
                name = f"events_cell{ci}_trial{k}.csv"
                write_event_log(tr, out.out / name)
                out.files.append(name)
    header = (["cell", *axes] if axes else []) + list(EnsembleStats.COLUMNS)
    out.csv("micro_stats.csv", header, rows)
    out.json("summary.json", {"subcommand": "micro", "cells": summary})
    return flagged


def cmd_limit(params, run, args, out: _Outputs) -> list[float]:
    axes, cells = _sweep_cells(params, run)
    rows, summary = [], []
    for ci, p in enumerate(cells):
        cps = _checkpoints(p, run)
        batch = ensemble_limit(p, cps, None, None, args.threads)
        stats = summarize(batch.record)
        prefix = [ci] + [getattr(p, a) for a in axes] if axes else []
        rows += _stats_rows(stats, prefix)
        surv = survival_mass(p, cps, None, None, args.threads)
        summary.append({"cell": ci, "epsilon": p.epsilon, "alpha": p.alpha, "mu": p.mu, "t_max": p.t_max,
                        "checkpoints": cps,
                        "alive_direct": surv.direct, "alive_direct_stderr": surv.direct_stderr,
                        "alive_rao_blackwell": surv.rao_blackwell,
                        "alive_rao_blackwell_stderr": surv.rao_blackwell_stderr})
    header = (["cell", *axes] if axes else []) + list(EnsembleStats.COLUMNS)
    out.csv("limit_stats.csv", header, rows)
    extra: dict[str, Any] = {}
    n_max = run.get("series_order")
    if n_max is not None:
        srows = []
        for ci, p in enumerate(cells):
            t = p.t_max
            rng = derive_stream(p.seed, stream_id(Purpose.SERIES, 0))
            ser = series_mass(p, t, int(n_max), int(run.get("series_samples", p.n_trials)), rng)
            surv = survival_mass(p, [t], int(run.get("series_samples", p.n_trials)), threads=args.threads)
            srows.append([ci, p.alpha, t, int(n_max), ser.value, ser.stderr, ser.truncation_bound,
                          surv.rao_blackwell[0], surv.rao_blackwell_stderr[0]])
        out.csv("series.csv", ["cell", "alpha", "t", "n_max", "series", "series_stderr", "tail_bound",
                               "alive_rao_blackwell", "alive_rao_blackwell_stderr"], srows)
    if run.get("law_check"):
        lc = limit_law_check(params, int(run.get("law_trials", 8000)), int(run.get("law_jumps", 100_000)),
                             threads=args.threads)
        extra["law_check"] = {**asdict(lc), "passed": lc.passed()}
        out.csv("law_check.csv", ["test", "statistic", "p_value"],
                [["holding_time_ks", lc.n_holding, lc.holding_p],
                 ["post_jump_chi2", lc.post_jump_chi2, lc.post_jump_p],
                 ["stationarity_ks", "", lc.stationarity_p]])
    out.json("summary.json", {"subcommand": "limit", "cells": summary, **extra})
    return [0.0] * len(cells)


def cmd_compare(params, run, args, out: _Outputs) -> list[float]:
    eps = [float(e) for e in run.get("epsilons", [0.2, 0.1, 0.05])]
    cps = _checkpoints(params, run)
    n_limit = int(run.get("limit_trials", 10 * params.n_trials))
    rows = compare_micro_limit(params, eps, cps, params.n_trials, n_limit, args.threads,
                               engine=run.get("engine", "lazy"), coupled=bool(run.get("coupled", True)))
    out.csv("compare.csv", ComparisonRow.COLUMNS, [r.row() for r in rows])
    out.json("summary.json", {"subcommand": "compare", "rows": [dict(zip(ComparisonRow.COLUMNS, r.row())) for r in rows]})
    return [r.flagged_frac for r in rows]


def cmd_pathology(params, run, args, out: _Outputs) -> list[float]:
    eps = [float(e) for e in run.get("epsilons", [0.2, 0.1, 0.05, 0.025])]
    times = [float(t) for t in run.get("times", [params.t_max])]
    est = psi_sweep(params, eps, times, None, None, args.threads)
    rows, fits = [], {}
    for t in times:
        sel = [e for e in est if e.t == t and e.psi > 0]
        fit = loglog_slope([e.epsilon for e in sel], [e.psi for e in sel], [e.stderr for e in sel]) if len(sel) >= 2 else None
        fits[t] = fit
    for e in est:
        f = fits[e.t]
        rows.append([e.epsilon, e.t, e.psi, e.stderr, e.n_trials, e.n_ambiguous, e.recollision_frac,
                     e.interference_frac, f.slope if f else float("nan"),
                     f.slope_stderr if f else float("nan"), f.intercept if f else float("nan")])
    out.csv("psi_sweep.csv", ["epsilon", "t", "psi_hat", "stderr", "n_trials", "n_ambiguous",
                              "recollision_frac", "interference_frac", "slope_fit", "slope_fit_stderr",
                              "slope_fit_intercept"], rows)
    summary: dict[str, Any] = {"subcommand": "pathology",
                               "slopes": {str(t): (f.slope if f else None) for t, f in fits.items()}}
    flagged = [0.0]
    n_micro = int(run.get("micro_trials", 0))
    if n_micro:
        mrows = []
        for e in eps:
            rec, _ = ensemble_micro(params.with_(epsilon=e, alpha=0.0, t_max=max(times)), times, None,
                                    n_micro, run.get("engine", "lazy"), args.threads)
            for k, t in enumerate(times):
                r, se = micro_pathology_rate(rec, k)
                mrows.append([e, t, r, se, float(rec.flagged.mean())])
            flagged.append(float(rec.flagged.mean()))
        out.csv("micro_recollisions.csv", ["epsilon", "t", "recollision_rate", "stderr", "flagged_frac"], mrows)
    out.json("summary.json", summary)
    return flagged


def cmd_moments(params, run, args, out: _Outputs) -> list[float]:
    mu_t = [float(x) for x in run.get("mu_t", [0.5, 1.0, 2.0, 4.0, 8.0])]
    times = [x / params.mu for x in mu_t]
    m = collision_moments(params, times, None, args.threads)
    lam = mean_collision_rate(params.beta)
    i1 = int(np.argmin(np.abs(np.array(mu_t) - 1.0)))
    shape = np.array(mu_t) + np.array(mu_t) ** 2
    ratio = m.second / shape
    rows = [[x, t, a, b, c, d, x * lam, r, r / ratio[i1]]
            for x, t, a, b, c, d, r in zip(mu_t, times, m.mean, m.mean_stderr, m.second, m.second_stderr, ratio)]
    out.csv("moments.csv", ["mu_t", "t", "mean", "mean_stderr", "second", "second_stderr",
                            "expected_mean", "second_over_shape", "relative_to_fit"], rows)
    lag, tt = run.get("stationarity", [1.0, 2.0])
    st = stationarity_check(params, float(lag), float(tt), None, args.threads)
    out.json("summary.json", {"subcommand": "moments", "mean_collision_rate": lam,
                              "fitted_constant": ratio[i1], "stationarity_deviation": st.deviation,
                              "stationarity_stderr": st.stderr})
    return [0.0]


def cmd_diffusion(params, run, args, out: _Outputs) -> list[float]:
    p = params.with_(alpha=0.0)
    rate = p.mu * mean_collision_rate(p.beta)
    msd_times = run.get("msd_times") or list(np.linspace(10.0 / rate, 100.0 / rate, 30))
    msd = msd_estimator(p, msd_times, p.n_trials, args.threads)
    t_corr = float(run.get("t_corr", 10.0 / rate * 1.5))
    gk = green_kubo_estimator(p, t_corr, int(run.get("gk_trials", p.n_trials)), args.threads)
    levels = [int(m) for m in run.get("levels", [4, 16, 64])]
    taus = [float(t) for t in run.get("taus", [0.05])]
    hydro = hydrodynamic_experiment(p, levels, taus, int(run.get("hydro_trials", p.n_trials)), gk.D, args.threads)
    rows = [["D_msd", "", "", msd.D, msd.ci], ["D_gk", "", "", gk.D, gk.ci],
            ["msd_r2", "", "", msd.r2, ""], ["gk_correlation_time", "", "", gk.correlation_time, ""]]
    for lv in hydro:
        rows.append(["hydro_residual", lv.M, lv.tau, lv.residual, ""])
        rows.append(["hydro_variance_ratio", lv.M, lv.tau,
                     lv.variance / lv.target_variance if lv.target_variance else float("nan"),
                     lv.variance_stderr / lv.target_variance if lv.target_variance else float("nan")])
    out.csv("diffusion.csv", ["quantity", "M", "tau", "value", "ci"], rows)
    out.json("summary.json", {"subcommand": "diffusion", "D_msd": msd.D, "D_msd_ci": msd.ci,
                              "D_gk": gk.D, "D_gk_ci": gk.ci, "msd_r2": msd.r2,
                              "correlation_time": gk.correlation_time,
                              "hydro": [asdict(lv) for lv in hydro]})
    return [0.0]


def cmd_kernels(params, run, args, out: _Outputs) -> list[float]:
    ctx = KernelContext(params.beta)
    speeds = [float(s) for s in run.get("speeds", [0.0, 0.5, 1.0, 2.0, 5.0, 20.0])]
    rows = []
    for s in speeds:
        v = np.array([s, 0.0, 0.0])
        closed = float(collision_rate(v, params.beta))
        quad = collision_rate_quad(v, ctx)
        rows.append([s, closed, quad, abs(closed - quad) / quad])
    out.csv("lambda_table.csv", ["speed", "lambda_closed", "lambda_quad", "rel_err"], rows)

    rng = derive_stream(params.seed, stream_id(Purpose.KERNELS, 0))
    n_pairs = int(run.get("pairs", 100))
    v1 = sample_maxwellian(params.beta, rng, n_pairs)
    v2 = sample_maxwellian(params.beta, rng, n_pairs)
    e_cf = e_function(v1, v2, params.beta)
    e_q = np.array([e_function_quad(a, b, ctx) for a, b in zip(v1, v2)])
    e_err = float(np.max(np.abs(e_cf - e_q) / e_q))
    lhs = carleman_kernel(v1, v2, params.beta) * maxwellian_density(v1, params.beta)
    rhs = carleman_kernel(v2, v1, params.beta) * maxwellian_density(v2, params.beta)
    db_err = float(np.max(np.abs(lhs - rhs) / np.abs(rhs)))
    n_col = int(run.get("collisions", 100000))
    a = sample_maxwellian(params.beta, rng, n_col)
    b = sample_maxwellian(params.beta, rng, n_col)
    nh = sample_impact_direction(a - b, rng)
    a2, b2 = elastic_collide(a, b, nh)
    e0 = np.sum(a * a + b * b, axis=1)
    energy = float(np.max(np.abs(np.sum(a2 * a2 + b2 * b2, axis=1) - e0) / e0))
    mom = float(np.max(np.linalg.norm(a2 + b2 - a - b, axis=1) / np.linalg.norm(a, axis=1).clip(1e-300)))
    resid = [
        ["lambda_closed_vs_quad", max(r[3] for r in rows), 1e-10],
        ["e_function_vs_planar_quad", e_err, 1e-6],
        ["detailed_balance", db_err, 1e-8],
        ["elastic_energy", energy, 1e-12],
        ["elastic_momentum", mom, 1e-12],
    ]
    n_contact = int(run.get("contact_trials", 0))
    if n_contact:
        rec, _ = ensemble_micro(params, [params.t_max], None, n_contact, run.get("engine", "lazy"), args.threads)
        resid.append(["contact_residual_over_eps", rec.contact_residual / params.epsilon, 1e-9])
    out.csv("kernel_residuals.csv", ["check", "value", "tolerance", "pass"],
            [r + [r[1] <= r[2]] for r in resid])
    out.json("summary.json", {"subcommand": "kernels", "residuals": {r[0]: r[1] for r in resid}})
    return [0.0]


COMMANDS: dict[str, Callable] = {
    "micro": cmd_micro,
    "limit": cmd_limit,
    "compare": cmd_compare,
    "pathology": cmd_pathology,
    "moments": cmd_moments,
    "diffusion": cmd_diffusion,
    "kernels": cmd_kernels,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError("argv", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rayleigh_gas", description="Rayleigh gas with annihilation: simulations and checks.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, help="JSON or TOML file with parameters and a 'run' section")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--trials", type=int)
    parser.add_argument("--out", type=Path, default=Path("out"))
    parser.add_argument("--threads", type=int, default=1)
    return parser


def run(argv: list[str] | None = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the process exit code
    (0 success, 1 invalid input, 2 runtime failure)."""
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise ValidationError("threads", "threads must be at least 1")
        params, run_cfg = _resolve(args)
    except ValidationError as exc:
        print(f"error: {exc.field}: {exc}", file=sys.stderr)
        return 1
    except (OSError, TypeError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        manifest = args.out / "manifest.json"
        if manifest.exists():
            manifest.unlink()
        out = _Outputs(args.out)
        flagged = COMMANDS[args.subcommand](params, run_cfg, args, out)
        axes, _ = _sweep_cells(params, run_cfg)
        RunManifest(params.to_dict(), args.subcommand, axes, str(args.out), _version(),
                    time.perf_counter() - t0, [float(f) for f in flagged], out.digests()).write(args.out)
    except ValidationError as exc:
        print(f"error: {exc.field}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
