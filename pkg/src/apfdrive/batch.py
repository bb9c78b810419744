"""Trial batches, summary tables and potential-field grid dumps."""

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .potentials import field_terms
from .road import query_environment
from .simulator import SvTrack, TrialOutcome, run_trial

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("scenario", "trials", "successes", "success_rate", "collisions", "nr_violations",
                   "red_light_violations", "crashed", "mean_dp", "mean_dv", "mean_dphi",
                   "solve_ms_mean", "solve_ms_sd", "solve_ms_max")
TRIAL_COLUMNS = ("trial", "seed", "success", "collided", "nr_violation", "red_light_violation",
                 "traversable_crossings", "goal_reached", "reason", "steps", "mean_dp", "mean_dv",
                 "mean_dphi", "solve_ms_mean", "solve_ms_sd", "solve_ms_max")
FIELD_COLUMNS = ("x", "y", "F_total", "F_NR", "F_TR", "F_V", "F_TL")


@dataclass(frozen=True)
class TrialResult:
    index: int
    seed: int
    outcome: Optional[TrialOutcome]
    log_csv: str
    error: str = ""
    solve_ms: tuple = ()


@dataclass(frozen=True)
class BatchSummary:
    scenario: str
    results: tuple
    row: dict

    @property
    def crashed(self) -> int:
        return self.row["crashed"]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _run_one(args) -> TrialResult:
    config, index, seed, timing = args
    try:
        trial_log, outcome = run_trial(config, seed, record_timing=timing)
    except Exception as exc:  # a crash is reported, the batch goes on
        log.exception("trial %d (seed %d) crashed", index, seed)
        return TrialResult(index, seed, None, "", f"{exc.__class__.__name__}: {exc}")
    return TrialResult(index, seed, outcome, trial_log.to_csv(timing), solve_ms=tuple(trial_log.solve_ms))


def summarize(name: str, results: Sequence[TrialResult]) -> dict:
    done = [r for r in results if r.outcome is not None]
    outs = [r.outcome for r in done]
    ms = np.concatenate([np.asarray(r.solve_ms, dtype=float) for r in done]) if done else np.zeros(0)

    def mean(attr):
        vals = [getattr(o, attr) for o in outs if math.isfinite(getattr(o, attr))]
        return float(np.mean(vals)) if vals else math.nan

    n = len(results)
    successes = sum(o.success for o in outs)
    return {
        "scenario": name,
        "trials": n,
        "successes": successes,
        "success_rate": successes / n if n else math.nan,
        "collisions": sum(o.collided for o in outs),
        "nr_violations": sum(o.violations.non_traversable for o in outs),
        "red_light_violations": sum(o.violations.red_light for o in outs),
        "crashed": n - len(done),
        "mean_dp": mean("mean_dp"),
        "mean_dv": mean("mean_dv"),
        "mean_dphi": mean("mean_dphi"),
        "solve_ms_mean": float(ms.mean()) if ms.size else math.nan,
        "solve_ms_sd": float(ms.std()) if ms.size else math.nan,
        "solve_ms_max": float(ms.max()) if ms.size else math.nan,
    }


def run_batch(config, trials: Optional[int] = None, seed: Optional[int] = None,
              out_dir=None, parallel: int = 1, record_timing: bool = True) -> BatchSummary:
    """Run `trials` closed-loop trials with seeds seed, seed+1, ... and write the CSVs.

    Files: <name>_trial<k>.csv per trial, <name>_trials.csv with one outcome
    row per trial and <name>_summary.csv with the aggregate row. A trial that
    raises is recorded as crashed; it does not stop the batch.
    """
    n = config.trials if trials is None else int(trials)
    s0 = config.seed if seed is None else int(seed)
    if n < 1:
        raise ValueError("trials must be >= 1")
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out} is not writable")
    tasks = [(config, i, s0 + i, record_timing) for i in range(n)]
    if parallel > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    results.sort(key=lambda r: r.index)
    row = summarize(config.name, results)
    if out is not None:
        for r in results:
            if r.outcome is not None:
                (out / f"{config.name}_trial{r.index:03d}.csv").write_text(r.log_csv)
        with open(out / f"{config.name}_trials.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRIAL_COLUMNS + ("error",))
            for r in results:
                o = r.outcome
                if o is None:
                    w.writerow([r.index, r.seed] + [""] * (len(TRIAL_COLUMNS) - 2) + [r.error])
                    continue
                w.writerow([_fmt(v) for v in (
                    r.index, r.seed, o.success, o.collided, o.violations.non_traversable,
                    o.violations.red_light, o.violations.traversable_crossings, o.goal_reached, o.reason,
                    o.steps, o.mean_dp, o.mean_dv, o.mean_dphi, o.solve_ms_mean, o.solve_ms_sd,
                    o.solve_ms_max)] + [""])
        with open(out / f"{config.name}_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return BatchSummary(config.name, tuple(results), row)


def grid_axis(lo: float, hi: float, res: float) -> np.ndarray:
    """lo + k*res for k = 0.. while <= hi (points depend only on lo, res and k)."""
    if not res > 0:
        raise ValueError("resolution must be > 0")
    if hi < lo:
        raise ValueError("grid upper bound below lower bound")
    n = int(math.floor((hi - lo) / res + 1e-9)) + 1
    return lo + np.arange(n) * res


def field_grid(config, xs: Sequence[float], ys: Sequence[float]) -> List[tuple]:
    """Rows (x, y, F_total, F_NR, F_TR, F_V, F_TL) of the static environment at t = 0.

    Surrounding vehicles sit at their unjittered initial poses; at each grid
    point the ego heading follows the nearest lane centerline.
    """
    road = config.road_model
    cfg = config.potentials
    svs = tuple(SvTrack(s).state(0.0) for s in config.svs_scripts)
    rows = []
    for y in ys:
        for x in xs:
            x, y = float(x), float(y)
            probe = query_environment(road, (x, y, 0.0, 0.0, 0.0, 0.0), 0.0, vehicles=svs, cfg=cfg)
            heading = probe.lane_ref.beta if probe.lane_ref is not None else 0.0
            state = (x, y, heading, 0.0, 0.0, 0.0)
            env = query_environment(road, state, 0.0, vehicles=svs, cfg=cfg)
            t = field_terms(env, state, cfg)
            total = t["V"] + t["NR"] + t["TR"] + t["TL"]
            rows.append((x, y, total, t["NR"], t["TR"], t["V"], t["TL"]))
    return rows


def dump_field(config, xmin: float, xmax: float, ymin: float, ymax: float, res: float, out_path) -> int:
    """Write the grid CSV; returns the number of rows."""
    rows = field_grid(config, grid_axis(xmin, xmax, res), grid_axis(ymin, ymax, res))
    out_path = Path(out_path)
    if out_path.parent and not out_path.parent.exists():
        out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELD_COLUMNS)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    return len(rows)
