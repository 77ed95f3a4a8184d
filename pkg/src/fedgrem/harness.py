"""Experiment runner: seeding, per-round metrics, sweeps and rate fits.

Seeds. Repeat ``i`` of an experiment uses ``seed = derive_seed(master, i, 0)``
(the ``seed`` column). Inside a repeat, task data come from stream 1,
contamination from stream 2, and task ``k``'s initialization from
``derive_seed(seed, k, 3)``. Every configuration in a sweep that shares the
master seed therefore sees the same clean tasks and the same inlier inits.
"""
from __future__ import annotations

import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy import stats

from .aggregate import PenaltySchedule, default_schedule
from .config import ExperimentConfig
from .errors import ContractError, FedGremError
from .federation import run
from .local import initialize, make_step_plan
from .metrics import estimation_error
from .synthdata import apply_contamination, gen_tasks

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

STREAM_DATA, STREAM_CONTAMINATION, STREAM_INIT = 1, 2, 3


def splitmix64_mix(z: int) -> int:
    """The splitmix64 output finalizer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, task_index: int, stream: int) -> int:
    """``mix(master ^ (task_index+1)*GOLDEN ^ (stream+1)*MIX1)`` on 64 bits."""
    x = (master & MASK64) ^ (((task_index + 1) * GOLDEN) & MASK64) ^ (((stream + 1) * MIX1) & MASK64)
    return splitmix64_mix(x)


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class MetricsRow:
    cell: int
    seed: int
    n: int
    d: int
    K: int
    R: int
    h: float
    epsilon: float
    attack: str
    method: str
    round: int
    err_theta: float
    err_w: float
    # "lambda" is a keyword, so the attribute carries a trailing underscore
    lambda_: float
    runtime_ms: float


CSV_COLUMNS = [f.name.rstrip("_") for f in fields(MetricsRow)]
CSV_HEADER = ",".join(CSV_COLUMNS)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def row_values(row: MetricsRow) -> list:
    return [getattr(row, f.name) for f in fields(MetricsRow)]


def format_rows(rows: Iterable[MetricsRow], fmt: str = "csv") -> str:
    buf = io.StringIO()
    if fmt == "csv":
        buf.write(CSV_HEADER + "\n")
        for row in rows:
            buf.write(",".join(_fmt(v) for v in row_values(row)) + "\n")
    elif fmt == "jsonl":
        for row in rows:
            # Infinity is emitted for the infinite penalty of naive averaging
            buf.write(json.dumps(dict(zip(CSV_COLUMNS, row_values(row)))) + "\n")
    else:
        raise ContractError(f"unknown output format {fmt!r}")
    return buf.getvalue()


def _schedule(cfg: ExperimentConfig) -> PenaltySchedule:
    p, t = cfg.penalty, cfg.task
    if p.lam is not None:
        return PenaltySchedule.constant(p.lam, p.decay)
    return default_schedule(t.n, t.d, t.R, t.K, p.delta_conf, p.c_lambda0, p.c_floor, p.decay)


def _stage(seed: int, stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FedGremError as exc:
        exc.args = (f"seed {seed}, stage {stage}: {exc}",) + exc.args[1:]
        raise


def run_repeat(cfg: ExperimentConfig, repeat: int, cell: int = 0) -> List[MetricsRow]:
    """All per-round rows for one repeat of one configuration."""
    spec, cont = cfg.task, cfg.contamination
    seed = derive_seed(cfg.master_seed, repeat, 0)
    start = time.perf_counter()
    data, truths, _ = _stage(seed, "generate", gen_tasks, spec, _rng(derive_seed(seed, 0, STREAM_DATA)))
    data, flags = _stage(seed, "contaminate", apply_contamination, data, truths, cont,
                         _rng(derive_seed(seed, 0, STREAM_CONTAMINATION)))
    inits = [_stage(seed, "initialize", initialize, cfg.init, spec.kind, data[k], spec.R, truths[k],
                    _rng(derive_seed(seed, k, STREAM_INIT)))
             for k in range(spec.K)]
    st = cfg.step
    plans = [_stage(seed, "step plan", make_step_plan, st.rule, p.weights, c_b=st.c_b, eta=st.eta,
                    halvings_max=st.halvings_max) for p in inits]
    inliers = [k for k in range(spec.K) if flags[k]]
    fit = _stage(seed, "run", run, cfg.mode, data, inits, plans, _schedule(cfg), cfg.T,
                 align_first=cfg.align_first, inliers=inliers)
    elapsed = round((time.perf_counter() - start) * 1000.0, 3) if cfg.timing else 0.0
    rows = []
    for t in range(cfg.T + 1):
        est = [fit.trajectories[k][t] for k in inliers]
        _, et, ew = _stage(seed, "metrics", estimation_error, est, [truths[k] for k in inliers],
                           per_task=cfg.per_task_iota)
        rows.append(MetricsRow(cell, seed, spec.n, spec.d, spec.K, spec.R, float(spec.h),
                               float(cont.epsilon), cont.attack.value, cfg.mode.value, t,
                               et, ew, float(fit.lambdas[t]), elapsed))
    return rows


def _unit(args):
    cfg, repeat, cell = args
    return run_repeat(cfg, repeat, cell)


def _execute(units: Sequence[Tuple[ExperimentConfig, int, int]], threads: int) -> List[MetricsRow]:
    if threads <= 1 or len(units) <= 1:
        chunks = [_unit(u) for u in units]
    else:
        with ProcessPoolExecutor(max_workers=min(threads, len(units))) as pool:
            chunks = list(pool.map(_unit, units))
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: (r.cell, r.seed, r.round))
    return rows


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> List[MetricsRow]:
    return _execute([(cfg, i, 0) for i in range(cfg.repeats)], threads)


def sweep(cells: Sequence[ExperimentConfig], threads: int = 1) -> List[MetricsRow]:
    """Run every cell; rows carry the cell index in grid order."""
    units = [(cfg, i, c) for c, cfg in enumerate(cells) for i in range(cfg.repeats)]
    return _execute(units, threads)


def rate_slope(points: Sequence[Tuple[float, float]]) -> float:
    """Least-squares slope of ``log(error)`` against ``log(n)``."""
    pts = list(points)
    if len(pts) < 3:
        raise ContractError(f"need at least 3 points for a slope, got {len(pts)}")
    n = np.array([p[0] for p in pts], dtype=float)
    e = np.array([p[1] for p in pts], dtype=float)
    if not (np.all(n > 0) and np.all(e > 0) and np.all(np.isfinite(n)) and np.all(np.isfinite(e))):
        raise ContractError("rate_slope needs positive finite sample sizes and errors")
    if np.all(n == n[0]):
        raise ContractError("rate_slope needs at least two distinct sample sizes")
    return float(stats.linregress(np.log(n), np.log(e)).slope)


def final_medians(rows: Iterable[dict]) -> dict:
    """``{method: [(n, median final err_theta), ...]}`` from parsed CSV rows.

    Only each (cell, seed)'s last round counts.
    """
    last = {}
    for r in rows:
        key = (r["method"], int(r["cell"]), r["seed"])
        if key not in last or int(r["round"]) > int(last[key]["round"]):
            last[key] = r
    by = {}
    for (method, _, _), r in last.items():
        by.setdefault(method, {}).setdefault(int(r["n"]), []).append(float(r["err_theta"]))
    return {m: sorted((n, float(np.median(v))) for n, v in per_n.items()) for m, per_n in by.items()}
