"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric or solver
failure, 4 infeasible instance generation.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import harness
from .alignment import (
    PermutationSet,
    StepwiseMode,
    align_exhaustive,
    align_stepwise,
    best_permutation_match,
    common_relabeling,
    score,
)
from .config import ExperimentConfig, grid, load_config
from .errors import ConfigError, ContractError, FedGremError
from .local import initialize
from .synthdata import apply_contamination, gen_tasks, write_dataset, write_truth


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", help="INI-style experiment config")
    p.add_argument("--out", help="output path (stdout when omitted)")
    p.add_argument("--seed", type=_u64_arg, help="master seed, overrides run.master_seed")


def _u64_arg(s):
    v = int(s, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError(f"{s} is not an unsigned 64-bit integer")
    return v


def _positive(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedgrem", description="Federated gradient EM experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, text in (("simulate", "run one configuration, one row per seed and round"),
                       ("sweep", "run the [sweep] grid of a configuration")):
        s = sub.add_parser(name, help=text)
        _common(s)
        s.add_argument("--threads", type=_positive, default=1)
        s.add_argument("--format", choices=("csv", "jsonl"), default="csv")
        s.add_argument("--timing", action="store_true", help="fill runtime_ms (breaks byte-determinism)")
        s.add_argument("--per-task-iota", action="store_true",
                       help="let each task pick its own relabeling in the error metric")

    s = sub.add_parser("align-demo", help="alignment scores on a generated instance")
    _common(s)

    s = sub.add_parser("gen", help="write one generated instance as dataset files")
    _common(s)

    s = sub.add_parser("slopes", help="rate slopes and .dat files from a CSV")
    s.add_argument("csv", help="CSV produced by simulate or sweep")
    s.add_argument("--out", help="directory for <method>.dat files")
    return p


def _config(args) -> tuple:
    if args.config:
        cfg, axes = load_config(args.config)
    else:
        cfg, axes = ExperimentConfig(), []
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["master_seed"] = args.seed
    if getattr(args, "timing", False):
        updates["timing"] = True
    if getattr(args, "per_task_iota", False):
        updates["per_task_iota"] = True
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return cfg, axes


def _emit(text: str, out: Optional[str]):
    if out:
        try:
            _write(out, text)
        except OSError as exc:
            raise ConfigError(f"cannot write {out}: {exc.strerror}") from None
    else:
        sys.stdout.write(text)


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_simulate(args):
    cfg, _ = _config(args)
    rows = harness.run_experiment(cfg, threads=args.threads)
    _emit(harness.format_rows(rows, args.format), args.out)


def cmd_sweep(args):
    cfg, axes = _config(args)
    if not axes:
        raise ConfigError("sweep needs a [sweep] section with at least one axis")
    rows = harness.sweep(grid(cfg, axes), threads=args.threads)
    _emit(harness.format_rows(rows, args.format), args.out)


def _instance(cfg):
    seed = harness.derive_seed(cfg.master_seed, 0, 0)
    spec = cfg.task
    data, truths, _ = gen_tasks(spec, np.random.default_rng(harness.derive_seed(seed, 0, harness.STREAM_DATA)))
    data, flags = apply_contamination(data, truths, cfg.contamination,
                                      np.random.default_rng(harness.derive_seed(seed, 0,
                                                                                harness.STREAM_CONTAMINATION)))
    return seed, data, truths, flags


def _fmt_perms(perms) -> str:
    return " ".join("(" + ",".join(str(int(v)) for v in row) + ")" for row in perms)


def cmd_align_demo(args):
    cfg, _ = _config(args)
    seed, data, truths, flags = _instance(cfg)
    spec = cfg.task
    rng = np.random.default_rng(harness.derive_seed(seed, 0, 4))
    estimates = []
    for k in range(spec.K):
        init = initialize(cfg.init, spec.kind, data[k], spec.R, truths[k],
                          np.random.default_rng(harness.derive_seed(seed, k, harness.STREAM_INIT)))
        # hide the labels: each task reports its components in a random order
        estimates.append(init.permuted(rng.permutation(spec.R)))
    planted = np.array([best_permutation_match(e, t)[0] for e, t in zip(estimates, truths)])
    inl = [k for k in range(spec.K) if flags[k]]
    lines = [f"seed {seed}", f"tasks {spec.K}, components {spec.R}, outliers {spec.K - len(inl)}",
             f"{'planted':<20} {_fmt_perms(planted)}",
             f"{'identity':<20} score {score(PermutationSet.identity(spec.K, spec.R), estimates):.6f}"]
    methods = [("stepwise-assignment", lambda e: align_stepwise(e, StepwiseMode.ASSIGNMENT)),
               ("stepwise-enumerate", lambda e: align_stepwise(e, StepwiseMode.ENUMERATE)),
               ("exhaustive", align_exhaustive)]
    for name, fn in methods:
        try:
            found = fn(estimates)
        except ContractError as exc:
            lines.append(f"{name:<20} skipped: {exc}")
            continue
        ok = common_relabeling(found, planted, inl) is not None
        lines.append(f"{name:<20} score {score(found, estimates):.6f}  "
                     f"recovered {'yes' if ok else 'no'}  {_fmt_perms(found.perms)}")
    _emit("\n".join(lines) + "\n", args.out)


def cmd_gen(args):
    cfg, _ = _config(args)
    if not args.out:
        raise ConfigError("gen needs --out <directory>")
    out = Path(args.out)
    _, data, truths, flags = _instance(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for k, (d, t) in enumerate(zip(data, truths)):
            write_dataset(out / f"task{k:03d}.csv", d, cfg.task.R)
            write_truth(out / f"truth{k:03d}.csv", cfg.task.kind, t, cfg.task.n)
        _write(out / "inliers.txt", "".join(f"{k},{int(f)}\n" for k, f in enumerate(flags)))
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc.strerror}") from None


def cmd_slopes(args):
    try:
        with open(args.csv, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {args.csv}: {exc.strerror}") from None
    if not rows or "err_theta" not in rows[0]:
        raise ConfigError(f"{args.csv} is not a metrics CSV")
    medians = harness.final_medians(rows)
    lines = ["method,slope,points"]
    for method in sorted(medians):
        pts = medians[method]
        slope = harness.rate_slope(pts) if len(pts) >= 3 else float("nan")
        lines.append(f"{method},{slope!r},{len(pts)}")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            _write(Path(args.out) / f"{method}.dat",
                   "# n median_err_theta\n" + "".join(f"{n} {e!r}\n" for n, e in pts))
    sys.stdout.write("\n".join(lines) + "\n")


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "align-demo": cmd_align_demo,
            "gen": cmd_gen, "slopes": cmd_slopes}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except FedGremError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
