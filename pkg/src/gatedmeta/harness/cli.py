"""Command-line entry point.

::

    gatedmeta run --config configs/mnist.json [--seed N] [--workers K] [--out DIR] [--repeats R]
    gatedmeta diagnose --suite {lemma3,smoothness,convergence} --config configs/diagnostics.json
    gatedmeta summarize --runs 'runs/*/summary.json'

Set ``GATEDMETA_OUT`` to redirect outputs when ``--out`` is not given.
"""
from __future__ import annotations

import argparse
import glob
import json
import sys
from pathlib import Path

from ..local_solver import SolverStall
from ..tasks import ConfigurationError, IDXParseError
from .config import ConfigError, ExperimentConfig
from .metrics import to_jsonable
from .runner import repeat_and_summarize, run, summarize_runs

SUITES = ("lemma3", "smoothness", "convergence")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatedmeta", description="federated meta-learning of channel-gated networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--workers", type=int, default=None, help="per-round fan-out threads (default: cores)")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--repeats", type=int, default=1, help="repeat with seeds seed, seed+1, ...")

    p_diag = sub.add_parser("diagnose", help="run a quadratic diagnostics suite")
    p_diag.add_argument("--suite", required=True, choices=SUITES)
    p_diag.add_argument("--config", required=True)
    p_diag.add_argument("--seed", type=int, default=None)
    p_diag.add_argument("--workers", type=int, default=None)
    p_diag.add_argument("--out", default=None)

    p_sum = sub.add_parser("summarize", help="aggregate summary.json files")
    p_sum.add_argument("--runs", required=True, help="glob of run directories or summary.json files")
    p_sum.add_argument("--out", default=None, help="write the aggregate JSON here")
    return parser


def _load(path, kind=None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path)
    if kind is not None and cfg.kind != kind:
        cfg = cfg.replace(kind=kind)
    return cfg


def _print(obj):
    print(json.dumps(to_jsonable(obj), indent=1, sort_keys=True))


def _collect(pattern):
    paths = []
    for p in sorted(glob.glob(pattern, recursive=True)):
        p = Path(p)
        if p.is_dir():
            p = p / "summary.json"
        if p.is_file():
            paths.append(p)
    return paths


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "summarize":
            paths = _collect(args.runs)
            if not paths:
                print(f"error: no summaries match {args.runs!r}", file=sys.stderr)
                return 2
            agg = summarize_runs([json.loads(p.read_text()) for p in paths])
            if args.out:
                Path(args.out).write_text(json.dumps(to_jsonable(agg), indent=1, sort_keys=True))
            _print(agg)
            return 0
        kind = f"diagnostics-{args.suite}" if args.command == "diagnose" else None
        cfg = _load(args.config, kind)
        repeats = getattr(args, "repeats", 1)
        if repeats > 1:
            if args.seed is not None:
                cfg = cfg.replace(seed=args.seed)
            agg, _ = repeat_and_summarize(cfg, repeats, workers=args.workers, out=args.out)
            _print(agg)
        else:
            result = run(cfg, seed=args.seed, workers=args.workers, out=args.out)
            _print(result.summary)
            print(f"outputs in {result.out_dir}", file=sys.stderr)
        return 0
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverStall, IDXParseError, ArithmeticError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
