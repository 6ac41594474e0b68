"""Command-line entry point: single runs, table reproductions, warm/cold."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .bench import (
    DELTAS,
    ExperimentConfig,
    run_delta_sweep,
    run_experiment,
    run_warmcold,
)
from .errors import BoxinvError


def _add_common(p):
    p.add_argument("--problem", choices=("source", "potential", "diffusion"),
                   default="potential", dest="kind")
    p.add_argument("--test", type=int, choices=(1, 2, 3), default=1,
                   dest="test_id")
    p.add_argument("--N", type=int, default=32)
    p.add_argument("--delta", type=float, default=0.001)
    p.add_argument("--tau", type=float, default=1.1)
    p.add_argument("--alpha", default="auto",
                   help="regularization weight, or 'auto' for 1e-4*delta (diffusion)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--start", choices=("warm", "cold"), default="warm",
                   dest="start_mode")
    p.add_argument("--solver", choices=("feasible_as", "oracle"),
                   default="feasible_as")
    p.add_argument("--qp-mode", choices=("dense", "operator"), default="dense",
                   dest="qp_mode")
    p.add_argument("--out", default=None)


def _config_from(args) -> ExperimentConfig:
    alpha = None if args.alpha == "auto" else float(args.alpha)
    return ExperimentConfig(
        kind=args.kind, test_id=args.test_id, N=args.N, delta=args.delta,
        tau=args.tau, alpha=alpha, seed=args.seed, runs=args.runs,
        start_mode=args.start_mode, solver=args.solver, qp_mode=args.qp_mode,
        out=args.out,
    )


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="boxinv",
        description="Box-constrained inverse-problem benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_common(p_run)

    p_t3 = sub.add_parser("table3", help="per-solver metrics at delta=0.001")
    _add_common(p_t3)

    p_t4 = sub.add_parser("table4", help="averaged errors over noise levels")
    _add_common(p_t4)

    p_wc = sub.add_parser("warmcold", help="warm vs cold start comparison")
    _add_common(p_wc)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except BoxinvError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)},
                  sys.stderr)
        sys.stderr.write("\n")
        return 1


def _dispatch(args):
    config = _config_from(args)
    if args.command == "run":
        metrics, _, _ = run_experiment(config)
        json.dump(metrics.as_dict(), sys.stdout, indent=2)
        print()
        return 0
    if args.command == "table3":
        config = replace(config, delta=0.001)
        out = {}
        for kind in ("source", "potential", "diffusion"):
            metrics, _, _ = run_experiment(replace(config, kind=kind,
                                                   alpha=None))
            out[kind] = metrics.as_dict()
        json.dump(out, sys.stdout, indent=2)
        print()
        return 0
    if args.command == "table4":
        out_csv = None
        if config.out:
            out_csv = f"{config.out}/table4.csv"
        rows = run_delta_sweep(replace(config, runs=max(config.runs, 5)),
                               deltas=DELTAS, out_csv=out_csv)
        json.dump(rows, sys.stdout, indent=2)
        print()
        return 0
    if args.command == "warmcold":
        result = run_warmcold(replace(config, kind="potential"))
        printable = {
            mode: {
                "total_kkt_solves": d["total_kkt_solves"],
                "kkt_per_iteration": d["kkt_per_iteration"],
                "avg_size_per_iteration": d["avg_size_per_iteration"],
                "err_L1": d["metrics"].err_L1,
            }
            for mode, d in result.items()
        }
        json.dump(printable, sys.stdout, indent=2)
        print()
        return 0
    raise ValueError(args.command)


if __name__ == "__main__":
    raise SystemExit(main())
