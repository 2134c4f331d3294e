"""Command-line entry point.

    sipflow run --config <path> [--out <dir>] [--seed <u64>] [--paper-parity]
    sipflow compare-losses --config <path> [--out <dir>] [--seed <u64>]
    sipflow diagnostics --config <path> [--out <dir>] [--seed <u64>]

Exit codes: 0 success, 2 validation error, 3 aborted run.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ABORTED = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to the experiment JSON")
    parser.add_argument("--out", default=None, help="override output_dir")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sipflow", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment end to end")
    _add_common(run)
    run.add_argument(
        "--paper-parity",
        action="store_true",
        help="swap in the full published budgets (long runs)",
    )

    cmp = sub.add_parser("compare-losses", help="iterations/time to threshold per loss")
    _add_common(cmp)

    diag = sub.add_parser("diagnostics", help="consistency and estimator diagnostics")
    _add_common(diag)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(
            args.config,
            seed_override=args.seed,
            out_override=args.out,
            paper_parity=getattr(args, "paper_parity", False),
        )
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_VALIDATION

    from . import runner

    try:
        if args.command == "run":
            summary = runner.run_experiment(config)
            print(f"run complete: {config.output_dir}")
            for key, value in sorted(summary.final_metrics.items()):
                print(f"  final {key}: {value:.6g}")
            if summary.aborted:
                print("run aborted; partial state persisted", file=sys.stderr)
                return EXIT_ABORTED
        elif args.command == "compare-losses":
            rows = runner.compare_losses(config)
            print(f"comparison complete: {config.output_dir}")
            for sigma, loss, reached, iters, wall_ms, per_iter in rows:
                status = "reached" if reached else "censored"
                print(f"  sigma={sigma} {loss}: {status} at {iters} iterations ({wall_ms / 1e3:.1f}s)")
        else:
            if config.experiment != "diagnostics":
                print("config error: diagnostics command needs a diagnostics config", file=sys.stderr)
                return EXIT_VALIDATION
            summary = runner.run_diagnostics(config)
            print(f"diagnostics complete: {config.output_dir}")
            for key, value in sorted(summary.final_metrics.items()):
                print(f"  {key}: {bool(value)}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
