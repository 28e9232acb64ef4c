"""Command line entry point.

Exit status: 0 all checks passed, 1 a check failed, 2 configuration error,
3 solver failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import os
import sys

from ..fem import SolverError
from .config import ConfigError, load_config
from .runner import COMMANDS, run

ENV_OUT = "UNFOLDHOM_OUT"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3, 4


def build_parser():
    p = argparse.ArgumentParser(prog="unfoldhom", description="periodic unfolding and homogenization experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="TOML experiment file")
    p.add_argument("--out", help=f"output directory (default: config outputs.directory, then ${ENV_OUT})")
    p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
    p.add_argument("--seed", type=int, default=None, help="seed for random benchmark inputs")
    return p


def output_dir(args, config):
    return args.out or config.outputs.directory or os.environ.get(ENV_OUT) or "unfoldhom-out"


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        report = run(args.command, config, args.workers, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    out = output_dir(args, config)
    try:
        report.write(out, config.outputs.formats)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    for name, ok in sorted(report.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"{args.command}: {'passed' if report.passed else 'FAILED'} -> {out}")
    return EXIT_OK if report.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
