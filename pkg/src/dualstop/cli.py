"""Command-line entry point: classify, solve, verify, simulate.

Exit codes: 0 success, 1 failed check or numerical failure, 2 bad input or
I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline
from .config import ConfigError, load_config
from .dual import InvalidGrid
from .model import DomainError, NoConvergence, ParameterError
from .montecarlo import NumericalBlowup
from .primal import RangeError

EXIT_OK, EXIT_FAIL, EXIT_INFRA = 0, 1, 2
NUMERICAL = (NoConvergence, RangeError, InvalidGrid, NumericalBlowup, DomainError,
             FloatingPointError)


def _threads() -> int | None:
    raw = os.environ.get("SOLVER_THREADS")
    if raw is None or raw == "":
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("SOLVER_THREADS must be a positive integer")
    return n


def _apply_threads(n: int | None):
    if n is None:
        return
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _seed(text: str) -> int:
    val = int(text, 0)
    if not 0 <= val < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return val


def _refine(text: str) -> int:
    val = int(text)
    if val < 0:
        raise argparse.ArgumentTypeError("--refine takes a nonnegative count")
    return val


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualstop", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("classify", "print the case label and hull constants as JSON"),
                       ("solve", "solve, recover and write surfaces, boundaries and report"),
                       ("verify", "run every acceptance check; exit 1 if any fails"),
                       ("simulate", "Monte Carlo runs of the recovered policy and oracles")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, help="configuration file")
        if name != "classify":
            sp.add_argument("--out", help="output directory (overrides outputs.dir)")
            sp.add_argument("--seed", type=_seed, help="Monte Carlo seed (overrides mc.seed)")
            sp.add_argument("--refine", type=_refine, default=0,
                            help="halve every step N times")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(_threads())
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg = pipeline.with_seed(cfg, args.seed)
    except (ConfigError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA

    try:
        if args.command == "classify":
            print(json.dumps(pipeline._clean(pipeline.classify_summary(cfg.model)),
                             sort_keys=True))
            return EXIT_OK
        if args.command == "solve":
            report = pipeline.run_solve(cfg, args.refine, args.out)
            print(json.dumps({"case": report["case"]["case"],
                              "out": args.out or cfg.outputs.dir}, sort_keys=True))
            return EXIT_OK
        if args.command == "verify":
            report, checks = pipeline.run_verify(cfg, args.refine, args.out)
            for c in checks:
                print(c.line())
            ok = pipeline.checks_passed(checks)
            print("all checks passed" if ok else "some checks failed")
            return EXIT_OK if ok else EXIT_FAIL
        if args.command == "simulate":
            out = pipeline.run_simulate(cfg, args.refine, args.out)
            sp = out["solver_policy"]
            print(json.dumps(pipeline._clean({
                "case": out["case"]["case"], "x0": out["x0"], "V_hat_x0": out["V_hat_x0"],
                "estimate": sp["estimate"], "std_error": sp["std_error"]}), sort_keys=True))
            return EXIT_OK
    except (ParameterError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except NUMERICAL as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    return EXIT_INFRA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
