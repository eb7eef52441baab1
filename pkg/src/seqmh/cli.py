"""Command-line entry point: ``seqmh run|analyze|design|risk``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import bench
from .design import average_design, read_samples, worst_case_design
from .errors import InfeasibleDesign


def _cmd_run(args):
    cfg = bench.load_config(args.config)
    out = bench.run(cfg)
    print(out)


def _cmd_analyze(args):
    cfg = bench.load_config(args.config)
    sys.stdout.write(bench.analysis_table(cfg))


def _cmd_design(args):
    if args.worst_case:
        res = worst_case_design(args.budget)
    else:
        samples = read_samples(args.samples)
        res = average_design(samples, args.budget)
    sys.stdout.write(res.to_text())


def _cmd_risk(args):
    sys.stdout.write(bench.risk_from_directory(args.trace_dir, args.truth))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqmh", description="Sequential mini-batch MH experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a key=value config")
    r.add_argument("config")
    r.set_defaults(func=_cmd_run)
    a = sub.add_parser("analyze", help="print the DP versus simulation table for a config")
    a.add_argument("config")
    a.set_defaults(func=_cmd_analyze)
    d = sub.add_parser("design", help="grid-search test parameters for an error budget")
    d.add_argument("samples", help="CSV with columns mu,sigma_l,N")
    d.add_argument("--budget", type=float, required=True)
    d.add_argument("--worst-case", action="store_true", help="bound the error at mu_std = 0 instead")
    d.set_defaults(func=_cmd_design)
    k = sub.add_parser("risk", help="risk table from a run directory and a truth file")
    k.add_argument("trace_dir")
    k.add_argument("truth")
    k.set_defaults(func=_cmd_risk)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except InfeasibleDesign as exc:
        print(f"seqmh: infeasible design: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, ZeroDivisionError, RuntimeError) as exc:
        print(f"seqmh: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
