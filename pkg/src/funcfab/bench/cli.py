"""Benchmark CLI: ``funcfab-bench run --plan <file> --out <dir> [--seed N]``.

Exit code 0 iff every invariant assertion in the plan held.
"""

from __future__ import annotations

import argparse
import logging
import sys

from funcfab.bench.plan import ExperimentPlan
from funcfab.bench.runners import run_plan


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="funcfab-bench")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment plan")
    run.add_argument("--plan", required=True, help="plan YAML file")
    run.add_argument("--out", required=True, help="output directory for CSV reports")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s bench %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    plan = ExperimentPlan.from_file(args.plan)
    failures = run_plan(plan, args.out, seed=args.seed)
    if failures:
        for failure in failures:
            print("FAIL %s: %s" % (plan.name, failure), file=sys.stderr)
        return 1
    print("OK %s" % plan.name)
    return 0


if __name__ == "__main__":
    sys.exit(main())
