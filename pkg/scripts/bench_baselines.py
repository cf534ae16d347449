#!/usr/bin/env python3
"""Print baseline gap tables for the default benchmark settings.

OBP: first-fit and best-fit against the packing lower bound over the six
Weibull settings (5 seeds each).  TSP: nearest neighbor against the
2-opt reference over the default sizes.  --quick shrinks the grid.

Usage: python3 scripts/bench_baselines.py [--quick] [--task obp|tsp|all]
"""

from __future__ import annotations

import argparse

from cdeoh import cli


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true", help="small instances only")
    parser.add_argument("--task", choices=("obp", "tsp", "all"), default="all")
    args = parser.parse_args()

    rc = 0
    if args.task in ("obp", "all"):
        sizes = ["1000"] if args.quick else ["1000", "5000", "10000"]
        caps = ["100"] if args.quick else ["100", "500"]
        print("== online bin packing: gap% to the lower bound ==")
        rc |= cli.main(["bench", "--task", "obp", "--sizes", *sizes,
                        "--capacities", *caps, "--seeds", "1", "2", "3", "4", "5"])
        print()
    if args.task in ("tsp", "all"):
        sizes = ["50"] if args.quick else ["50", "100", "200", "500"]
        print("== tsp: gap% to the 2-opt reference ==")
        rc |= cli.main(["bench", "--task", "tsp", "--sizes", *sizes,
                        "--seeds", "1", "2", "3", "4"])
    return rc


if __name__ == "__main__":
    raise SystemExit(main())
