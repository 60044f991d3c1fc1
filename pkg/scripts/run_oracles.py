"""All verification oracles in one go, with a structured-text report.

    python scripts/run_oracles.py --seed 0 --trials 100 --out oracles.txt
"""
import argparse
import sys
import time

from plrank import verify
from plrank.cli import write_reports


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    start = time.perf_counter()
    reports = [verify.normalisation_sweep(args.seed)] + verify.collapse_suite(args.seed)
    reports += verify.gradient_suite(args.seed, args.trials)
    for rep in reports:
        print(rep.line())
    print(f"{sum(r.passed for r in reports)}/{len(reports)} passed in {time.perf_counter() - start:.0f}s")
    if args.out:
        write_reports(reports, args.out)
    return 0 if all(r.passed for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
