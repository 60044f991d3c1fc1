"""Order sweep on the planted corpus: 5 seeds, orders 1..3, default RunConfig.

    python scripts/run_order_sweep.py --out runs/order_sweep [--orders 0,1,2,3] [--seeds 0,1,2,3,4]

Writes sweep.csv and summary.csv under --out and prints per-order means and
the consecutive-order gaps against the across-seed spread.
"""
import argparse
from pathlib import Path

from plrank.cli import analyze_dir
from plrank.harness.config import RunConfig, coerce
from plrank.harness.train import order_sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/order_sweep")
    ap.add_argument("--orders", default="1,2,3")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--head-lr-scale", type=float, default=None)
    args = ap.parse_args()
    cfg = RunConfig(orders=coerce("orders", args.orders), seeds=coerce("seeds", args.seeds),
                    record_wall_time=True, out_dir=args.out)
    if args.head_lr_scale is not None:
        cfg = cfg.replace(head_lr_scale=args.head_lr_scale)
    order_sweep(cfg.validate())
    analyze_dir(Path(args.out))


if __name__ == "__main__":
    main()
