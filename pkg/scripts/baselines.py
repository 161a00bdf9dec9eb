#!/usr/bin/env python3
"""Mean travel time of every classical controller on one scenario."""

import argparse

from tsclab import harness
from tsclab.config import ExperimentConfig
from tsclab.controllers import KINDS


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--rows", type=int, default=2)
    p.add_argument("--cols", type=int, default=2)
    p.add_argument("--flow", default="mixed_low", choices=("mixed_low", "mixed_high"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    cfg = ExperimentConfig(grid_rows=args.rows, grid_cols=args.cols, flow=args.flow, seeds=args.seeds)
    print(f"{args.rows}x{args.cols} grid, {args.flow}, seeds {args.seeds}")
    for kind in KINDS:
        recs = harness.run_classical(cfg, kind)
        per_seed = " ".join(f"{r.avg_travel_time_s:7.2f}" for r in recs)
        print(f"{kind:>18s}  mean {harness.mean_travel_time(recs):7.2f} s   [{per_seed}]")


if __name__ == "__main__":
    main()
