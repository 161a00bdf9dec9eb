#!/usr/bin/env python3
"""Train one seed, then plot the learning curve against classical baselines.

Also meta-tests the resulting checkpoint on a larger grid without any
parameter updates.
"""

import argparse
from pathlib import Path

from tsclab import harness
from tsclab.config import VARIANTS, ExperimentConfig


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/full_seed0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p.add_argument("--flow", default="mixed_low", choices=("mixed_low", "mixed_high"))
    p.add_argument("--transfer", type=int, nargs=2, default=[3, 3], metavar=("ROWS", "COLS"))
    args = p.parse_args()

    cfg = ExperimentConfig(iterations=args.iterations, variant=args.variant, flow=args.flow)
    out = Path(args.out)

    def show(rec):
        print(f"iter {rec.iteration:4d}  travel {rec.avg_travel_time_s:7.2f} s  "
              f"elbo {rec.elbo_loss:8.3f}  ({rec.wall_s:.1f} s)", flush=True)

    res = harness.meta_train(cfg, args.seed, out, progress=show)
    base = {k: harness.mean_travel_time(harness.run_classical(cfg, k))
            for k in ("random", "maxpressure", "fixedtime")}
    harness.plot_metrics(res.metrics, out / "training.png", base)
    print("baselines:", ", ".join(f"{k} {v:.2f} s" for k, v in base.items()))

    big = cfg.replace(grid_rows=args.transfer[0], grid_cols=args.transfer[1])
    recs = harness.meta_test(out / "checkpoint.json", big)
    rand = harness.mean_travel_time(harness.run_classical(big, "random"))
    print(f"meta-test on {args.transfer[0]}x{args.transfer[1]}: "
          f"{harness.mean_travel_time(recs):.2f} s (Random {rand:.2f} s)")
    print(f"wrote {out / 'checkpoint.json'}, {out / 'metrics.csv'}, {out / 'training.png'}")


if __name__ == "__main__":
    main()
