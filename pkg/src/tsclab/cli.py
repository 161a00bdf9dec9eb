"""Command-line entry point: ``tsclab {train,eval,baseline,ablate,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .checks import run_gradient_checks
from .config import ConfigError, ExperimentConfig
from .demand import FlowError
from .diffnet import NumericError
from .netsim import RoadnetError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
GRADCHECK_TOL = 1e-4


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if getattr(args, "iterations", None) is not None:
        changes["iterations"] = args.iterations
    if getattr(args, "seeds", None):
        changes["seeds"] = args.seeds
    return cfg.replace(**changes) if changes else cfg


def _print_row(rec: harness.MetricsRecord) -> None:
    print(f"iter {rec.iteration:4d} seed {rec.seed}  travel {rec.avg_travel_time_s:8.2f} s  "
          f"ext {rec.ext_reward:10.1f}  int {rec.int_reward:9.2f}  elbo {rec.elbo_loss:9.3f}  "
          f"({rec.wall_s:.1f} s)", flush=True)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    res = harness.meta_train(cfg, args.seed, out, progress=None if args.quiet else _print_row)
    if args.plot and res.metrics:
        harness.plot_metrics(res.metrics, out / "training.png")
    print(f"checkpoint written to {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    recs = harness.meta_test(args.ckpt, cfg, mode=args.mode)
    for r in recs:
        print(f"seed {r.seed}: average travel time {r.avg_travel_time_s:.2f} s")
    print(f"mean over {len(recs)} seed(s): {harness.mean_travel_time(recs):.2f} s")
    if args.out:
        harness.write_metrics(args.out, recs)
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    recs = harness.run_classical(cfg, args.kind)
    for r in recs:
        print(f"{args.kind} seed {r.seed}: average travel time {r.avg_travel_time_s:.2f} s")
    print(f"mean over {len(recs)} seed(s): {harness.mean_travel_time(recs):.2f} s")
    if args.out:
        harness.write_metrics(args.out, recs)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    table = harness.run_ablation(
        cfg, progress=lambda v, f, x: print(f"{v:>16s} {f:>10s}  {x:8.2f} s", flush=True))
    print(table.to_markdown())
    if args.out:
        table.to_csv(args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errs = run_gradient_checks(args.seed)
    worst = max(errs.values())
    print(json.dumps(errs, indent=1))
    if worst > GRADCHECK_TOL:
        print(f"gradient check failed: max relative error {worst:.3g} > {GRADCHECK_TOL:g}",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"ok: max relative error {worst:.3g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsclab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", help="experiment config (JSON); defaults apply when omitted")
        if seeds:
            sp.add_argument("--seeds", type=int, nargs="+", help="override config seeds")

    t = sub.add_parser("train", help="meta-train one seed and write checkpoint + metrics")
    common(t, seeds=False)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--plot", action="store_true", help="write training.png next to the metrics")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="meta-test a checkpoint without any parameter updates")
    e.add_argument("--ckpt", required=True)
    common(e)
    e.add_argument("--mode", choices=("greedy", "sample"))
    e.add_argument("--out", help="metrics CSV path")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="run a classical controller")
    b.add_argument("--kind", required=True)
    common(b)
    b.add_argument("--out", help="metrics CSV path")
    b.set_defaults(func=cmd_baseline)

    a = sub.add_parser("ablate", help="train all five variants and print the comparison table")
    common(a)
    a.add_argument("--iterations", type=int)
    a.add_argument("--out", help="table CSV path")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of ELBO, PPO and intrinsic reward")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FlowError, RoadnetError, harness.CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
