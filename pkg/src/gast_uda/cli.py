"""Command line entry point: ``gast <command> ...`` or ``python3 -m gast_uda``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import data, gradcheck, harness, net


def _gen_data(args) -> int:
    src, tgt = data.generate_benchmark(
        args.out, classes=args.classes, per_class=args.per_class, points=args.points, seed=args.seed
    )
    for name, man in (("source", src), ("target", tgt)):
        counts = {s: sum(r["split"] == s for r in man["samples"]) for s in ("train", "test")}
        print(f"{name}: {counts['train']} train, {counts['test']} test")
    return 0


def _train(args) -> int:
    config = harness.TrainConfig.from_json(args.config) if args.config else harness.desk_config()
    if args.seed is not None:
        config.seed = args.seed
    result = harness.train(config, args.source, args.target, args.out)
    print(json.dumps({k: v for k, v in result.summary.items() if k != "config"}, indent=1))
    return 0


def _eval(args) -> int:
    res = harness.evaluate(args.checkpoint, args.data, split=args.split)
    print(f"accuracy {res.accuracy:.4f}")
    for c, acc in res.per_class.items():
        print(f"  {c:<10s} {acc:.4f}")
    print("confusion (rows true, columns predicted):")
    for row in res.confusion:
        print("  " + " ".join(f"{v:4d}" for v in row))
    return 0


def _gradcheck(args) -> int:
    failed = 0
    for heads in args.rotation_heads:
        for r in gradcheck.run_gradcheck(args.instances, seed=args.seed, rotation_heads=heads):
            failed += not r.ok
            if args.verbose or not r.ok:
                print(f"{heads:5s} {r.loss:10s} #{r.instance:<3d} rel {r.max_rel_error:.2e} ({r.worst_param})")
    print("gradcheck", "FAILED" if failed else "ok", f"({failed} failing)")
    return 1 if failed else 0


def _report(args) -> int:
    text, _ = harness.report(args.runs, out_csv=args.csv)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gast", description="Geometry-aware self-training for point cloud UDA.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic source/target benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=6)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--points", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", help="JSON file mirroring TrainConfig (desk profile if omitted)")
    t.add_argument("--source", required=True)
    t.add_argument("--target", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="override the config seed")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a domain split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.set_defaults(func=_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--rotation-heads", nargs="+", default=["joint"], choices=("joint", "split"))
    c.set_defaults(func=_gradcheck)

    r = sub.add_parser("report", help="ablation table over run directories")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--csv", help="also write the table as CSV")
    r.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (data.FormatError, net.CheckpointError, harness.TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
