"""``coordemb`` command line: gen-data, train, eval, gradcheck, compare.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .experiments import (TASKS, evaluate_checkpoint, generate_dataset, parse_affine,
                          run_compare, run_train)
from .gradcheck import CHECKS, run_suite
from .layers import VARIANTS
from .synthetic import SceneGenerationError
from .training import (DEFAULT_BATCH_SIZE, DEFAULT_LEARNING_RATE, CheckpointError, TrainConfig,
                       TrainingDiverged)

log = logging.getLogger("coordemb")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _affine(text: str) -> str:
    try:
        parse_affine(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coordemb", description="Coordinate embedding experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--task", choices=("coord", "shapes"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--h", type=_positive_int, default=None, help="height (16 for coord, 64 for shapes)")
    g.add_argument("--w", type=_positive_int, default=None, help="width (16 for coord, 64 for shapes)")
    g.add_argument("--n", type=_positive_int, default=300, help="number of scenes (shapes)")
    g.add_argument("--split", choices=("quadrant", "uniform"), default="quadrant")
    g.add_argument("--edge-bias", type=_unit_float, default=0.0)
    g.add_argument("--max-objects", type=_positive_int, default=4)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one variant and write a checkpoint plus metrics.csv")
    t.add_argument("--task", choices=TASKS, required=True)
    t.add_argument("--variant", choices=VARIANTS, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=_nonneg_int, required=True)
    t.add_argument("--lr", type=float, default=DEFAULT_LEARNING_RATE)
    t.add_argument("--batch", type=_positive_int, default=DEFAULT_BATCH_SIZE)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eval-every", type=_positive_int, default=500)
    t.add_argument("--ckpt", required=True)
    t.add_argument("--metrics", default=None, help="metrics CSV path (default: next to the checkpoint)")

    e = sub.add_parser("eval", help="evaluate a checkpoint, optionally under affine distortions")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--affine", type=_affine, action="append", default=[],
                   metavar="SCALE,SHEAR,ANGLE,TX,TY")
    e.add_argument("--report", default=None, help="report JSON path (default: report.json next to the checkpoint)")
    e.add_argument("--detections", default=None,
                   help="detections JSONL path (default: detections.jsonl next to the checkpoint)")

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--module", choices=("all", "tensor", "layers", "detector"), default="all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", default=None, metavar="OP", help=argparse.SUPPRESS)

    m = sub.add_parser("compare", help="train all three variants per seed and compare")
    m.add_argument("--task", choices=TASKS, required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    m.add_argument("--steps", type=_nonneg_int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--lr", type=float, default=DEFAULT_LEARNING_RATE)
    m.add_argument("--batch", type=_positive_int, default=DEFAULT_BATCH_SIZE)
    m.add_argument("--eval-every", type=_positive_int, default=500)
    m.add_argument("--affine", type=_affine, action="append", default=None,
                   metavar="SCALE,SHEAR,ANGLE,TX,TY", help="affine sweep for shapes (default: built-in grid)")
    return p


def cmd_gen_data(args) -> int:
    default = 16 if args.task == "coord" else 64
    h, w = args.h or default, args.w or default
    try:
        meta = generate_dataset(args.task, args.out, h, w, args.n, args.split, args.edge_bias,
                                args.seed, args.max_objects)
    except (ValueError, SceneGenerationError) as exc:
        raise UsageError(str(exc)) from exc
    print(f"{args.task}: {meta['train']} train + {meta['test']} test samples, "
          f"{h}x{w}, seed {args.seed} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, steps=args.steps, seed=args.seed,
                      eval_every=args.eval_every, variant=args.variant)
    ckpt = Path(args.ckpt)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    try:
        res = run_train(args.task, args.variant, args.data, cfg, ckpt, args.metrics)
    except TrainingDiverged as exc:
        print(f"error: training diverged at step {exc.step} (loss {exc.loss!r})", file=sys.stderr)
        return 1
    step, loss, metrics = res["history"][-1] if res["history"] else (0, float("nan"), {})
    shown = " ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items()))
    print(f"{args.variant} on {args.task}: step {step} loss {loss:.4f} {shown} -> {ckpt}")
    return 0


def format_report(report: dict) -> str:
    lines = [f"variant {report['variant']}  task {report['task']}  step {report['step']}  "
             f"config {report['config_hash']}"]
    for k, v in sorted(report["metrics"].items()):
        lines.append(f"  {k:<22} {v:.4f}")
    for key, entry in report.get("affine", {}).items():
        lines.append(f"  affine {key:<16} mAP {entry['mAP_affine']:.4f}  delta {entry['delta_mAP']:+.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    detections = args.detections or ckpt.parent / "detections.jsonl"
    report = evaluate_checkpoint(ckpt, args.data, args.affine, detections)
    out = Path(args.report) if args.report else ckpt.parent / "report.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(format_report(report))
    return 0


def cmd_gradcheck(args) -> int:
    if args.inject_fault is not None and args.inject_fault not in {c.name for c in CHECKS}:
        raise UsageError(f"unknown op {args.inject_fault!r} for --inject-fault")
    results = run_suite(args.module, seed=args.seed, inject_fault=args.inject_fault)
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}  {r.name:<{width}}  {r.module:<8}  worst rel err {r.worst_rel_error:.3e}"
              f"  (tol {r.tolerance:g}, {r.instances} instances)")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_compare(args) -> int:
    try:
        report = run_compare(args.task, args.data, args.seeds, args.steps, args.out, args.lr,
                             args.batch, args.eval_every, args.affine)
    except TrainingDiverged as exc:
        print(f"error: a run diverged at step {exc.step} (loss {exc.loss!r})", file=sys.stderr)
        return 1
    metric = report["comparison"].get("metric")
    for agg in report["aggregates"]:
        if agg["seed"] == "mean" and metric in agg:
            lo = next(a for a in report["aggregates"] if a["variant"] == agg["variant"] and a["seed"] == "min")
            hi = next(a for a in report["aggregates"] if a["variant"] == agg["variant"] and a["seed"] == "max")
            print(f"{agg['variant']:<10} {metric} {agg[metric]:.4f}  [{lo[metric]:.4f}, {hi[metric]:.4f}]")
    if report["comparison"]:
        d = report["comparison"]["coordemb_minus_vanilla"]
        print(f"coordemb - vanilla: {d['mean']:+.4f}  [{d['min']:+.4f}, {d['max']:+.4f}]  "
              f"({report['comparison']['direction']})")
    print(f"wrote {Path(args.out) / 'comparison.csv'} and comparison.json")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "compare": cmd_compare}


def _configure_logging() -> None:
    level = os.environ.get("COORDEMB_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
