"""Task adapters, dataset I/O and the experiment drivers behind the CLI."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .detector import (DetectorConfig, anchor_array, build_targets, decode_detections,
                       detection_loss, detector_anchors, detector_model_spec, flatten_heads,
                       mean_average_precision, write_detections)
from .layers import VARIANTS, ConvSpec, Model, ModelSpec, build_model
from .synthetic import (ShapeScene, apply_affine, affine_from_params, coord_classification_eval,
                        coord_inputs, coord_regression_eval, gen_coord_dataset, gen_shape_dataset,
                        read_coord_samples, read_scenes, size_tier, write_coord_samples, write_scenes)
from .tensor import Tensor
from .training import (MetricsCSV, RMSpropState, TrainConfig, load_checkpoint, save_checkpoint,
                       train)

log = logging.getLogger(__name__)

TASKS = ("coord", "coord-reg", "shapes")
DEFAULT_AFFINE_SWEEP = ("1,0.2,15,0,0", "0.85,-0.15,-10,3,-3", "1.15,0.1,30,0,0")
EVAL_BATCH = 64


# ---------------------------------------------------------------------------
# model specs per task

def coord_classification_spec(variant: str, height: int, width: int, hidden: int = 16) -> ModelSpec:
    """Tiled (x, y) input -> 3x3 conv -> 1x1 convs -> one logit per pixel."""
    return ModelSpec(variant, height, width, 2, (
        ConvSpec(3, 2, hidden), ConvSpec(1, hidden, hidden), ConvSpec(1, hidden, hidden),
        ConvSpec(1, hidden, 1, relu=False)))


def coord_regression_spec(variant: str, height: int, width: int, hidden: int = 16) -> ModelSpec:
    """One-hot image -> 3x3 conv -> 1x1 convs -> two channels, summed over space."""
    return ModelSpec(variant, height, width, 1, (
        ConvSpec(3, 1, hidden), ConvSpec(1, hidden, hidden), ConvSpec(1, hidden, 2, relu=False)))


# ---------------------------------------------------------------------------
# tasks

class CoordClassificationTask:
    metric = "test_accuracy"

    def __init__(self, train_samples, test_samples, height: int, width: int):
        self.height, self.width = height, width
        self.train_samples, self.test_samples = list(train_samples), list(test_samples)
        self.inputs = coord_inputs(self.train_samples, height, width)
        self.labels = np.array([s.class_index for s in self.train_samples])

    @property
    def size(self) -> int:
        return len(self.train_samples)

    def logits(self, model: Model, inputs: np.ndarray) -> Tensor:
        x = T.tile_spatial(Tensor(inputs), self.height, self.width)
        out = model(x)
        return T.reshape(out, (inputs.shape[0], self.height * self.width))

    def loss(self, model: Model, indices: np.ndarray) -> Tensor:
        return T.softmax_cross_entropy(self.logits(model, self.inputs[indices]), self.labels[indices])

    def predictor(self, model: Model):
        def predict(inputs):
            with T.no_grad():
                return np.concatenate([self.logits(model, inputs[i:i + EVAL_BATCH]).data
                                       for i in range(0, len(inputs), EVAL_BATCH)])
        return predict

    def evaluate(self, model: Model) -> dict[str, float]:
        f = self.predictor(model)
        return {"train_accuracy": coord_classification_eval(f, self.train_samples, self.height, self.width),
                "test_accuracy": coord_classification_eval(f, self.test_samples, self.height, self.width)}


class CoordRegressionTask:
    metric = "test_error_px"

    def __init__(self, train_samples, test_samples, height: int, width: int):
        self.height, self.width = height, width
        self.train_samples, self.test_samples = list(train_samples), list(test_samples)
        self.images = np.stack([s.onehot_image for s in self.train_samples])
        self.targets = coord_inputs(self.train_samples, height, width)

    @property
    def size(self) -> int:
        return len(self.train_samples)

    def outputs(self, model: Model, images: np.ndarray) -> Tensor:
        return T.spatial_sum(model(Tensor(images)))

    def loss(self, model: Model, indices: np.ndarray) -> Tensor:
        return T.mse(self.outputs(model, self.images[indices]), self.targets[indices])

    def predictor(self, model: Model):
        def predict(images):
            with T.no_grad():
                return np.concatenate([self.outputs(model, images[i:i + EVAL_BATCH]).data
                                       for i in range(0, len(images), EVAL_BATCH)])
        return predict

    def evaluate(self, model: Model) -> dict[str, float]:
        f = self.predictor(model)
        return {"train_error_px": coord_regression_eval(f, self.train_samples, self.height, self.width),
                "test_error_px": coord_regression_eval(f, self.test_samples, self.height, self.width)}


class ShapeDetectionTask:
    metric = "mAP"

    def __init__(self, train_scenes: Sequence[ShapeScene], test_scenes: Sequence[ShapeScene],
                 cfg: DetectorConfig = DetectorConfig()):
        self.cfg = cfg
        self.train_scenes, self.test_scenes = list(train_scenes), list(test_scenes)
        self.anchors_cs = anchor_array(detector_anchors(detector_model_spec("vanilla", cfg), cfg))
        self.images = np.stack([s.image for s in self.train_scenes])
        self.targets = build_targets(self.anchors_cs, [s.ground_truths() for s in self.train_scenes])

    @property
    def size(self) -> int:
        return len(self.train_scenes)

    def loss(self, model: Model, indices: np.ndarray) -> Tensor:
        outputs = flatten_heads(model(Tensor(self.images[indices])), self.cfg)
        sub = type(self.targets)(self.targets.labels[indices], self.targets.offsets[indices])
        return detection_loss(outputs, sub, self.cfg.negative_ratio)

    def detect(self, model: Model, scenes: Sequence[ShapeScene]):
        dets = []
        with T.no_grad():
            for i in range(0, len(scenes), EVAL_BATCH):
                batch = np.stack([s.image for s in scenes[i:i + EVAL_BATCH]])
                out = flatten_heads(model(Tensor(batch)), self.cfg).data
                dets.extend(decode_detections(out, self.anchors_cs, self.cfg))
        return dets

    def score(self, model: Model, scenes: Sequence[ShapeScene], detections=None):
        detections = self.detect(model, scenes) if detections is None else detections
        h, w = self.cfg.height, self.cfg.width
        result = mean_average_precision(detections, [s.ground_truths() for s in scenes],
                                        0.5, self.cfg.classes,
                                        tier_of=lambda b: size_tier(b.area, h, w))
        return result, detections

    def evaluate(self, model: Model) -> dict[str, float]:
        result, _ = self.score(model, self.test_scenes)
        return flatten_map(result)


def flatten_map(result) -> dict[str, float]:
    out = {"mAP": result.mAP}
    for tier, v in result.per_tier.items():
        if v is not None:
            out[f"mAP_{tier}"] = v
    return out


# ---------------------------------------------------------------------------
# datasets on disk

def generate_dataset(task: str, out: str | Path, height: int, width: int, n: int,
                     split: str, edge_bias: float, seed: int, max_objects: int = 4) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if task == "coord":
        train_s, test_s = gen_coord_dataset(height, width, split, seed)
        write_coord_samples(out / "train", train_s)
        write_coord_samples(out / "test", test_s)
        meta = {"task": "coord", "height": height, "width": width, "split": split, "seed": seed,
                "train": len(train_s), "test": len(test_s)}
    elif task == "shapes":
        scenes = gen_shape_dataset(n, height, width, max_objects, seed, edge_bias)
        n_train = n - max(1, n // 5)
        write_scenes(out / "train", scenes[:n_train])
        write_scenes(out / "test", scenes[n_train:])
        meta = {"task": "shapes", "height": height, "width": width, "n": n, "seed": seed,
                "edge_bias": edge_bias, "max_objects": max_objects,
                "train": n_train, "test": n - n_train}
    else:
        raise ValueError(f"unknown dataset task {task!r}")
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta


def read_meta(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "meta.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset at {data_dir} (missing meta.json)")
    return json.loads(path.read_text(encoding="utf-8"))


def load_task(task: str, data_dir: str | Path):
    meta = read_meta(data_dir)
    data_dir = Path(data_dir)
    h, w = meta["height"], meta["width"]
    if task in ("coord", "coord-reg"):
        if meta["task"] != "coord":
            raise ValueError(f"task {task!r} needs a coord dataset, {data_dir} holds {meta['task']!r}")
        train_s = read_coord_samples(data_dir / "train", h, w)
        test_s = read_coord_samples(data_dir / "test", h, w)
        cls = CoordClassificationTask if task == "coord" else CoordRegressionTask
        return cls(train_s, test_s, h, w)
    if task == "shapes":
        if meta["task"] != "shapes":
            raise ValueError(f"task 'shapes' needs a shapes dataset, {data_dir} holds {meta['task']!r}")
        cfg = DetectorConfig(height=h, width=w)
        return ShapeDetectionTask(read_scenes(data_dir / "train"), read_scenes(data_dir / "test"), cfg)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def model_spec_for(task: str, variant: str, task_obj) -> ModelSpec:
    if task == "coord":
        return coord_classification_spec(variant, task_obj.height, task_obj.width)
    if task == "coord-reg":
        return coord_regression_spec(variant, task_obj.height, task_obj.width)
    return detector_model_spec(variant, task_obj.cfg)


# ---------------------------------------------------------------------------
# train / eval / compare

def run_train(task: str, variant: str, data_dir: str | Path, cfg: TrainConfig,
              ckpt: str | Path, metrics_path: str | Path | None = None, task_obj=None) -> dict:
    task_obj = task_obj or load_task(task, data_dir)
    spec = model_spec_for(task, variant, task_obj)
    model = build_model(spec, cfg.seed)
    ckpt = Path(ckpt)
    metrics_path = Path(metrics_path) if metrics_path else ckpt.parent / "metrics.csv"
    sink = MetricsCSV(metrics_path)
    model, state, history = train(model, task_obj, cfg, sink)
    save_checkpoint(ckpt, model, state, cfg.steps, cfg.hash(),
                    extra={"task": task, "data": str(data_dir), "config": cfg.to_dict()})
    return {"model": model, "history": history}


def affine_key(spec: str) -> str:
    vals = parse_affine(spec)
    return ",".join(repr(float(v)) if v != int(v) else str(int(v)) for v in vals)


def parse_affine(spec: str) -> tuple[float, float, float, float, float]:
    parts = [p.strip() for p in spec.split(",")]
    if len(parts) != 5:
        raise ValueError(f"affine spec {spec!r} needs 5 values: scale,shear,angle,tx,ty")
    vals = tuple(float(p) for p in parts)
    if vals[0] == 0:
        raise ValueError(f"affine spec {spec!r} has zero scale")
    return vals  # type: ignore[return-value]


def evaluate_model(task: str, model: Model, task_obj, affines: Sequence[str] = (),
                   detections_path: str | Path | None = None) -> dict:
    """Base metrics plus, for shape detection, metrics under each affine distortion."""
    if task != "shapes":
        if affines:
            raise ValueError("affine distortions apply to the shapes task only")
        return {"metrics": task_obj.evaluate(model)}
    base, dets = task_obj.score(model, task_obj.test_scenes)
    if detections_path is not None:
        write_detections(detections_path, dets, [f"test/{i:05d}" for i in range(len(dets))])
    report = {"metrics": flatten_map(base), "per_class_AP": base.to_dict()["per_class_AP"], "affine": {}}
    for spec in affines:
        s, sh, ang, tx, ty = parse_affine(spec)
        t = affine_from_params(s, sh, ang, tx, ty, task_obj.cfg.height, task_obj.cfg.width)
        warped = [apply_affine(sc, t) for sc in task_obj.test_scenes]
        keep = [sc for sc in warped if sc.objects]
        res, _ = task_obj.score(model, keep)
        entry = {"mAP_affine": res.mAP, "delta_mAP": res.mAP - base.mAP,
                 "per_tier_mAP": res.per_tier, "images": len(keep)}
        report["affine"][affine_key(spec)] = entry
    return report


def evaluate_checkpoint(ckpt: str | Path, data_dir: str | Path, affines: Sequence[str] = (),
                        detections_path: str | Path | None = None) -> dict:
    t0 = time.perf_counter()
    cp = load_checkpoint(ckpt)
    task = cp.extra.get("task", "shapes")
    task_obj = load_task(task, data_dir)
    body = evaluate_model(task, cp.model, task_obj, affines, detections_path)
    report = {"variant": cp.model.spec.variant, "task": task, "config_hash": cp.config_hash,
              "config": cp.extra.get("config", {}), "step": cp.step, "version": version_string(),
              **body, "wall_clock_seconds": time.perf_counter() - t0}
    return report


def version_string() -> str:
    return f"coordemb-{__version__}"


def _signed_summary(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()), "min": float(arr.min()), "max": float(arr.max()),
            "per_seed": [float(v) for v in arr]}


def run_compare(task: str, data_dir: str | Path, seeds: Sequence[int], steps: int,
                out_dir: str | Path, lr: float = 0.004, batch: int = 24, eval_every: int = 500,
                affines: Sequence[str] | None = None, variants: Sequence[str] = VARIANTS) -> dict:
    """Train every variant on every seed with shared data and report side by side."""
    if not seeds:
        raise ValueError("compare needs at least one seed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    task_obj = load_task(task, data_dir)
    if affines is None:
        affines = DEFAULT_AFFINE_SWEEP if task == "shapes" else ()
    t0 = time.perf_counter()
    runs = []
    for variant in variants:
        for seed in seeds:
            cfg = TrainConfig(learning_rate=lr, batch_size=batch, steps=steps, seed=seed,
                              eval_every=eval_every, variant=variant)
            run_dir = out_dir / f"{variant}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            r0 = time.perf_counter()
            res = run_train(task, variant, data_dir, cfg, run_dir / "model.ckpt",
                            run_dir / "metrics.csv", task_obj=task_obj)
            ev = evaluate_model(task, res["model"], task_obj, affines,
                                run_dir / "detections.jsonl" if task == "shapes" else None)
            row = {"variant": variant, "seed": seed, **ev["metrics"]}
            for key, entry in ev.get("affine", {}).items():
                row[f"mAP_affine[{key}]"] = entry["mAP_affine"]
            if ev.get("affine"):
                row["mean_affine_delta"] = float(np.mean([e["delta_mAP"] for e in ev["affine"].values()]))
            runs.append({"row": row, "seconds": time.perf_counter() - r0, "config_hash": cfg.hash()})
            log.info("finished %s seed %d: %s", variant, seed, row)

    columns = sorted({k for r in runs for k in r["row"]} - {"variant", "seed"})
    aggregates = []
    for variant in variants:
        rows = [r["row"] for r in runs if r["row"]["variant"] == variant]
        for stat, fn in (("mean", np.mean), ("min", np.min), ("max", np.max)):
            agg = {"variant": variant, "seed": stat}
            for c in columns:
                vals = [r[c] for r in rows if c in r]
                if vals:
                    agg[c] = float(fn(vals))
            aggregates.append(agg)

    metric = task_obj.metric
    comparison = {}
    if "vanilla" in variants and "coordemb" in variants:
        by = {(r["row"]["variant"], r["row"]["seed"]): r["row"] for r in runs}
        diffs = [by[("coordemb", s)].get(metric, float("nan")) - by[("vanilla", s)].get(metric, float("nan"))
                 for s in seeds]
        higher_is_better = metric != "test_error_px"
        wins = sum(1 for d in diffs if (d > 0 if higher_is_better else d < 0))
        comparison = {"metric": metric, "coordemb_minus_vanilla": _signed_summary(diffs),
                      "coordemb_better_on_seeds": wins, "seeds": len(seeds),
                      "direction": ("coordemb better on every seed" if wins == len(seeds) else
                                    "coordemb worse or tied on every seed" if wins == 0 else "mixed")}
        if task == "shapes":
            for tier in ("small", "medium", "large"):
                key = f"mAP_{tier}"
                if all(key in by[(v, s)] for v in ("vanilla", "coordemb") for s in seeds):
                    comparison[f"coordemb_minus_vanilla_{key}"] = _signed_summary(
                        [by[("coordemb", s)][key] - by[("vanilla", s)][key] for s in seeds])

    report = {"task": task, "data": str(data_dir), "seeds": list(seeds), "steps": steps,
              "learning_rate": lr, "batch_size": batch, "affine_sweep": list(affines),
              "version": version_string(), "columns": columns,
              "runs": [{**r["row"], "config_hash": r["config_hash"], "seconds": r["seconds"]} for r in runs],
              "aggregates": aggregates, "comparison": comparison,
              "wall_clock_seconds": time.perf_counter() - t0}
    with (out_dir / "comparison.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed"] + columns)
        for row in [r["row"] for r in runs] + aggregates:
            w.writerow([row["variant"], row["seed"]] + [repr(row[c]) if c in row else "" for c in columns])
    (out_dir / "comparison.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    return report
