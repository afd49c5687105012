"""Toy single-shot detector: anchors, Jaccard matching, offsets, NMS and mAP.

Boxes are pixel coordinates ``(x1, y1, x2, y2)`` with ``x`` along columns.
Anchor order is: feature map, then row-major cell, then scale. That is the
order a head output ``(N, Hf, Wf, A * (4 + K + 1))`` reshapes into.
Per-anchor head channels are four offsets followed by ``K + 1`` class logits,
where logit 0 is background.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .layers import ConvSpec, HeadSpec, ModelSpec
from .tensor import Tensor

POSITIVE_IOU = 0.5


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}: need x1 < x2 and y1 < y2")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def jaccard(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` box arrays -> ``(n, m)``."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# ---------------------------------------------------------------------------
# anchors

@dataclass(frozen=True)
class Anchor:
    cx: float
    cy: float
    w: float
    h: float
    map_index: int
    cell: tuple[int, int]
    scale_index: int

    def box(self) -> BoundingBox:
        return BoundingBox.from_center(self.cx, self.cy, self.w, self.h)


def make_anchor_grid(feature_dims: Sequence[tuple[int, int]],
                     scales: Sequence[Sequence[tuple[float, float]]],
                     image_dims: tuple[int, int]) -> list[Anchor]:
    height, width = image_dims
    if len(feature_dims) != len(scales):
        raise ValueError("need one scale list per feature map")
    anchors = []
    for m, ((hf, wf), map_scales) in enumerate(zip(feature_dims, scales)):
        if hf < 1 or wf < 1:
            raise ValueError(f"feature map {m} has invalid dims {hf}x{wf}")
        for r in range(hf):
            for c in range(wf):
                cx = (c + 0.5) * width / wf
                cy = (r + 0.5) * height / hf
                for s, (w, h) in enumerate(map_scales):
                    anchors.append(Anchor(cx, cy, float(w), float(h), m, (r, c), s))
    return anchors


def anchor_array(anchors: Sequence[Anchor]) -> np.ndarray:
    """``(n, 4)`` array of ``(cx, cy, w, h)``."""
    return np.array([[a.cx, a.cy, a.w, a.h] for a in anchors], dtype=float).reshape(-1, 4)


def center_to_corners(cs: np.ndarray) -> np.ndarray:
    cs = np.asarray(cs, dtype=float)
    half = cs[..., 2:] / 2.0
    return np.concatenate([cs[..., :2] - half, cs[..., :2] + half], axis=-1)


# ---------------------------------------------------------------------------
# matching

@dataclass
class MatchResult:
    assignment: np.ndarray  # per anchor: ground-truth index, or -1 for negative
    iou: np.ndarray  # per anchor IoU with its assigned ground truth (best IoU for negatives)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.assignment >= 0)


def match_anchors(anchors, ground_truth: Sequence[tuple[BoundingBox, int]]) -> MatchResult:
    """Assign ground truths to anchors.

    An anchor whose best IoU exceeds 0.5 is positive for that ground truth.
    Each ground truth, taken in order, also claims its best-IoU anchor not
    already claimed by an earlier ground truth, whatever that IoU is. Ties go
    to the lower index.
    """
    arr = anchors if isinstance(anchors, np.ndarray) else anchor_array(anchors)
    n = arr.shape[0]
    if n == 0:
        raise ValueError("match_anchors needs at least one anchor")
    if not ground_truth:
        return MatchResult(np.full(n, -1, dtype=np.int64), np.zeros(n))
    gt = np.array([b.as_list() for b, _ in ground_truth], dtype=float)
    ious = iou_matrix(center_to_corners(arr), gt)  # (anchors, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    assignment = np.where(best_iou > POSITIVE_IOU, best_gt, -1).astype(np.int64)
    claimed = np.zeros(n, dtype=bool)
    for g in range(gt.shape[0]):
        col = np.where(claimed, -np.inf, ious[:, g])
        a = int(col.argmax())
        if claimed[a]:
            break  # more ground truths than anchors
        claimed[a] = True
        assignment[a] = g
    matched_iou = np.where(assignment >= 0, ious[np.arange(n), np.maximum(assignment, 0)], best_iou)
    return MatchResult(assignment, matched_iou)


# ---------------------------------------------------------------------------
# offsets

def encode_offsets(anchor: Anchor, gt: BoundingBox) -> np.ndarray:
    if not (gt.x2 > gt.x1 and gt.y2 > gt.y1):
        raise ValueError(f"ground truth has non-positive extent: {gt}")
    return encode_array(np.array([[anchor.cx, anchor.cy, anchor.w, anchor.h]]),
                        np.array([gt.as_list()]))[0]


def decode_offsets(anchor: Anchor, offsets) -> BoundingBox:
    x1, y1, x2, y2 = decode_array(np.array([[anchor.cx, anchor.cy, anchor.w, anchor.h]]),
                                  np.asarray(offsets, dtype=float).reshape(1, 4))[0]
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def encode_array(anchors_cs: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Center-size encoding ``(dcx / wa, dcy / ha, ln(wg / wa), ln(hg / ha))``."""
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("ground truth boxes must have positive extent")
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    return np.stack([(cx - anchors_cs[:, 0]) / anchors_cs[:, 2],
                     (cy - anchors_cs[:, 1]) / anchors_cs[:, 3],
                     np.log(w / anchors_cs[:, 2]),
                     np.log(h / anchors_cs[:, 3])], axis=1)


def decode_array(anchors_cs: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    cx = anchors_cs[:, 0] + offsets[:, 0] * anchors_cs[:, 2]
    cy = anchors_cs[:, 1] + offsets[:, 1] * anchors_cs[:, 3]
    # cap log-extent so untrained heads cannot overflow exp
    w = anchors_cs[:, 2] * np.exp(np.minimum(offsets[:, 2], 10.0))
    h = anchors_cs[:, 3] * np.exp(np.minimum(offsets[:, 3], 10.0))
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


# ---------------------------------------------------------------------------
# detections and NMS

@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
                iou_threshold: float) -> list[int]:
    """Array form of :func:`nms`: indices kept, in output order."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou threshold must lie in (0, 1], got {iou_threshold}")
    n = len(scores)
    order = np.lexsort((np.arange(n), classes, -scores))
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(n, dtype=bool)
    kept: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(int(i))
        suppressed |= (classes == classes[i]) & (ious[i] > iou_threshold)
    return kept


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; output sorted by confidence, then class, then input order."""
    boxes = np.array([d.box.as_list() for d in detections], dtype=float).reshape(-1, 4)
    scores = np.array([d.confidence for d in detections], dtype=float)
    classes = np.array([d.class_id for d in detections], dtype=np.int64)
    return [detections[i] for i in nms_indices(boxes, scores, classes, iou_threshold)]


# ---------------------------------------------------------------------------
# mean average precision

@dataclass
class MAPResult:
    mAP: float
    per_class: dict[int, float]
    per_tier: dict[str, float | None]

    def to_dict(self) -> dict:
        return {"mAP": self.mAP,
                "per_class_AP": {str(k): v for k, v in sorted(self.per_class.items())},
                "per_tier_mAP": dict(self.per_tier)}


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP for detections already ranked by confidence."""
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground truth")
    tp_arr = np.asarray(tp, dtype=float)
    if tp_arr.size == 0:
        return 0.0
    ctp = np.cumsum(tp_arr)
    cfp = np.cumsum(1.0 - tp_arr)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


GroundTruth = tuple  # (BoundingBox, class_id) or (BoundingBox, class_id, tier)


def _match_detections(detections, ground_truths, cls: int, iou_threshold: float):
    """Rank one class's detections and greedily match them.

    Returns ``(ranked (image, detection) pairs, matched ground-truth index or -1)``.
    """
    ranked = [(img, j) for img, dets in enumerate(detections)
              for j, d in enumerate(dets) if d.class_id == cls]
    ranked.sort(key=lambda p: -detections[p[0]][p[1]].confidence)
    used = [np.zeros(len(g), dtype=bool) for g in ground_truths]
    gt_boxes = [np.array([g[0].as_list() for g in gts], dtype=float).reshape(-1, 4)
                for gts in ground_truths]
    gt_cls = [np.array([g[1] for g in gts], dtype=np.int64) for gts in ground_truths]
    matches = []
    for img, j in ranked:
        box = np.array([detections[img][j].box.as_list()])
        ious = iou_matrix(box, gt_boxes[img])[0] if gt_boxes[img].size else np.zeros(0)
        ious = np.where((gt_cls[img] == cls) & ~used[img], ious, -1.0)
        if ious.size and ious.max() > iou_threshold:
            g = int(ious.argmax())
            used[img][g] = True
            matches.append(g)
        else:
            matches.append(-1)
    return ranked, matches


def mean_average_precision(detections: Sequence[Sequence[Detection]],
                           ground_truths: Sequence[Sequence[GroundTruth]],
                           iou_threshold: float = 0.5, classes: int | None = None,
                           tier_of: Callable[[BoundingBox], str] | None = None,
                           tiers: Iterable[str] = ("small", "medium", "large")) -> MAPResult:
    """mAP over classes that have at least one ground truth.

    For a size tier, only that tier's ground truths count as positives.
    Detections matched to other-tier ground truths are ignored. Unmatched
    detections count as false positives when ``tier_of(box)`` is the tier,
    or always if ``tier_of`` is None.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou threshold must lie in (0, 1], got {iou_threshold}")
    if len(detections) != len(ground_truths):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truths)} images")
    all_classes = {g[1] for gts in ground_truths for g in gts}
    if not all_classes:
        raise ValueError("mean average precision needs at least one ground truth")
    if classes is not None:
        all_classes = {c for c in all_classes if 0 <= c < classes}
    tiers = tuple(tiers)

    per_class: dict[int, float] = {}
    tier_aps: dict[str, list[float]] = {t: [] for t in tiers}
    for cls in sorted(all_classes):
        ranked, matches = _match_detections(detections, ground_truths, cls, iou_threshold)
        n_gt = sum(1 for gts in ground_truths for g in gts if g[1] == cls)
        per_class[cls] = average_precision([m >= 0 for m in matches], n_gt)
        for tier in tiers:
            n_tier = sum(1 for gts in ground_truths for g in gts
                         if g[1] == cls and len(g) > 2 and g[2] == tier)
            if n_tier == 0:
                continue
            flags = []
            for (img, j), m in zip(ranked, matches):
                if m >= 0:
                    if ground_truths[img][m][2] == tier:
                        flags.append(True)
                elif tier_of is None or tier_of(detections[img][j].box) == tier:
                    flags.append(False)
            tier_aps[tier].append(average_precision(flags, n_tier))
    m_ap = float(np.mean(list(per_class.values())))
    per_tier = {t: (float(np.mean(v)) if v else None) for t, v in tier_aps.items()}
    return MAPResult(m_ap, per_class, per_tier)


# ---------------------------------------------------------------------------
# toy SSD

@dataclass(frozen=True)
class DetectorConfig:
    height: int = 64
    width: int = 64
    channels: int = 3
    classes: int = 3
    widths: tuple[int, ...] = (16, 32, 32, 32)
    # anchor (w, h) per feature map; maps come from the last two backbone layers
    scales: tuple[tuple[tuple[float, float], ...], ...] = (
        ((4.0, 4.0), (8.0, 8.0), (13.0, 13.0)),
        ((18.0, 18.0), (24.0, 24.0), (32.0, 32.0)),
    )
    score_threshold: float = 0.05
    nms_threshold: float = 0.45
    max_detections: int = 50
    negative_ratio: int = 3

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales[0])

    @property
    def outputs_per_anchor(self) -> int:
        return 4 + self.classes + 1


def detector_model_spec(variant: str, cfg: DetectorConfig = DetectorConfig()) -> ModelSpec:
    """Four stride-2 3x3 convs; heads on the last two (8x8 and 4x4 for 64x64 input)."""
    backbone = []
    cin = cfg.channels
    for c in cfg.widths:
        backbone.append(ConvSpec(3, cin, c, stride=2))
        cin = c
    n = len(backbone)
    out = cfg.anchors_per_cell * cfg.outputs_per_anchor
    heads = (HeadSpec(n - 2, 3, cfg.widths[-2], out), HeadSpec(n - 1, 3, cfg.widths[-1], out))
    return ModelSpec(variant, cfg.height, cfg.width, cfg.channels, tuple(backbone), heads)


def detector_anchors(spec: ModelSpec, cfg: DetectorConfig) -> list[Anchor]:
    from .layers import feature_dims
    dims = feature_dims(spec)
    maps = [dims[h.source][:2] for h in spec.heads]
    return make_anchor_grid(maps, cfg.scales, (cfg.height, cfg.width))


def flatten_heads(head_outputs: Sequence[Tensor], cfg: DetectorConfig) -> Tensor:
    """Concatenate head maps into ``(N, anchors, 4 + K + 1)``."""
    k = cfg.outputs_per_anchor
    parts = [T.reshape(h, (h.shape[0], -1, k)) for h in head_outputs]
    return T.concat(parts, axis=1)


@dataclass
class DetectionTargets:
    labels: np.ndarray  # (N, anchors) int, 0 = background, c + 1 = class c
    offsets: np.ndarray  # (N, anchors, 4)


def build_targets(anchors_cs: np.ndarray, ground_truths: Sequence[Sequence[GroundTruth]]) -> DetectionTargets:
    n, a = len(ground_truths), anchors_cs.shape[0]
    labels = np.zeros((n, a), dtype=np.int64)
    offsets = np.zeros((n, a, 4))
    for i, gts in enumerate(ground_truths):
        pairs = [(g[0], g[1]) for g in gts]
        match = match_anchors(anchors_cs, pairs)
        pos = match.positives
        if pos.size:
            gt_arr = np.array([pairs[g][0].as_list() for g in match.assignment[pos]])
            labels[i, pos] = np.array([pairs[g][1] for g in match.assignment[pos]]) + 1
            offsets[i, pos] = encode_array(anchors_cs[pos], gt_arr)
    return DetectionTargets(labels, offsets)


def hard_negative_mask(logits: np.ndarray, labels: np.ndarray, ratio: int) -> np.ndarray:
    """Positives plus the ``ratio * positives`` hardest negatives per image."""
    z = logits - logits.max(axis=-1, keepdims=True)
    bg_loss = -(z[..., 0] - np.log(np.exp(z).sum(axis=-1)))
    mask = labels > 0
    for i in range(labels.shape[0]):
        neg = np.flatnonzero(labels[i] == 0)
        k = min(neg.size, ratio * max(int(mask[i].sum()), 1))
        if k:
            hardest = neg[np.argsort(-bg_loss[i, neg], kind="stable")[:k]]
            mask[i, hardest] = True
    return mask


def detection_loss(outputs: Tensor, targets: DetectionTargets, negative_ratio: int = 3) -> Tensor:
    """Cross-entropy on positives and mined negatives plus smooth-L1 on positive offsets,
    both divided by the number of positives."""
    offsets = T.take(outputs, (Ellipsis, slice(0, 4)))
    logits = T.take(outputs, (Ellipsis, slice(4, None)))
    positive = targets.labels > 0
    n_pos = max(int(positive.sum()), 1)
    mask = hard_negative_mask(logits.data, targets.labels, negative_ratio)
    cls_loss = T.softmax_cross_entropy(logits, targets.labels, weights=mask / n_pos)
    box_w = np.repeat(positive[..., None], 4, axis=-1) / n_pos
    box_loss = T.smooth_l1(offsets, targets.offsets, weights=box_w)
    return T.add(cls_loss, box_loss)


def decode_detections(outputs: np.ndarray, anchors_cs: np.ndarray,
                      cfg: DetectorConfig) -> list[list[Detection]]:
    """Softmax scores, decoded and clipped boxes, per-class NMS, top-k per image."""
    results = []
    for out in outputs:
        z = out[:, 4:] - out[:, 4:].max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        boxes = decode_array(anchors_cs, out[:, :4])
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, cfg.width)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, cfg.height)
        valid = (boxes[:, 2] - boxes[:, 0] > 1e-6) & (boxes[:, 3] - boxes[:, 1] > 1e-6)
        dets = []
        for c in range(cfg.classes):
            score = probs[:, c + 1]
            idx = np.flatnonzero((score > cfg.score_threshold) & valid)
            if idx.size == 0:
                continue
            idx = idx[np.argsort(-score[idx], kind="stable")][:200]
            keep = idx[nms_indices(boxes[idx], score[idx], np.zeros(idx.size, dtype=np.int64),
                                   cfg.nms_threshold)]
            dets.extend(Detection(BoundingBox(*map(float, boxes[i])), c, float(score[i])) for i in keep)
        dets.sort(key=lambda d: -d.confidence)
        results.append(dets[:cfg.max_detections])
    return results


# ---------------------------------------------------------------------------
# detections.jsonl

def write_detections(path: str | Path, detections: Sequence[Sequence[Detection]],
                     image_ids: Sequence[str] | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i, dets in enumerate(detections):
            rec = {"image_id": image_ids[i] if image_ids else str(i),
                   "boxes": [d.box.as_list() for d in dets],
                   "class_ids": [d.class_id for d in dets],
                   "confidences": [d.confidence for d in dets]}
            fh.write(json.dumps(rec) + "\n")


def read_detections(path: str | Path) -> tuple[list[str], list[list[Detection]]]:
    ids, out = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        ids.append(rec["image_id"])
        out.append([Detection(BoundingBox(*b), int(c), float(s))
                    for b, c, s in zip(rec["boxes"], rec["class_ids"], rec["confidences"])])
    return ids, out
