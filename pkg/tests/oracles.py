"""Slow, loop-based reference implementations used only by the tests.

They share no code with the package beyond the box dataclass.
"""

from fractions import Fraction


def box_iou(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def match_reference(anchor_boxes, gt_boxes, threshold=0.5):
    """Per-anchor ground-truth index or -1.

    Threshold rule: an anchor whose best IoU (first GT on ties) exceeds the
    threshold goes to that GT. Forced rule: each GT in order takes the anchor
    of highest IoU (lowest index on ties) among anchors no earlier GT forced,
    overriding the threshold assignment.
    """
    n = len(anchor_boxes)
    out = [-1] * n
    for a in range(n):
        best, best_g = -1.0, -1
        for g, gb in enumerate(gt_boxes):
            v = box_iou(anchor_boxes[a], gb)
            if v > best:
                best, best_g = v, g
        if best > threshold:
            out[a] = best_g
    forced = set()
    for g, gb in enumerate(gt_boxes):
        candidates = [a for a in range(n) if a not in forced]
        if not candidates:
            break
        best_a = candidates[0]
        for a in candidates:
            if box_iou(anchor_boxes[a], gb) > box_iou(anchor_boxes[best_a], gb):
                best_a = a
        forced.add(best_a)
        out[best_a] = g
    return out


def ap_reference(scored, gts, threshold=0.5):
    """AP of one class on one image by enumerating every rank cutoff.

    ``scored`` is a list of (confidence, box) and ``gts`` a list of boxes.
    Precision and recall are kept as exact fractions; the interpolated
    precision at cutoff k is the best precision at any cutoff >= k.
    """
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    used = set()
    tp_flags = []
    for i in order:
        box = scored[i][1]
        best, best_g = threshold, None
        for g, gb in enumerate(gts):
            if g in used:
                continue
            v = box_iou(box, gb)
            if v > best:
                best, best_g = v, g
        if best_g is not None:
            used.add(best_g)
        tp_flags.append(best_g is not None)
    points = []
    for k in range(1, len(tp_flags) + 1):
        tp = sum(tp_flags[:k])
        points.append((Fraction(tp, len(gts)), Fraction(tp, k)))
    total = Fraction(0)
    prev_recall = Fraction(0)
    for k, (recall, _) in enumerate(points):
        if recall > prev_recall:
            total += (recall - prev_recall) * max(p for _, p in points[k:])
            prev_recall = recall
    return total
