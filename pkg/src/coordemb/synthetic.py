"""Synthetic data: coordinate diagnostics, shape-detection scenes and affine distortion.

Shape scenes are rasterized on the integer pixel grid with integer
arithmetic, so a seed always produces the same bits. A pixel ``(r, c)``
covers ``[c, c + 1) x [r, r + 1)`` in box coordinates.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detector import BoundingBox, jaccard
from .layers import denormalize_coord, normalize_coord

TIERS = ("small", "medium", "large")
SHAPES = ("circle", "triangle", "square")
BACKGROUND = -0.6
CLASS_COLORS = np.array([[0.9, -0.7, -0.7],
                         [-0.7, 0.9, -0.7],
                         [-0.7, -0.7, 0.9]])
EDGE_MARGIN = 0.2
MAX_PLACEMENT_TRIES = 1000
RASTER_MAGIC = b"CELF"


class SceneGenerationError(RuntimeError):
    pass


class AffineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# coordinate classification / regression diagnostics

@dataclass
class CoordTaskSample:
    coordinate: tuple[int, int]  # (row, col)
    onehot_image: np.ndarray  # (H, W, 1)
    class_index: int

    @classmethod
    def at(cls, row: int, col: int, height: int, width: int) -> "CoordTaskSample":
        img = np.zeros((height, width, 1))
        img[row, col, 0] = 1.0
        return cls((row, col), img, row * width + col)

    def normalized(self, height: int, width: int) -> tuple[float, float]:
        """Normalized ``(x, y)``: x from the column, y from the row."""
        row, col = self.coordinate
        return normalize_coord(col, width), normalize_coord(row, height)


def gen_coord_dataset(height: int, width: int, split: str = "quadrant",
                      seed: int = 0) -> tuple[list[CoordTaskSample], list[CoordTaskSample]]:
    """Partition every grid coordinate into train and test.

    ``quadrant`` holds out the bottom-right quadrant (``2*row >= H`` and
    ``2*col >= W``) regardless of seed; ``uniform`` shuffles with the seed
    and keeps 75% for training.
    """
    if height * width < 4:
        raise ValueError(f"coordinate grid {height}x{width} has fewer than 4 cells")
    coords = [(r, c) for r in range(height) for c in range(width)]
    if split == "quadrant":
        if height < 2 or width < 2:
            raise ValueError("quadrant split needs at least 2 rows and 2 columns")
        test_set = [(r, c) for r, c in coords if 2 * r >= height and 2 * c >= width]
        train_set = [(r, c) for r, c in coords if not (2 * r >= height and 2 * c >= width)]
    elif split == "uniform":
        order = np.random.default_rng(seed).permutation(len(coords))
        n_train = len(coords) * 3 // 4
        train_set = [coords[i] for i in order[:n_train]]
        test_set = [coords[i] for i in order[n_train:]]
    else:
        raise ValueError(f"unknown split {split!r}; expected 'quadrant' or 'uniform'")
    make = lambda rc: CoordTaskSample.at(rc[0], rc[1], height, width)  # noqa: E731
    return [make(rc) for rc in train_set], [make(rc) for rc in test_set]


def coord_inputs(samples: Sequence[CoordTaskSample], height: int, width: int) -> np.ndarray:
    return np.array([s.normalized(height, width) for s in samples], dtype=float).reshape(-1, 2)


def coord_classification_eval(model: Callable, test: Sequence[CoordTaskSample],
                              height: int, width: int) -> float:
    """Fraction of samples whose arg-max logit (lowest index on ties) is the target pixel.

    ``model`` maps an ``(N, 2)`` array of normalized ``(x, y)`` to ``(N, H*W)`` logits.
    """
    if not test:
        raise ValueError("cannot evaluate accuracy on an empty test set")
    logits = np.asarray(model(coord_inputs(test, height, width)))
    pred = logits.reshape(len(test), -1).argmax(axis=1)
    truth = np.array([s.class_index for s in test])
    return float(np.mean(pred == truth))


def coord_regression_eval(model: Callable, test: Sequence[CoordTaskSample],
                          height: int, width: int) -> float:
    """Mean Euclidean pixel error of predicted normalized ``(x, y)``.

    ``model`` maps ``(N, H, W, 1)`` one-hot images to ``(N, 2)``.
    """
    if not test:
        raise ValueError("cannot evaluate error on an empty test set")
    images = np.stack([s.onehot_image for s in test])
    pred = np.asarray(model(images)).reshape(len(test), 2)
    cols = denormalize_coord(pred[:, 0], width)
    rows = denormalize_coord(pred[:, 1], height)
    truth = np.array([s.coordinate for s in test], dtype=float)
    return float(np.mean(np.hypot(rows - truth[:, 0], cols - truth[:, 1])))


# ---------------------------------------------------------------------------
# shape scenes

@dataclass
class SceneObject:
    box: BoundingBox
    class_id: int
    tier: str


@dataclass
class ShapeScene:
    image: np.ndarray  # (H, W, 3) in [-1, 1]
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def ground_truths(self) -> list[tuple[BoundingBox, int, str]]:
        return [(o.box, o.class_id, o.tier) for o in self.objects]


def tier_thresholds(height: int, width: int) -> tuple[float, float]:
    m = min(height, width)
    return (0.06 * m) ** 2, (0.25 * m) ** 2


def size_tier(area: float, height: int, width: int) -> str:
    small, large = tier_thresholds(height, width)
    if area < small:
        return "small"
    if area > large:
        return "large"
    return "medium"


def _tier_sizes(height: int, width: int) -> dict[str, list[int]]:
    m = min(height, width)
    sizes: dict[str, list[int]] = {t: [] for t in TIERS}
    for s in range(2, int(0.45 * m) + 1):
        sizes[size_tier(s * s, height, width)].append(s)
    return {t: v for t, v in sizes.items() if v}


def _shape_mask(shape: str, s: int) -> np.ndarray:
    r, c = np.mgrid[0:s, 0:s]
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "circle":
        return (2 * r + 1 - s) ** 2 + (2 * c + 1 - s) ** 2 <= s * s
    if shape == "triangle":
        return np.abs(2 * c + 1 - s) <= r + 1
    raise ValueError(f"unknown shape {shape!r}")


def in_edge_margin(box: BoundingBox, height: int, width: int) -> bool:
    cx, cy = box.center
    return (cx < EDGE_MARGIN * width or cx > (1 - EDGE_MARGIN) * width
            or cy < EDGE_MARGIN * height or cy > (1 - EDGE_MARGIN) * height)


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    noise = rng.integers(-12, 13, size=(height, width, 3)) / 100.0
    stripes = ((np.arange(width)[None, :] // 4 + np.arange(height)[:, None] // 4) % 2) * 0.1
    return BACKGROUND + noise + stripes[..., None]


def gen_shape_scene(height: int, width: int, n_objects: int, seed: int,
                    edge_bias: float = 0.0) -> ShapeScene:
    """Render ``n_objects`` non-overlapping filled shapes.

    Class ids 0, 1, 2 are circle, triangle, square, each with its own color.
    A small-tier object lands in the outer 20% margin with probability
    ``edge_bias``.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if not 0.0 <= edge_bias <= 1.0:
        raise ValueError(f"edge_bias must lie in [0, 1], got {edge_bias}")
    rng = np.random.default_rng(seed)
    image = _background(rng, height, width)
    sizes = _tier_sizes(height, width)
    if not sizes:
        raise SceneGenerationError(f"image {height}x{width} too small for any object")
    tiers = [t for t in TIERS if t in sizes]
    weights = np.array([{"small": 0.4, "medium": 0.4, "large": 0.2}[t] for t in tiers])
    placed: list[SceneObject] = []
    tries = 0
    while len(placed) < n_objects:
        tries += 1
        if tries > MAX_PLACEMENT_TRIES:
            raise SceneGenerationError(
                f"could not place {n_objects} objects in {height}x{width} after "
                f"{MAX_PLACEMENT_TRIES} attempts (placed {len(placed)})")
        tier = tiers[rng.choice(len(tiers), p=weights / weights.sum())]
        s = int(rng.choice(sizes[tier]))
        if s > height or s > width:
            continue
        class_id = int(rng.integers(0, len(SHAPES)))
        want_edge = tier == "small" and rng.random() < edge_bias
        r0 = int(rng.integers(0, height - s + 1))
        c0 = int(rng.integers(0, width - s + 1))
        mask = _shape_mask(SHAPES[class_id], s)
        rows, cols = np.nonzero(mask)
        tight = BoundingBox(float(c0 + cols.min()), float(r0 + rows.min()),
                            float(c0 + cols.max() + 1), float(r0 + rows.max() + 1))
        if want_edge and not in_edge_margin(tight, height, width):
            continue
        if any(jaccard(tight, o.box) >= 0.1 for o in placed):
            continue
        color = CLASS_COLORS[class_id] + rng.integers(-5, 6) / 100.0
        region = image[r0:r0 + s, c0:c0 + s]
        region[mask] = color
        placed.append(SceneObject(tight, class_id, size_tier(tight.area, height, width)))
    np.clip(image, -1.0, 1.0, out=image)
    return ShapeScene(image, placed)


def gen_shape_dataset(n_scenes: int, height: int = 64, width: int = 64, max_objects: int = 4,
                      seed: int = 0, edge_bias: float = 0.8) -> list[ShapeScene]:
    """Independent scenes, each seeded from ``(seed, index)``, with 1..max_objects objects."""
    scenes = []
    for i in range(n_scenes):
        sub = np.random.default_rng([seed, i])
        n_obj = int(sub.integers(1, max_objects + 1))
        scene_seed = int(sub.integers(0, 2 ** 31))
        scenes.append(gen_shape_scene(height, width, n_obj, scene_seed, edge_bias))
    return scenes


# ---------------------------------------------------------------------------
# affine distortion

@dataclass(frozen=True)
class AffineTransform:
    """Maps source ``(x, y)`` to destination ``A @ (x, y) + t`` in pixel coordinates."""
    matrix: tuple[tuple[float, float, float], tuple[float, float, float]]

    @classmethod
    def from_array(cls, m) -> "AffineTransform":
        m = np.asarray(m, dtype=float).reshape(2, 3)
        return cls(tuple(tuple(float(v) for v in row) for row in m))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls.from_array([[1, 0, 0], [0, 1, 0]])

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls.from_array([[1, 0, tx], [0, 1, ty]])

    def array(self) -> np.ndarray:
        return np.array(self.matrix, dtype=float)

    @property
    def determinant(self) -> float:
        (a, b, _), (c, d, _) = self.matrix
        return a * d - b * c

    def inverse(self) -> "AffineTransform":
        (a, b, tx), (c, d, ty) = self.matrix
        det = self.determinant
        if abs(det) < 1e-12:
            raise AffineError(f"affine transform is singular (determinant {det:g})")
        ia, ib, ic, id_ = d / det, -b / det, -c / det, a / det
        return AffineTransform(((ia, ib, -(ia * tx + ib * ty)), (ic, id_, -(ic * tx + id_ * ty))))

    def apply(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        (a, b, tx), (c, d, ty) = self.matrix
        return a * xs + b * ys + tx, c * xs + d * ys + ty


def affine_from_params(scale: float, shear: float, angle_deg: float, tx: float, ty: float,
                       height: int, width: int) -> AffineTransform:
    """Scale, then shear, then rotate about the image center, then translate."""
    th = math.radians(angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    lin = rot @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([scale, scale])
    center = np.array([width / 2.0, height / 2.0])
    offset = center - lin @ center + np.array([tx, ty])
    return AffineTransform.from_array(np.hstack([lin, offset[:, None]]))


def warp_image(image: np.ndarray, t: AffineTransform, fill: float = BACKGROUND) -> np.ndarray:
    """Inverse-map every destination pixel center and sample bilinearly."""
    height, width, _ = image.shape
    inv = t.inverse()
    rr, cc = np.mgrid[0:height, 0:width]
    xs, ys = inv.apply(cc + 0.5, rr + 0.5)
    u, v = xs - 0.5, ys - 0.5
    c0 = np.floor(u).astype(np.int64)
    r0 = np.floor(v).astype(np.int64)
    fx = (u - c0)[..., None]
    fy = (v - r0)[..., None]

    def fetch(r, c):
        ok = (r >= 0) & (r < height) & (c >= 0) & (c < width)
        vals = image[np.clip(r, 0, height - 1), np.clip(c, 0, width - 1)]
        return np.where(ok[..., None], vals, fill)

    return (fetch(r0, c0) * (1 - fx) * (1 - fy) + fetch(r0, c0 + 1) * fx * (1 - fy)
            + fetch(r0 + 1, c0) * (1 - fx) * fy + fetch(r0 + 1, c0 + 1) * fx * fy)


def transform_box(box: BoundingBox, t: AffineTransform) -> tuple[float, float, float, float]:
    """Axis-aligned hull of the four transformed corners (unclipped)."""
    xs = np.array([box.x1, box.x2, box.x1, box.x2])
    ys = np.array([box.y1, box.y1, box.y2, box.y2])
    tx, ty = t.apply(xs, ys)
    return float(tx.min()), float(ty.min()), float(tx.max()), float(ty.max())


def apply_affine(scene: ShapeScene, t: AffineTransform, min_visible: float = 0.25) -> ShapeScene:
    """Warp the image and move every box to the clipped hull of its transformed corners.

    Objects keeping less than ``min_visible`` of their transformed area after
    clipping are dropped; tiers are recomputed from the new box area.
    """
    if abs(t.determinant) < 1e-12:
        raise AffineError(f"affine transform is singular (determinant {t.determinant:g})")
    height, width = scene.height, scene.width
    image = warp_image(scene.image, t)
    objects = []
    for obj in scene.objects:
        x1, y1, x2, y2 = transform_box(obj.box, t)
        full = (x2 - x1) * (y2 - y1)
        cx1, cy1 = min(max(x1, 0.0), width), min(max(y1, 0.0), height)
        cx2, cy2 = min(max(x2, 0.0), width), min(max(y2, 0.0), height)
        if cx2 <= cx1 or cy2 <= cy1:
            continue
        clipped = BoundingBox(cx1, cy1, cx2, cy2)
        if clipped.area < min_visible * full:
            continue
        objects.append(SceneObject(clipped, obj.class_id, size_tier(clipped.area, height, width)))
    return ShapeScene(image, objects)


# ---------------------------------------------------------------------------
# serialization

def write_raster(path: str | Path, array: np.ndarray) -> None:
    """``CELF`` raster: magic, u32 LE H, W, C, then float64 LE values, row-major."""
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != RASTER_MAGIC:
        raise ValueError(f"{path}: bad raster magic {raw[:4]!r} at offset 0")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated raster header at offset {len(raw)}")
    h, w, c = struct.unpack_from("<III", raw, 4)
    need = 16 + 8 * h * w * c
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes for {h}x{w}x{c}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(h, w, c).astype(np.float64)


def write_scenes(directory: str | Path, scenes: Sequence[ShapeScene]) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with (directory / "scenes.jsonl").open("w", encoding="utf-8") as fh:
        for i, scene in enumerate(scenes):
            name = f"images/scene_{i:05d}.celf"
            write_raster(directory / name, scene.image)
            rec = {"image": name,
                   "boxes": [o.box.as_list() for o in scene.objects],
                   "class_ids": [o.class_id for o in scene.objects],
                   "tiers": [o.tier for o in scene.objects]}
            fh.write(json.dumps(rec) + "\n")


def read_scenes(directory: str | Path) -> list[ShapeScene]:
    directory = Path(directory)
    scenes = []
    for line in (directory / "scenes.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        objects = [SceneObject(BoundingBox(*b), int(c), t)
                   for b, c, t in zip(rec["boxes"], rec["class_ids"], rec["tiers"])]
        scenes.append(ShapeScene(read_raster(directory / rec["image"]), objects))
    return scenes


def write_coord_samples(directory: str | Path, samples: Sequence[CoordTaskSample]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / "samples.jsonl").open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"row": s.coordinate[0], "col": s.coordinate[1],
                                 "class_index": s.class_index}) + "\n")


def read_coord_samples(directory: str | Path, height: int, width: int) -> list[CoordTaskSample]:
    out = []
    for line in (Path(directory) / "samples.jsonl").read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(CoordTaskSample.at(rec["row"], rec["col"], height, width))
    return out
