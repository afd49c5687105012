"""Finite-difference checks of every differentiable operation.

Each check draws small random inputs (every dim <= 6), reduces the op's
output to a scalar with fixed random weights, and compares the autodiff
gradient of every input against central differences.

Central differences at h=1e-6 carry an absolute rounding error of roughly
1e-10 times the magnitude of the intermediate values, so a relative check
at 1e-5 only means something where gradients are well above that floor.
The generators therefore draw instances whose gradients cannot cancel to
near zero: positive operands for the linear ops, one-hot probes for
softmax, residuals bounded away from zero for the losses.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .detector import DetectionTargets, detection_loss
from .layers import CoordConvLayer, CoordEmbLayer, coord_conv_forward, coord_embed_forward
from .tensor import Tensor

STEP = 1e-6
TOLERANCE = 1e-5
PIPELINE_TOLERANCE = 1e-6
INSTANCES = 10


@dataclass
class GradCheck:
    name: str
    module: str  # tensor | layers | detector
    make: Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[[list[Tensor]], Tensor]]]
    tolerance: float = TOLERANCE


@dataclass
class CheckResult:
    name: str
    module: str
    worst_rel_error: float
    tolerance: float
    instances: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_error < self.tolerance


def relative_error(autodiff: np.ndarray, numeric: np.ndarray) -> float:
    if autodiff.size == 0:
        return 0.0
    return float(np.max(np.abs(autodiff - numeric) / (1e-8 + np.abs(numeric))))


def check_once(inputs: list[np.ndarray], fn: Callable[[list[Tensor]], Tensor],
               h: float = STEP, corrupt: bool = False) -> float:
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(leaves)
    out.backward()
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = [Tensor(v) for v in inputs]
            args[i] = Tensor(xi)
            return fn(args).item()

        numeric = T.finite_diff_grad(f, x, h)
        auto = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(x)
        if corrupt:
            auto = auto * 1.01 + 1e-3
        worst = max(worst, relative_error(auto, numeric))
    return worst


# ---------------------------------------------------------------------------
# input generators

def _dims(rng, lo=1, hi=6, n=3):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tensor_sum(T.mul(out, Tensor(w)))


def _probe_weights(rng, shape):
    return rng.uniform(0.5, 1.5, size=shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 1.5, size=shape)


def _unary(op):
    def make(rng):
        shape = _dims(rng)
        w = _probe_weights(rng, shape)
        return [_away_from_zero(rng, shape)], lambda t: _weighted_sum(op(t[0]), w)
    return make


def _binary(op, broadcast=False):
    def make(rng):
        shape = _dims(rng)
        bshape = shape[:-1] + (1,) if broadcast else shape
        w = _probe_weights(rng, shape)
        return ([_away_from_zero(rng, shape), _away_from_zero(rng, bshape)],
                lambda t: _weighted_sum(op(t[0], t[1]), w))
    return make


def _conv(stride: int, padding: str, kernel: int | None = None, batched: bool = False, bias: bool = False):
    def make(rng):
        k = kernel or int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(max(k, 2), 7, size=2))
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        shape = ((2,) if batched else ()) + (h, w, cin)
        x = _positive(rng, shape)
        kern = _positive(rng, (k, k, cin, cout))
        probe = T.conv2d(Tensor(x), Tensor(kern), stride, padding)
        wts = _probe_weights(rng, probe.shape)
        inputs = [x, kern] + ([rng.normal(size=cout)] if bias else [])

        def fn(t):
            return _weighted_sum(T.conv2d(t[0], t[1], stride, padding, t[2] if bias else None), wts)
        return inputs, fn
    return make


def _softmax_like(op):
    def make(rng):
        rows, cols = _dims(rng, n=2)
        cols = max(cols, 2)
        # any dense probe lets s_i * (w_i - E_s[w]) cancel; one entry per row cannot
        w = np.zeros((rows, cols))
        w[np.arange(rows), rng.integers(0, cols, size=rows)] = rng.uniform(0.5, 1.5, size=rows)
        return [rng.normal(size=(rows, cols))], lambda t: _weighted_sum(op(t[0]), w)
    return make


def _mse(rng):
    shape = _dims(rng)
    target = rng.normal(size=shape)
    return [target + _away_from_zero(rng, shape)], lambda t: T.mse(t[0], target)


def _smooth_l1(rng):
    shape = _dims(rng)
    target = rng.normal(size=shape)
    resid = rng.choice([-1.0, 1.0], size=shape) * np.where(
        rng.random(shape) < 0.5, rng.uniform(0.1, 0.9, size=shape), rng.uniform(1.1, 2.0, size=shape))
    return [target + resid], lambda t: T.smooth_l1(t[0], target)


def _cross_entropy(rng):
    n, k = _dims(rng, n=2)
    k = max(k, 2)
    labels = rng.integers(0, k, size=n)
    weights = rng.uniform(0.5, 1.5, size=n)
    return [rng.normal(size=(n, k))], lambda t: T.softmax_cross_entropy(t[0], labels, weights)


def _concat(rng):
    h, w = _dims(rng, n=2)
    c1, c2 = _dims(rng, hi=3, n=2)
    wts = _probe_weights(rng, (h, w, c1 + c2))
    return ([rng.normal(size=(h, w, c1)), rng.normal(size=(h, w, c2))],
            lambda t: _weighted_sum(T.concat([t[0], t[1]], axis=-1), wts))


def _reshape_take(rng):
    shape = _dims(rng, lo=2)
    wts = _probe_weights(rng, (shape[0] * shape[1], shape[2] - 1))
    return ([rng.normal(size=shape)],
            lambda t: _weighted_sum(T.take(T.reshape(t[0], (-1, shape[2])), (Ellipsis, slice(1, None))), wts))


def _matmul(rng):
    n, k, m = _dims(rng)
    wts = _probe_weights(rng, (n, m))
    return [_positive(rng, (n, k)), _positive(rng, (k, m))], lambda t: _weighted_sum(T.matmul(t[0], t[1]), wts)


def _spatial_sum(rng):
    shape = (2,) + _dims(rng)
    wts = _probe_weights(rng, (2, shape[-1]))
    return [rng.normal(size=shape)], lambda t: _weighted_sum(T.spatial_sum(t[0]), wts)


def _tile(rng):
    n, c = _dims(rng, n=2)
    h, w = _dims(rng, n=2)
    wts = _probe_weights(rng, (n, h, w, c))
    return [rng.normal(size=(n, c))], lambda t: _weighted_sum(T.tile_spatial(t[0], h, w), wts)


def _coord_embed(rng):
    h, w, c = _dims(rng)
    layer = CoordEmbLayer(h, w)
    x0 = layer.x_embed.data + rng.normal(scale=0.1, size=(h, w, 1))
    y0 = layer.y_embed.data + rng.normal(scale=0.1, size=(h, w, 1))
    image = rng.uniform(-1, 1, size=(h, w, c))
    wts = _probe_weights(rng, (h, w, c))

    def fn(t):
        layer.x_embed, layer.y_embed = t[1], t[2]
        return _weighted_sum(coord_embed_forward(layer, t[0]), wts)
    return [image, x0, y0], fn


def _coord_conv(rng):
    h, w = (int(v) for v in rng.integers(3, 7, size=2))
    cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
    k = int(rng.choice([1, 3]))
    kern = _positive(rng, (k, k, cin + 2, cout))
    layer = CoordConvLayer(h, w, kern)
    x = _positive(rng, (h, w, cin))
    # coordinate channels are zero-mean; a probe growing along both axes keeps
    # their kernel gradients away from zero
    growth = np.exp(1.5 * (layer.i_channel.data + layer.j_channel.data))
    wts = growth * rng.uniform(0.95, 1.05, size=(h, w, cout))

    def fn(t):
        layer.conv.kernel, layer.conv.bias = t[1], t[2]
        return _weighted_sum(coord_conv_forward(layer, t[0]), wts)
    return [x, kern, rng.normal(size=cout)], fn


def _pipeline(rng):
    # image >= 2.5 keeps (I+X+Y)/3 positive; with positive kernels and a target
    # below every output, each gradient is a sum of same-sign terms
    h, w, c = _dims(rng, lo=2, hi=5)
    hidden, out = 3, 2
    layer = CoordEmbLayer(h, w)
    image = rng.uniform(2.5, 3.5, size=(h, w, c))
    k1 = _positive(rng, (3, 3, c, hidden)) / (9 * c)
    k2 = _positive(rng, (1, 1, hidden, out)) / hidden
    target = -rng.uniform(0.5, 1.5, size=(h, w, out))

    def fn(t):
        layer.x_embed, layer.y_embed = t[1], t[2]
        z = T.relu(T.conv2d(coord_embed_forward(layer, t[0]), t[3], 1, "same"))
        return T.mse(T.conv2d(z, t[4], 1, "same"), target)
    return [image, layer.x_embed.data.copy(), layer.y_embed.data.copy(), k1, k2], fn


def _detection_loss(rng):
    n, anchors, classes = 2, int(rng.integers(4, 7)), 3
    labels = np.zeros((n, anchors), dtype=np.int64)
    for i in range(n):
        pos = rng.choice(anchors, size=int(rng.integers(1, 3)), replace=False)
        labels[i, pos] = rng.integers(1, classes + 1, size=pos.size)
    targets = DetectionTargets(labels, rng.normal(size=(n, anchors, 4)))
    outputs = targets.offsets + _away_from_zero(rng, (n, anchors, 4), 0.1, 0.9)
    outputs = np.concatenate([outputs, rng.normal(size=(n, anchors, classes + 1))], axis=-1)
    return [outputs], lambda t: detection_loss(t[0], targets, negative_ratio=1)


def _ssd_head(rng):
    from .detector import flatten_heads, DetectorConfig
    cfg = DetectorConfig(classes=2, scales=(((2.0, 2.0),),))
    h = w = int(rng.integers(2, 5))
    feat = _positive(rng, (1, h, w, 3))
    kern = rng.normal(scale=0.3, size=(3, 3, 3, cfg.outputs_per_anchor))
    labels = np.zeros((1, h * w), dtype=np.int64)
    labels[0, int(rng.integers(0, h * w))] = 1
    # near-zero predictions against targets of magnitude >= 0.3 keep the box residuals nonzero
    targets = DetectionTargets(labels, _away_from_zero(rng, (1, h * w, 4), 0.3, 0.8))

    def fn(t):
        out = flatten_heads([T.conv2d(t[0], t[1], 1, "same")], cfg)
        return detection_loss(out, targets, negative_ratio=3)
    return [feat, kern], fn


CHECKS: list[GradCheck] = [
    GradCheck("add", "tensor", _binary(T.add)),
    GradCheck("add_channel_broadcast", "tensor", _binary(T.add, broadcast=True)),
    GradCheck("sub", "tensor", _binary(T.sub)),
    GradCheck("mul", "tensor", _binary(T.mul)),
    GradCheck("mul_channel_broadcast", "tensor", _binary(T.mul, broadcast=True)),
    GradCheck("scale", "tensor", _unary(lambda x: T.scale(x, -0.37))),
    GradCheck("square", "tensor", _unary(T.square)),
    GradCheck("conv2d_same", "tensor", _conv(1, "same")),
    GradCheck("conv2d_valid", "tensor", _conv(1, "valid")),
    GradCheck("conv2d_stride2_batched_bias", "tensor", _conv(2, "same", kernel=3, batched=True, bias=True)),
    GradCheck("conv2d_even_kernel", "tensor", _conv(1, "same", kernel=2)),
    GradCheck("relu", "tensor", _unary(T.relu)),
    GradCheck("sigmoid", "tensor", _unary(T.sigmoid)),
    GradCheck("softmax", "tensor", _softmax_like(T.softmax)),
    GradCheck("log_softmax", "tensor", _softmax_like(T.log_softmax)),
    GradCheck("mse", "tensor", _mse),
    GradCheck("smooth_l1", "tensor", _smooth_l1),
    GradCheck("softmax_cross_entropy", "tensor", _cross_entropy),
    GradCheck("concat", "tensor", _concat),
    GradCheck("reshape_take", "tensor", _reshape_take),
    GradCheck("matmul", "tensor", _matmul),
    GradCheck("spatial_sum", "tensor", _spatial_sum),
    GradCheck("tile_spatial", "tensor", _tile),
    GradCheck("coord_embed_forward", "layers", _coord_embed),
    GradCheck("coord_conv_forward", "layers", _coord_conv),
    GradCheck("coordemb_conv_loss_pipeline", "layers", _pipeline, PIPELINE_TOLERANCE),
    GradCheck("detection_loss", "detector", _detection_loss),
    GradCheck("ssd_head_loss", "detector", _ssd_head),
]


def run_suite(module: str = "all", seed: int = 0, instances: int = INSTANCES,
              inject_fault: str | None = None) -> list[CheckResult]:
    """Run every check whose module matches (``all`` runs everything)."""
    if module not in ("all", "tensor", "layers", "detector"):
        raise ValueError(f"unknown gradcheck module {module!r}")
    results = []
    for i, check in enumerate(CHECKS):
        if module != "all" and check.module != module:
            continue
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(instances):
            inputs, fn = check.make(rng)
            worst = max(worst, check_once(inputs, fn, corrupt=(inject_fault == check.name)))
        results.append(CheckResult(check.name, check.module, worst, check.tolerance, instances,
                                   time.perf_counter() - t0))
    return results
