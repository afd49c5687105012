"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure computing the vector-Jacobian product. ``backward`` walks the graph in
reverse topological order, visiting each node once.

Arrays are channel-last: a single image is ``(H, W, C)`` and a batch is
``(N, H, W, C)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 op: str = "leaf", parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __getitem__(self, index):
        return take(self, index)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op,
                  parents=parents if needs else (), backward=backward_fn if needs else None)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# graph traversal

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every reachable node that requires gradients.

    Leaf gradients accumulate across calls (call ``zero_grad`` between
    steps); intermediate gradients are rebuilt on every call.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    for node in order:
        if node._backward is not None:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _channel_broadcastable(a_shape: tuple, b_shape: tuple) -> bool:
    # b is (..., H, W, 1) against a (..., H, W, C); an absent leading batch axis is allowed.
    if len(b_shape) < 2 or b_shape[-1] != 1:
        return False
    if len(b_shape) not in (len(a_shape), len(a_shape) - 1):
        return False
    return tuple(a_shape[len(a_shape) - len(b_shape):-1]) == tuple(b_shape[:-1])


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    return g.sum(axis=-1, keepdims=True)


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or b.ndim == 0:
        return
    if _channel_broadcastable(a.shape, b.shape):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible "
                     "(equal shapes, scalar, or trailing channel axis of size 1 only)")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_binary("add", a, b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, _reduce_to(g, b.shape))

    return _node(a.data + b.data, "add", (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -_reduce_to(g, b.shape))

    return _node(a.data - b.data, "sub", (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_binary("mul", a, b)

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, _reduce_to(g * a.data, b.shape))

    return _node(a.data * b.data, "mul", (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def back(g):
        _accumulate(a, g * c)

    return _node(a.data * c, "scale", (a,), back)


def square(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, 2.0 * a.data * g)

    return _node(a.data * a.data, "square", (a,), back)


# ---------------------------------------------------------------------------
# shape manipulation and reductions

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def back(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), "reshape", (a,), back)


def take(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing with a gradient that scatters back."""
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        full[index] += g
        _accumulate(a, full)

    return _node(np.array(out, copy=True), "take", (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors), back)


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    def back(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(np.asarray(a.data.sum(axis=axis)), "sum", (a,), back)


def mean(a: Tensor) -> Tensor:
    return scale(tensor_sum(a), 1.0 / a.size)


def spatial_sum(a: Tensor) -> Tensor:
    """Sum over the two spatial axes of an ``(N, H, W, C)`` tensor -> ``(N, C)``."""
    if a.ndim != 4:
        raise ShapeError(f"spatial_sum expects (N, H, W, C), got {a.shape}")
    return tensor_sum(a, axis=(1, 2))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, "matmul", (a, b), back)


def tile_spatial(v: Tensor, height: int, width: int) -> Tensor:
    """Repeat an ``(N, C)`` tensor over an ``H x W`` grid -> ``(N, H, W, C)``."""
    if v.ndim != 2:
        raise ShapeError(f"tile_spatial expects (N, C), got {v.shape}")
    n, c = v.shape
    out = np.broadcast_to(v.data[:, None, None, :], (n, height, width, c))

    def back(g):
        _accumulate(v, g.sum(axis=(1, 2)))

    return _node(np.array(out, copy=True), "tile", (v,), back)


# ---------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        _accumulate(x, g * mask)

    return _node(np.where(mask, x.data, 0.0), "relu", (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    # split on sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        _accumulate(x, g * out * (1.0 - out))

    return _node(out, "sigmoid", (x,), back)


def _softmax(d: np.ndarray) -> np.ndarray:
    z = d - d.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a last axis of length >= 1")
    out = _softmax(x.data)

    def back(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _node(out, "softmax", (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def back(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _node(out, "log_softmax", (x,), back)


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax": softmax}


def activation(op: str, x: Tensor) -> Tensor:
    try:
        return ACTIVATIONS[op](x)
    except KeyError:
        raise ValueError(f"unknown activation {op!r}; expected one of {sorted(ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# convolution

def _pad_amounts(k: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        total = k - 1
        return total // 2, total - total // 2
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv_output_size(n: int, k: int, stride: int, padding: str) -> int:
    lo, hi = _pad_amounts(k, padding)
    return (n + lo + hi - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "same",
           bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of ``(H, W, Cin)`` or ``(N, H, W, Cin)`` input
    with ``(k, k, Cin, Cout)`` kernels.

    "same" pads zeros symmetrically, the extra row/column going bottom/right
    for even ``k``. Output spatial size is ``floor((n + pad - k) / stride) + 1``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} / kernels {kernels.shape} have wrong rank")
    n, h, w, cin = xd.shape
    kh, kw, kcin, cout = kernels.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernels must be square, got {kh}x{kw}")
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernels expect {kcin}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    lo, hi = _pad_amounts(kh, padding)
    if kh > h + lo + hi or kw > w + lo + hi:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + lo + hi}x{w + lo + hi}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")

    xp = np.pad(xd, ((0, 0), (lo, hi), (lo, hi), (0, 0))) if lo or hi else xd
    ho = (h + lo + hi - kh) // stride + 1
    wo = (w + lo + hi - kw) // stride + 1
    if kh == 1:
        cols = xp[:, ::stride, ::stride, :][:, :ho, :wo, :]
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        # (N, Ho, Wo, Cin, kh, kw) -> (N, Ho, Wo, kh, kw, Cin)
        cols = win[:, ::stride, ::stride][:, :ho, :wo].transpose(0, 1, 2, 4, 5, 3)
    cols2 = np.ascontiguousarray(cols).reshape(n * ho * wo, kh * kw * cin)
    k2 = kernels.data.reshape(kh * kw * cin, cout)
    out = cols2 @ k2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    if unbatched:
        out = out[0]

    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def back(g):
        g2 = g.reshape(n * ho * wo, cout)
        if kernels.requires_grad:
            _accumulate(kernels, (cols2.T @ g2).reshape(kernels.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ k2.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, lo:lo + h, lo:lo + w, :]
            _accumulate(x, gx[0] if unbatched else gx)

    return _node(out, "conv2d", parents, back)


# ---------------------------------------------------------------------------
# losses

def _weighted_total(per_elem: np.ndarray, weights: np.ndarray | None) -> tuple[np.ndarray, float]:
    if weights is None:
        return np.ones_like(per_elem), float(per_elem.size)
    w = np.asarray(weights, dtype=DTYPE)
    if w.shape != per_elem.shape:
        raise ShapeError(f"loss weights {w.shape} do not match {per_elem.shape}")
    return w, 1.0


def mse(pred: Tensor, target, weights=None) -> Tensor:
    """Mean squared error. With ``weights`` the result is ``sum(w * r**2)`` instead."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if t.shape != pred.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {t.shape}")
    r = pred.data - t
    w, denom = _weighted_total(r, weights)
    value = float((w * r * r).sum()) / denom

    def back(g):
        _accumulate(pred, g * 2.0 * w * r / denom)

    return _node(np.asarray(value), "mse", (pred,), back)


def smooth_l1(pred: Tensor, target, weights=None) -> Tensor:
    """Huber loss with unit transition: ``0.5 r**2`` for ``|r| < 1`` else ``|r| - 0.5``."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if t.shape != pred.shape:
        raise ShapeError(f"smooth_l1: prediction {pred.shape} vs target {t.shape}")
    r = pred.data - t
    a = np.abs(r)
    quad = a < 1.0
    per = np.where(quad, 0.5 * r * r, a - 0.5)
    w, denom = _weighted_total(per, weights)
    value = float((w * per).sum()) / denom

    def back(g):
        _accumulate(pred, g * w * np.where(quad, r, np.sign(r)) / denom)

    return _node(np.asarray(value), "smooth_l1", (pred,), back)


def softmax_cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """Cross-entropy of softmax(logits) over the last axis.

    ``target`` holds class indices (shape ``logits.shape[:-1]``) or one-hot rows
    (shape ``logits.shape``). Unweighted, the per-row losses are averaged;
    with ``weights`` (shape ``logits.shape[:-1]``) they are summed with weights.
    """
    k = logits.shape[-1]
    t = np.asarray(target)
    if t.shape == logits.shape:
        onehot = t.astype(DTYPE)
    else:
        if t.shape != logits.shape[:-1]:
            raise ShapeError(f"cross-entropy: target {t.shape} vs logits {logits.shape}")
        idx = t.astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= k):
            bad = idx[(idx < 0) | (idx >= k)].reshape(-1)[0]
            raise IndexError(f"cross-entropy: class index {bad} out of range for {k} classes")
        onehot = np.zeros(logits.shape, dtype=DTYPE)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    per = -(onehot * logp).sum(axis=-1)
    w, denom = _weighted_total(per, weights)
    value = float((w * per).sum()) / denom
    p = np.exp(logp)

    def back(g):
        _accumulate(logits, g * (w / denom)[..., None] * (p * onehot.sum(axis=-1, keepdims=True) - onehot))

    return _node(np.asarray(value), "cross_entropy", (logits,), back)


LOSSES = {"mse": mse, "softmax-cross-entropy": softmax_cross_entropy, "smooth-l1": smooth_l1}


def loss(op: str, prediction: Tensor, target, weights=None) -> Tensor:
    try:
        fn = LOSSES[op]
    except KeyError:
        raise ValueError(f"unknown loss {op!r}; expected one of {sorted(LOSSES)}") from None
    return fn(prediction, target, weights)


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_diff_grad(f: Callable[[np.ndarray], float], at, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``at``, one element at a time."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.array(at.data if isinstance(at, Tensor) else at, dtype=DTYPE, copy=True)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def parameters_grad(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
