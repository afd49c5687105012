"""Coordinate-aware input layers and the small conv models built around them.

Three model variants share one downstream layer sequence:

* ``vanilla``   plain convolutions.
* ``coordemb``  a :class:`CoordEmbLayer` in front of the unchanged convolutions.
  The layer averages the input with two trainable coordinate maps,
  ``out = (image + x_embed + y_embed) / 3``, broadcasting the maps over
  every channel.
* ``coordconv`` every convolution becomes a :class:`CoordConvLayer`, which
  concatenates fixed row/column coordinate channels onto its input.

Coordinates are normalized linearly to [-1, 1]; ``x`` follows the column
index and ``y`` the row index.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

VARIANTS = ("vanilla", "coordemb", "coordconv")


def normalize_coord(index: int, extent: int) -> float:
    """Map ``index`` in ``[0, extent)`` linearly onto [-1, 1]."""
    if extent < 1:
        raise ValueError(f"extent must be >= 1, got {extent}")
    if not 0 <= index < extent:
        raise IndexError(f"coordinate index {index} outside [0, {extent})")
    if extent == 1:
        return 0.0
    return 2.0 * index / (extent - 1) - 1.0


def denormalize_coord(value, extent: int):
    """Inverse of :func:`normalize_coord`, returning fractional pixel indices."""
    if extent == 1:
        return np.zeros_like(np.asarray(value, dtype=float))
    return (np.asarray(value, dtype=float) + 1.0) * (extent - 1) / 2.0


def coord_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x_grid, y_grid)``, each ``(H, W, 1)``."""
    if height < 1 or width < 1:
        raise ValueError(f"grid dims must be >= 1, got {height}x{width}")
    xs = np.array([normalize_coord(j, width) for j in range(width)])
    ys = np.array([normalize_coord(i, height) for i in range(height)])
    x_grid = np.broadcast_to(xs[None, :, None], (height, width, 1)).copy()
    y_grid = np.broadcast_to(ys[:, None, None], (height, width, 1)).copy()
    return x_grid, y_grid


class CoordEmbLayer:
    """Two trainable ``(H, W, 1)`` coordinate maps averaged into the input."""

    def __init__(self, height: int, width: int):
        self.height = height
        self.width = width
        x_grid, y_grid = coord_grid(height, width)
        self.x_embed = Tensor(x_grid, requires_grad=True, name="x_embed")
        self.y_embed = Tensor(y_grid, requires_grad=True, name="y_embed")

    def parameters(self) -> dict[str, Tensor]:
        return {"x_embed": self.x_embed, "y_embed": self.y_embed}

    def __call__(self, image: Tensor) -> Tensor:
        return coord_embed_forward(self, image)


def coord_embed_forward(layer: CoordEmbLayer, image: Tensor) -> Tensor:
    spatial = image.shape[-3:-1] if image.ndim >= 3 else image.shape
    if image.ndim not in (3, 4) or tuple(spatial) != (layer.height, layer.width):
        raise ShapeError(f"coord embedding: image dims {image.shape} do not match layer "
                         f"{layer.height}x{layer.width}")
    return T.scale(T.add(T.add(image, layer.x_embed), layer.y_embed), 1.0 / 3.0)


def init_kernel(rng: np.random.Generator, k: int, cin: int, cout: int,
                extra_in: int = 0) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) kernels, fan_in = k*k*(cin+extra_in).

    The first ``cin`` input channels come from the same draws whatever
    ``extra_in`` is, so a coordconv layer starts from the vanilla kernel plus
    extra coordinate weights.
    """
    bound = 1.0 / np.sqrt(k * k * (cin + extra_in))
    base = rng.uniform(-1.0, 1.0, size=(k, k, cin, cout))
    if extra_in:
        extra = rng.uniform(-1.0, 1.0, size=(k, k, extra_in, cout))
        base = np.concatenate([base, extra], axis=2)
    return base * bound


class Conv2d:
    def __init__(self, kernel: np.ndarray, stride: int = 1, padding: str = "same"):
        self.kernel = Tensor(kernel, requires_grad=True, name="kernel")
        self.bias = Tensor(np.zeros(kernel.shape[-1]), requires_grad=True, name="bias")
        self.stride = stride
        self.padding = padding

    def parameters(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.stride, self.padding, self.bias)


class CoordConvLayer:
    """Convolution over the input plus two fixed coordinate channels (row i, column j)."""

    def __init__(self, height: int, width: int, kernel: np.ndarray, stride: int = 1,
                 padding: str = "same"):
        self.height = height
        self.width = width
        x_grid, y_grid = coord_grid(height, width)
        self.i_channel = Tensor(y_grid, name="i_channel")
        self.j_channel = Tensor(x_grid, name="j_channel")
        self.conv = Conv2d(kernel, stride, padding)

    @property
    def in_channels(self) -> int:
        return self.conv.kernel.shape[2] - 2

    def parameters(self) -> dict[str, Tensor]:
        return self.conv.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return coord_conv_forward(self, x)


def add_coord_channels(layer: CoordConvLayer, x: Tensor) -> Tensor:
    if x.ndim not in (3, 4) or tuple(x.shape[-3:-1]) != (layer.height, layer.width):
        raise ShapeError(f"coordconv: input dims {x.shape} do not match coordinate channels "
                         f"{layer.height}x{layer.width}")
    coords = np.concatenate([layer.i_channel.data, layer.j_channel.data], axis=-1)
    if x.ndim == 4:
        coords = np.broadcast_to(coords, (x.shape[0],) + coords.shape)
    return T.concat([x, Tensor(coords)], axis=-1)


def coord_conv_forward(layer: CoordConvLayer, x: Tensor) -> Tensor:
    return layer.conv(add_coord_channels(layer, x))


# ---------------------------------------------------------------------------
# model specs

@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    in_channels: int
    out_channels: int
    stride: int = 1
    relu: bool = True


@dataclass(frozen=True)
class HeadSpec:
    source: int  # index into the backbone layer list
    kernel: int
    in_channels: int
    out_channels: int


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    height: int
    width: int
    channels: int
    backbone: tuple[ConvSpec, ...]
    heads: tuple[HeadSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.backbone:
            raise ValueError("model spec needs at least one backbone layer")
        for head in self.heads:
            if not 0 <= head.source < len(self.backbone):
                raise ValueError(f"head source {head.source} outside backbone of {len(self.backbone)} layers")

    def with_variant(self, variant: str) -> "ModelSpec":
        return ModelSpec(variant, self.height, self.width, self.channels, self.backbone, self.heads)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["variant"], d["height"], d["width"], d["channels"],
                   tuple(ConvSpec(**c) for c in d["backbone"]),
                   tuple(HeadSpec(**h) for h in d.get("heads", ())))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class Model:
    """A conv stack with an optional leading coordinate embedding and optional heads.

    ``forward`` returns the last backbone activation when there are no heads,
    otherwise the list of head outputs in spec order.
    """

    def __init__(self, spec: ModelSpec, coord_emb: CoordEmbLayer | None,
                 backbone: list, heads: list):
        self.spec = spec
        self.coord_emb = coord_emb
        self.backbone = backbone
        self.heads = heads

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        if self.coord_emb is not None:
            for k, p in self.coord_emb.parameters().items():
                yield f"coordemb/{k}", p
        for i, layer in enumerate(self.backbone):
            for k, p in layer.parameters().items():
                yield f"conv{i}/{k}", p
        for i, layer in enumerate(self.heads):
            for k, p in layer.parameters().items():
                yield f"head{i}/{k}", p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, x: Tensor):
        if self.coord_emb is not None:
            x = self.coord_emb(x)
        taps = []
        for layer, cs in zip(self.backbone, self.spec.backbone):
            x = layer(x)
            if cs.relu:
                x = T.relu(x)
            taps.append(x)
        if not self.heads:
            return x
        return [head(taps[hs.source]) for head, hs in zip(self.heads, self.spec.heads)]

    __call__ = forward


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Instantiate ``spec`` with seeded kernels.

    Each conv layer draws from its own generator keyed by ``(seed, layer)``,
    so vanilla and coordemb models built from the same seed have bit-identical
    downstream kernels.
    """
    coordconv = spec.variant == "coordconv"
    coord_emb = CoordEmbLayer(spec.height, spec.width) if spec.variant == "coordemb" else None

    def make(index: int, h: int, w: int, cin: int, k: int, cout: int, stride: int):
        rng = np.random.default_rng([seed, index])
        if coordconv:
            return CoordConvLayer(h, w, init_kernel(rng, k, cin, cout, extra_in=2), stride)
        return Conv2d(init_kernel(rng, k, cin, cout), stride)

    backbone, dims = [], []
    h, w, cin = spec.height, spec.width, spec.channels
    for i, cs in enumerate(spec.backbone):
        if cs.kernel < 1 or cs.out_channels < 1 or cs.stride < 1:
            raise ValueError(f"layer {i}: invalid conv hyperparameters {cs}")
        if cs.in_channels != cin:
            raise ShapeError(f"layer {i} expects {cs.in_channels} input channels "
                             f"but receives {cin}")
        backbone.append(make(i, h, w, cin, cs.kernel, cs.out_channels, cs.stride))
        h, w = T.conv_output_size(h, cs.kernel, cs.stride, "same"), T.conv_output_size(w, cs.kernel, cs.stride, "same")
        cin = cs.out_channels
        dims.append((h, w, cin))
    heads = []
    for j, hs in enumerate(spec.heads):
        sh, sw, sc = dims[hs.source]
        if hs.in_channels != sc:
            raise ShapeError(f"head {j} expects {hs.in_channels} input channels "
                             f"but layer {hs.source} produces {sc}")
        heads.append(make(1000 + j, sh, sw, sc, hs.kernel, hs.out_channels, 1))
    return Model(spec, coord_emb, backbone, heads)


def feature_dims(spec: ModelSpec) -> list[tuple[int, int, int]]:
    """Spatial dims and channels after each backbone layer."""
    dims = []
    h, w = spec.height, spec.width
    for cs in spec.backbone:
        h = T.conv_output_size(h, cs.kernel, cs.stride, "same")
        w = T.conv_output_size(w, cs.kernel, cs.stride, "same")
        dims.append((h, w, cs.out_channels))
    return dims
