"""RMSprop, the training loop, binary checkpoints and the metrics CSV."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .layers import Model, ModelSpec, build_model
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

# learning rate, batch size and step count as reported for the full-scale run
DEFAULT_LEARNING_RATE = 0.004
DEFAULT_BATCH_SIZE = 24
FULL_SCALE_STEPS = 155_000


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    steps: int = FULL_SCALE_STEPS
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    seed: int = 0
    eval_every: int = 500
    variant: str = "vanilla"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.rmsprop_decay < 1:
            raise ValueError(f"rmsprop_decay must lie in (0, 1), got {self.rmsprop_decay}")
        if self.steps < 0 or self.eval_every < 1:
            raise ValueError("steps must be >= 0 and eval_every >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RMSpropState:
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, model: Model) -> "RMSpropState":
        return cls({name: np.zeros_like(p.data) for name, p in model.named_parameters()})


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                 state: RMSpropState, cfg: TrainConfig) -> None:
    """In place: ``acc = rho*acc + (1-rho)*g**2``; ``p -= lr*g / (sqrt(acc) + eps)``."""
    rho, lr, eps = cfg.rmsprop_decay, cfg.learning_rate, cfg.rmsprop_epsilon
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        acc = state.accumulators.setdefault(name, np.zeros_like(p.data))
        if g.shape != p.shape or acc.shape != p.shape:
            raise ShapeError(f"rmsprop: {name} param {p.shape}, grad {g.shape}, "
                             f"accumulator {acc.shape} disagree")
        acc *= rho
        acc += (1.0 - rho) * g * g
        p.data -= lr * g / (np.sqrt(acc) + eps)


# ---------------------------------------------------------------------------
# training loop

class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class Task(Protocol):
    """What the loop needs from a dataset + objective."""

    @property
    def size(self) -> int: ...

    def loss(self, model: Model, indices: np.ndarray) -> Tensor: ...

    def evaluate(self, model: Model) -> dict[str, float]: ...


class MetricsCSV:
    """Append-only ``step,loss,metric_name,metric_value`` file."""

    HEADER = ("step", "loss", "metric_name", "metric_value")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        with self.path.open("w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.HEADER)

    def __call__(self, step: int, loss: float, metrics: dict[str, float]) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            items = sorted(metrics.items()) or [("", "")]
            for name, value in items:
                w.writerow((step, repr(float(loss)), name, repr(float(value)) if value != "" else ""))


def batch_schedule(n: int, batch_size: int, steps: int, seed: int):
    """Yield index batches from seeded per-epoch permutations, wrapping across epochs."""
    rng = np.random.default_rng([seed, 0x5EED])
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        take = []
        while len(take) < batch_size:
            if pos == n:
                order = rng.permutation(n)
                pos = 0
            k = min(batch_size - len(take), n - pos)
            take.extend(order[pos:pos + k])
            pos += k
        yield np.array(take, dtype=np.int64)


def train(model: Model, task: Task, cfg: TrainConfig, metrics_sink=None,
          state: RMSpropState | None = None, start_step: int = 0):
    """Run ``cfg.steps`` RMSprop steps; return ``(model, state, history)``.

    History rows ``(step, loss, metrics)`` are taken before the update at
    every multiple of ``eval_every`` and once more after the last update.
    With ``steps == 0`` nothing is recorded.
    """
    if task.size < 1:
        raise ValueError("cannot train on an empty dataset")
    state = state or RMSpropState.zeros_like(model)
    params = dict(model.named_parameters())
    history: list[tuple[int, float, dict[str, float]]] = []

    def record(step: int, loss_value: float) -> None:
        metrics = task.evaluate(model)
        history.append((step, loss_value, metrics))
        if metrics_sink is not None:
            metrics_sink(step, loss_value, metrics)
        log.info("step %d loss %.6g %s", step, loss_value, metrics)

    schedule = batch_schedule(task.size, min(cfg.batch_size, task.size),
                              cfg.steps + 1 if cfg.steps else 0, cfg.seed)
    for t, idx in enumerate(schedule):
        step = start_step + t
        model.zero_grad()
        loss = task.loss(model, idx)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        if t == cfg.steps:
            record(step, value)
            break
        if t % cfg.eval_every == 0:
            record(step, value)
        loss.backward()
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        rmsprop_step(params, grads, state, cfg)
    return model, state, history


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CEM1"
CKPT_VERSION = 1
MAX_ELEMENTS = 1 << 31


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    model: Model
    state: RMSpropState
    step: int
    config_hash: str
    extra: dict


def _string_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _tensor_string(arr: np.ndarray) -> str:
    return bytes(arr.astype(np.uint8).tolist()).decode("utf-8")


def encode_tensors(tensors: Sequence[tuple[str, np.ndarray]]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(raw: bytes) -> dict[str, np.ndarray]:
    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}", offset)

    need(0, 12, "header")
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}", 0)
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 2, "name length")
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        need(off, nlen + 1, "name")
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        rank = raw[off]
        off += 1
        need(off, 4 * rank, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        elements = 1
        for d in dims:
            elements *= d
            if elements > MAX_ELEMENTS:
                raise CheckpointError(f"dimension overflow for {name!r}: {dims}", off)
        off += 4 * rank
        need(off, 8 * elements, f"data of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8", count=elements, offset=off).reshape(dims).astype(np.float64)
        off += 8 * elements
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes", off)
    return out


def save_checkpoint(path: str | Path, model: Model, state: RMSpropState, step: int,
                    config_hash: str = "", extra: dict | None = None) -> None:
    """Parameters, ``opt/``-prefixed accumulators and ``meta/`` records, written atomically."""
    tensors = [(name, p.data) for name, p in model.named_parameters()]
    tensors += [(f"opt/{name}", acc) for name, acc in sorted(state.accumulators.items())]
    tensors += [("meta/step", np.array([float(step)])),
                ("meta/config_hash", _string_tensor(config_hash)),
                ("meta/model_spec", _string_tensor(model.spec.to_json())),
                ("meta/extra", _string_tensor(json.dumps(extra or {}, sort_keys=True)))]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expected_config_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}", 0) from exc
    tensors = decode_tensors(raw)
    for key in ("meta/step", "meta/model_spec"):
        if key not in tensors:
            raise CheckpointError(f"missing {key} record", len(raw))
    spec = ModelSpec.from_dict(json.loads(_tensor_string(tensors["meta/model_spec"])))
    model = build_model(spec, seed=0)
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"missing parameter {name!r}", len(raw))
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"parameter {name!r} has shape {tensors[name].shape}, "
                                  f"expected {p.shape}", len(raw))
        p.data = tensors[name].copy()
    state = RMSpropState({k[4:]: v.copy() for k, v in tensors.items() if k.startswith("opt/")})
    config_hash = _tensor_string(tensors.get("meta/config_hash", np.zeros(0)))
    if expected_config_hash is not None and config_hash != expected_config_hash:
        log.warning("checkpoint %s was written with config %s, resuming with %s",
                    path, config_hash or "<none>", expected_config_hash)
    extra = json.loads(_tensor_string(tensors.get("meta/extra", _string_tensor("{}"))))
    return Checkpoint(model, state, int(tensors["meta/step"][0]), config_hash, extra)
