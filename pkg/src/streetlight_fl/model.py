"""One-hidden-layer binary classifier with manual backprop, SGD and a
binary checkpoint format.

Layer order is fixed: ``hidden`` (H x D), ``output`` (1 x H) and, when the
residual connection is enabled, ``residual`` (H x D), a learned projection of
the input added to the hidden activations after the ReLU.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_EPS = 1e-12
CHECKPOINT_MAGIC = b"FLSL"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    residual: bool = False

    @property
    def layer_dims(self) -> list[int]:
        w_hidden, _ = self.layers[0]
        w_out, _ = self.layers[1]
        return [w_hidden.shape[1], w_hidden.shape[0], w_out.shape[0]]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w, _ in self.layers]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for w, b in self.layers for a in (w, b)])

    def with_layers(self, layers) -> "ModelParams":
        return ModelParams(tuple((w, b) for w, b in layers), self.residual)

    def same_shape(self, other: "ModelParams") -> bool:
        return self.residual == other.residual and self.layer_shapes == other.layer_shapes

    def equal(self, other: "ModelParams") -> bool:
        """Bit-for-bit equality."""
        return self.same_shape(other) and all(
            np.array_equal(a, c) and np.array_equal(b, d)
            for (a, b), (c, d) in zip(self.layers, other.layers))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    local_epochs: int = 1
    init_seed: int = 0
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.local_epochs < 0:
            raise ValueError(f"invalid training config {self}")


def _check_dims(dims: Sequence[int]) -> None:
    if len(dims) != 3 or any(int(d) < 1 for d in dims) or dims[-1] != 1:
        raise ValueError(f"dims must be [input, hidden, 1] with positive sizes, got {list(dims)}")


def init_params(dims: Sequence[int] = (3072, 64, 1), seed: int = 0, residual: bool = False) -> ModelParams:
    """Uniform(+-sqrt(6 / fan_in)) weights, zero biases."""
    _check_dims(dims)
    d_in, hidden, d_out = (int(d) for d in dims)
    rng = np.random.default_rng(seed)

    def uniform(rows, cols):
        bound = np.sqrt(6.0 / cols)
        return rng.uniform(-bound, bound, size=(rows, cols))

    layers = [(uniform(hidden, d_in), np.zeros(hidden)), (uniform(d_out, hidden), np.zeros(d_out))]
    if residual:
        layers.append((uniform(hidden, d_in), np.zeros(hidden)))
    return ModelParams(tuple(layers), residual)


def zeros_like(params: ModelParams) -> ModelParams:
    return params.with_layers((np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_matrix(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ValueError(f"feature length {x.shape[-1]} != model input {params.layer_dims[0]}")
    return x


def _forward_cache(params: ModelParams, x: np.ndarray):
    (w1, b1), (w2, b2) = params.layers[:2]
    z1 = x @ w1.T + b1
    h = np.maximum(z1, 0.0)
    if params.residual:
        wr, br = params.layers[2]
        h = h + (x @ wr.T + br)
    logit = (h @ w2.T + b2)[:, 0]
    return z1, h, logit


def forward(params: ModelParams, features):
    """P(ON) for one feature vector (returns float) or a batch (returns array)."""
    x = np.asarray(features, dtype=np.float64)
    p = sigmoid(_forward_cache(params, _as_matrix(params, x))[2])
    return float(p[0]) if x.ndim == 1 else p


def predict(params: ModelParams, features) -> np.ndarray:
    """Boolean ON predictions; p exactly 0.5 counts as OFF."""
    return np.atleast_1d(forward(params, features)) > 0.5


def bce_loss(p, label):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(label, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(loss) if loss.ndim == 0 else loss


def backward_arrays(params: ModelParams, x, y) -> tuple[ModelParams, float]:
    """Gradient of mean BCE over the batch and the mean loss itself."""
    x = _as_matrix(params, x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    if n == 0 or y.shape[0] != n:
        raise ValueError("batch must be non-empty with one label per row")
    z1, h, logit = _forward_cache(params, x)
    p = sigmoid(logit)
    loss = float(np.mean(bce_loss(p, y)))
    w2 = params.layers[1][0]
    dlogit = ((p - y) / n)[:, None]            # (n, 1)
    g_w2 = dlogit.T @ h
    g_b2 = dlogit.sum(axis=0)
    dh = dlogit @ w2                           # (n, H)
    dz1 = dh * (z1 > 0)
    grads = [(dz1.T @ x, dz1.sum(axis=0)), (g_w2, g_b2)]
    if params.residual:
        grads.append((dh.T @ x, dh.sum(axis=0)))
    return params.with_layers(grads), loss


def stack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    if not batch:
        raise ValueError("empty batch")
    if any(s.features is None for s in batch):
        raise ValueError("batch samples must carry features")
    return np.stack([s.features for s in batch]), np.array([int(s.label) for s in batch], dtype=np.float64)


def backward(params: ModelParams, batch) -> tuple[ModelParams, float]:
    x, y = stack_batch(batch)
    return backward_arrays(params, x, y)


def sgd_step(params: ModelParams, grad: ModelParams, lr: float) -> ModelParams:
    if not params.same_shape(grad):
        raise ValueError("gradient shape does not match parameters")
    return params.with_layers(
        (w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(params.layers, grad.layers))


# -- checkpoints -------------------------------------------------------------

def _header(shapes) -> bytes:
    out = CHECKPOINT_MAGIC + struct.pack("<HH", CHECKPOINT_VERSION, len(shapes))
    return out + b"".join(struct.pack("<II", r, c) for r, c in shapes)


def to_bytes(params: ModelParams, layer_idx: Sequence[int] | None = None) -> bytes:
    """Serialise all layers, or only ``layer_idx``, in checkpoint format."""
    idx = range(len(params.layers)) if layer_idx is None else layer_idx
    layers = [params.layers[i] for i in idx]
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for w, b in layers for a in (w, b))
    return _header([w.shape for w, _ in layers]) + body


def checkpoint_size(shapes: Sequence[tuple[int, int]]) -> int:
    """Byte length of a checkpoint holding layers of the given (rows, cols) shapes."""
    return 8 + 8 * len(shapes) + 8 * sum(r * c + r for r, c in shapes)


def model_bytes(params: ModelParams) -> int:
    return checkpoint_size(params.layer_shapes)


def from_bytes(data: bytes) -> ModelParams:
    if len(data) < 8:
        raise CheckpointError("checkpoint truncated inside header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if count not in (2, 3):
        raise CheckpointError(f"corrupt header: {count} layers")
    if len(data) < 8 + 8 * count:
        raise CheckpointError("checkpoint truncated inside header")
    shapes = [struct.unpack_from("<II", data, 8 + 8 * i) for i in range(count)]
    expected = checkpoint_size(shapes)
    if len(data) < expected:
        raise CheckpointError(f"checkpoint truncated: {len(data)} bytes, need {expected}")
    if len(data) > expected:
        raise CheckpointError(f"corrupt checkpoint: {len(data) - expected} trailing bytes")
    (h, d), (o, h2) = shapes[:2]
    if h2 != h or o != 1 or (count == 3 and tuple(shapes[2]) != (h, d)):
        raise CheckpointError(f"corrupt header: inconsistent layer shapes {shapes}")
    pos = 8 + 8 * count
    layers = []
    for r, c in shapes:
        w = np.frombuffer(data, "<f8", r * c, pos).reshape(r, c).astype(np.float64)
        pos += 8 * r * c
        b = np.frombuffer(data, "<f8", r, pos).astype(np.float64)
        pos += 8 * r
        layers.append((w, b))
    return ModelParams(tuple(layers), residual=count == 3)


def save_params(params: ModelParams, path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load_params(path) -> ModelParams:
    return from_bytes(Path(path).read_bytes())
