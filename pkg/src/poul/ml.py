"""Two-layer fully connected network trained with deterministic mini-batch SGD.

All arithmetic is float32. Batch order per epoch is a pure function of the
hyperparameter seed and the order in which samples are supplied, so retraining
on the same surviving data with the same seed reproduces a model bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

DEFAULT_DIMS = (600, 128, 2)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ModelParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    slice_index: int = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return canonical_bytes(self) == canonical_bytes(other)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 1000
    epochs: int = 22
    learning_rate: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")


@dataclass(frozen=True)
class Prediction:
    scores: tuple[float, ...]
    label: int

    def to_bytes(self) -> bytes:
        return struct.pack(f"<I{len(self.scores)}d", self.label, *self.scores)


class BatchSource(Protocol):
    """Anything that can hand out (features, labels) for a list of row positions."""

    def __len__(self) -> int: ...

    def take(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class ArraySource:
    def __init__(self, X: np.ndarray, y: np.ndarray):
        if len(X) != len(y):
            raise ValueError("features and labels differ in length")
        self.X = np.asarray(X, dtype=np.float32)
        self.y = np.asarray(y, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.X)

    def take(self, rows):
        return self.X[rows], self.y[rows]


def init_model(dims: tuple[int, int, int] = DEFAULT_DIMS, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases, PCG64 seeded."""
    d_in, d_hidden, d_out = dims
    if min(dims) <= 0:
        raise ValueError(f"all dimensions must be positive, got {dims}")
    rng = np.random.Generator(np.random.PCG64(seed))
    a = 1.0 / np.sqrt(d_in)
    b = 1.0 / np.sqrt(d_hidden)
    return ModelParams(
        w1=rng.uniform(-a, a, (d_in, d_hidden)).astype(np.float32),
        b1=rng.uniform(-a, a, d_hidden).astype(np.float32),
        w2=rng.uniform(-b, b, (d_hidden, d_out)).astype(np.float32),
        b2=rng.uniform(-b, b, d_out).astype(np.float32),
        slice_index=0,
    )


def zeros_like(model: ModelParams) -> ModelParams:
    return ModelParams(*(np.zeros_like(a) for a in model.arrays()), slice_index=model.slice_index)


def _forward(model: ModelParams, X: np.ndarray):
    z = X @ model.w1 + model.b1
    a = np.maximum(z, np.float32(0))
    logits = a @ model.w2 + model.b2
    return z, a, logits


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(model: ModelParams, X: np.ndarray, y: np.ndarray) -> tuple[float, ModelParams]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty batch")
    if X.ndim != 2 or X.shape[1] != model.w1.shape[0]:
        raise ValueError(f"batch has shape {X.shape}, model expects {model.w1.shape[0]} features")
    n = len(X)
    z, a, logits = _forward(model, X)
    probs = _softmax(logits)
    picked = probs[np.arange(n), y]
    loss = float(-np.mean(np.log(np.maximum(picked, np.float32(1e-30)))))

    g = probs.copy()
    g[np.arange(n), y] -= np.float32(1)
    g /= np.float32(n)
    gw2 = a.T @ g
    gb2 = g.sum(axis=0)
    dz = (g @ model.w2.T) * (z > 0)
    gw1 = X.T @ dz
    gb1 = dz.sum(axis=0)
    grads = ModelParams(gw1, gb1, gw2, gb2, slice_index=model.slice_index)
    return loss, grads


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64([seed, epoch])).permutation(n)


def train_sgd(model: ModelParams, data, hp: Hyperparams) -> ModelParams:
    """Plain mini-batch SGD. ``data`` is an (X, y) pair or a BatchSource.

    The returned model keeps ``model.slice_index``; the SISA layer sets it.
    """
    source = data if hasattr(data, "take") else ArraySource(*data)
    n = len(source)
    if hp.epochs == 0 or n == 0:
        return model
    lr = np.float32(hp.learning_rate)
    w1, b1, w2, b2 = (a.copy() for a in model.arrays())
    current = ModelParams(w1, b1, w2, b2, model.slice_index)
    for epoch in range(hp.epochs):
        order = epoch_order(n, hp.rng_seed, epoch)
        for start in range(0, n, hp.batch_size):
            X, y = source.take(order[start:start + hp.batch_size])
            loss, g = loss_and_grads(current, X, y)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch offset {start}")
            w1 -= lr * g.w1
            b1 -= lr * g.b1
            w2 -= lr * g.w2
            b2 -= lr * g.b2
    if not current.is_finite():
        raise TrainingError("parameters became non-finite")
    return current


def predict(model: ModelParams, x: np.ndarray) -> Prediction:
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (model.w1.shape[0],):
        raise ValueError(f"input has shape {x.shape}, model expects ({model.w1.shape[0]},)")
    probs = _softmax(_forward(model, x[None, :])[2])[0]
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return Prediction(tuple(float(p) for p in probs), int(np.argmax(probs)))


def predict_proba(model: ModelParams, X: np.ndarray) -> np.ndarray:
    return _softmax(_forward(model, np.asarray(X, dtype=np.float32))[2])


def accuracy(model: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict_proba(model, X).argmax(axis=1) == np.asarray(y)))


def canonical_bytes(model: ModelParams) -> bytes:
    """w1, b1, w2, b2 as little-endian float32 (row-major), then slice_index as u64.

    Dimensions are not written; they are fixed per deployment.
    """
    parts = [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in model.arrays()]
    parts.append(struct.pack("<Q", model.slice_index))
    return b"".join(parts)


def from_canonical_bytes(blob: bytes, dims: tuple[int, int, int] = DEFAULT_DIMS) -> ModelParams:
    d_in, d_hidden, d_out = dims
    shapes = [(d_in, d_hidden), (d_hidden,), (d_hidden, d_out), (d_out,)]
    expected = sum(int(np.prod(s)) for s in shapes) * 4 + 8
    if len(blob) != expected:
        raise ValueError(f"model blob is {len(blob)} bytes, expected {expected} for dims {dims}")
    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape))
        offset += count * 4
    (slice_index,) = struct.unpack_from("<Q", blob, offset)
    return ModelParams(*arrays, slice_index=slice_index)


def with_slice_index(model: ModelParams, slice_index: int) -> ModelParams:
    return replace(model, slice_index=slice_index)
