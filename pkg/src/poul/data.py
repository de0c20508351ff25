"""Data points, content-derived ids, and the synthetic Purchase-shaped dataset."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import xxhash

PURCHASE_TRAIN = 280_367
PURCHASE_TEST = 31_152
PURCHASE_DIM = 600

_FILE_MAGIC = b"PDS1"
_FILE_HEADER = struct.Struct("<4sQII")


def kid_of(payload: bytes, owner: bytes | None = None) -> int:
    """64-bit xxHash of the point (owner-qualified when an owner is given)."""
    return xxhash.xxh64_intdigest((owner or b"") + payload)


@dataclass(frozen=True, eq=False)
class DataPoint:
    features: np.ndarray
    label: int
    owner: bytes | None = None

    def payload(self) -> bytes:
        return struct.pack("<I", self.label) + np.ascontiguousarray(self.features, dtype="<f4").tobytes()

    def to_bytes(self) -> bytes:
        owner = self.owner or b""
        return struct.pack("<H", len(owner)) + owner + self.payload()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DataPoint":
        (n_owner,) = struct.unpack_from("<H", blob)
        owner = blob[2:2 + n_owner] or None
        (label,) = struct.unpack_from("<I", blob, 2 + n_owner)
        features = np.frombuffer(blob, dtype="<f4", offset=6 + n_owner).astype(np.float32)
        return cls(features, label, owner)

    @property
    def kid(self) -> int:
        return kid_of(self.payload(), self.owner)


def decode_features_label(blob: bytes) -> tuple[np.ndarray, int]:
    (n_owner,) = struct.unpack_from("<H", blob)
    (label,) = struct.unpack_from("<I", blob, 2 + n_owner)
    return np.frombuffer(blob, dtype="<f4", offset=6 + n_owner), label


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def dim(self) -> int:
        return self.X_train.shape[1]

    @property
    def classes(self) -> int:
        return int(max(self.y_train.max(initial=0), self.y_test.max(initial=0))) + 1

    def points(self, owner: bytes | None = None) -> list[DataPoint]:
        X = self.X_train.astype(np.float32)
        return [DataPoint(X[i], int(self.y_train[i]), owner) for i in range(len(X))]


def gen_dataset(
    n_train: int,
    n_test: int,
    dim: int = PURCHASE_DIM,
    classes: int = 2,
    seed: int = 0,
    density: float = 0.1,
    informative: int = 60,
    margin: float = 1.0,
) -> Dataset:
    """Sparse binary features with a planted linear rule.

    Each class scores the centred features against a sparse +-1 weight vector
    over ``informative`` coordinates; the label is the top class and rows whose
    top-two score gap is below ``margin`` are rejected, so the classes are
    separable with a margin. Duplicate rows are dropped so every point has a
    distinct id.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rule_rng = np.random.Generator(np.random.PCG64([seed, 0]))
    W = np.zeros((dim, classes))
    for c in range(classes):
        idx = rule_rng.choice(dim, min(informative, dim), replace=False)
        W[idx, c] = rule_rng.choice([-1.0, 1.0], len(idx))
    rng = np.random.Generator(np.random.PCG64([seed, 1]))
    total = n_train + n_test
    rows: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    seen: set[bytes] = set()
    have = 0
    while have < total:
        batch = max(1024, 2 * (total - have))
        Xb = (rng.random((batch, dim)) < density).astype(np.uint8)
        scores = (Xb - density) @ W
        top2 = np.sort(scores, axis=1)[:, -2:]
        keep = np.flatnonzero(top2[:, 1] - top2[:, 0] >= margin)
        packed = np.packbits(Xb[keep], axis=1)
        fresh = []
        for j, row in zip(keep, packed):
            key = row.tobytes()
            if key not in seen:
                seen.add(key)
                fresh.append(j)
        fresh = fresh[: total - have]
        rows.append(Xb[fresh])
        labels.append(scores[fresh].argmax(axis=1).astype(np.int64))
        have += len(fresh)
    X = np.concatenate(rows)
    y = np.concatenate(labels)
    return Dataset(X[:n_train], y[:n_train], X[n_train:], y[n_train:])


def write_split(path: str | Path, X: np.ndarray, y: np.ndarray, classes: int) -> None:
    """Header (magic, count, dim, classes) then records: label u32, dim x float32, little-endian."""
    n, dim = X.shape
    record = np.dtype([("label", "<u4"), ("x", "<f4", (dim,))])
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(_FILE_MAGIC, n, dim, classes))
        for start in range(0, n, 16384):
            chunk = np.empty(min(16384, n - start), dtype=record)
            chunk["label"] = y[start:start + len(chunk)]
            chunk["x"] = X[start:start + len(chunk)]
            fh.write(chunk.tobytes())


def read_split(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    blob = Path(path).read_bytes()
    magic, n, dim, classes = _FILE_HEADER.unpack_from(blob)
    if magic != _FILE_MAGIC:
        raise ValueError(f"{path} is not a dataset file")
    record = np.dtype([("label", "<u4"), ("x", "<f4", (dim,))])
    expected = _FILE_HEADER.size + n * record.itemsize
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    recs = np.frombuffer(blob, dtype=record, offset=_FILE_HEADER.size)
    return recs["x"].astype(np.float32), recs["label"].astype(np.int64), classes


def write_dataset(directory: str | Path, ds: Dataset) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    classes = ds.classes
    train, test = directory / "train.bin", directory / "test.bin"
    write_split(train, ds.X_train, ds.y_train, classes)
    write_split(test, ds.X_test, ds.y_test, classes)
    return train, test


def read_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    X_train, y_train, _ = read_split(directory / "train.bin")
    X_test, y_test, _ = read_split(directory / "test.bin")
    return Dataset(X_train, y_train, X_test, y_test)
