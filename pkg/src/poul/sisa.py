"""Sharded, sliced, incremental training and unlearning.

Slices are numbered from 1. Submodel m_i of a shard is trained from m_{i-1}
(or the public initial model when i = 1) for ``hp.epochs`` over the live data
of slices 1..i. Deleting a point from slice i invalidates m_i..m_s, and the
chain driver resumes from the first invalid submodel.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import ml
from .auth import AuthLayer
from .data import decode_features_label
from .ml import Hyperparams, ModelParams, Prediction


@dataclass(frozen=True)
class ShardPlan:
    n_shards: int
    n_slices: int
    # slices[j][i - 1] lists the kids of slice i in shard j, in training order
    slices: tuple[tuple[tuple[int, ...], ...], ...]

    @property
    def assignment(self) -> dict[int, tuple[int, int]]:
        return {
            kid: (j, i)
            for j, shard in enumerate(self.slices)
            for i, sl in enumerate(shard, start=1)
            for kid in sl
        }

    def shard_kids(self, j: int) -> list[int]:
        return [kid for sl in self.slices[j] for kid in sl]


def _split(items: list[int], parts: int) -> list[list[int]]:
    q, r = divmod(len(items), parts)
    out, start = [], 0
    for k in range(parts):
        size = q + (k < r)
        out.append(items[start:start + size])
        start += size
    return out


def shard(kids: list[int], n: int, seed: int = 0) -> list[list[int]]:
    """Seeded shuffle, then a contiguous split into ``n`` near-equal shards."""
    if n < 1:
        raise ValueError("need at least one shard")
    if n > len(kids):
        raise ValueError(f"cannot split {len(kids)} points into {n} shards")
    order = np.random.Generator(np.random.PCG64([seed, 0x5A])).permutation(len(kids))
    return _split([kids[k] for k in order], n)


def slice_shard(kids: list[int], s: int, seed: int = 0) -> list[list[int]]:
    if s < 1:
        raise ValueError("need at least one slice")
    if s > len(kids):
        raise ValueError(f"cannot split a shard of {len(kids)} points into {s} slices")
    order = np.random.Generator(np.random.PCG64([seed, 0x51])).permutation(len(kids))
    return _split([kids[k] for k in order], s)


def make_plan(kids: list[int], n_shards: int, n_slices: int, seed: int = 0) -> ShardPlan:
    if len(set(kids)) != len(kids):
        raise ValueError("duplicate kids in dataset")
    shards = shard(list(kids), n_shards, seed)
    return ShardPlan(
        n_shards,
        n_slices,
        tuple(tuple(tuple(sl) for sl in slice_shard(sh, n_slices, seed + 1 + j)) for j, sh in enumerate(shards)),
    )


def locate_affected(plan: ShardPlan, kid: int) -> tuple[int, int, list[int]]:
    loc = plan.assignment.get(kid)
    if loc is None:
        raise KeyError(f"kid {kid:#018x} is not in the plan")
    j, i = loc
    return j, i, list(range(i, plan.n_slices + 1))


def remove_kids(plan: ShardPlan, dead: set[int]) -> ShardPlan:
    """The same placement with some points dropped (the retrain-from-scratch input)."""
    return replace(
        plan,
        slices=tuple(tuple(tuple(k for k in sl if k not in dead) for sl in shard) for shard in plan.slices),
    )


def aggregate_predict(models: list[ModelParams], x: np.ndarray) -> Prediction:
    """Mean of the constituent score vectors; argmax with lowest-index tie-break."""
    if not models:
        raise ValueError("no constituent models")
    scores = np.mean([ml.predict(m, x).scores for m in models], axis=0)
    return Prediction(tuple(float(v) for v in scores), int(np.argmax(scores)))


def aggregate_accuracy(models: list[ModelParams], X: np.ndarray, y: np.ndarray) -> float:
    if not models:
        raise ValueError("no constituent models")
    probs = np.mean([ml.predict_proba(m, X) for m in models], axis=0)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(y)))


def step_hyperparams(hp: Hyperparams, shard_index: int, slice_index: int) -> Hyperparams:
    """Per-step batch-order seed derived from (rng_seed, shard, slice)."""
    seq = np.random.SeedSequence([hp.rng_seed, shard_index, slice_index])
    return replace(hp, rng_seed=int(seq.generate_state(1, np.uint64)[0]))


def train_step(prev: ModelParams, data, hp: Hyperparams, shard_index: int, slice_index: int) -> ModelParams:
    model = ml.train_sgd(prev, data, step_hyperparams(hp, shard_index, slice_index))
    return ml.with_slice_index(model, slice_index)


def train_chain_plain(
    X: np.ndarray,
    y: np.ndarray,
    slices: list[list[int]],
    m0: ModelParams,
    hp: Hyperparams,
    shard_index: int = 0,
) -> list[ModelParams]:
    """Reference chain over in-memory rows, with no enclave or stores.

    ``slices`` holds row indices into X. This is the retrain-from-scratch oracle.
    """
    chain, prev, rows = [], m0, []
    for i, sl in enumerate(slices, start=1):
        rows.extend(sl)
        idx = np.asarray(rows, dtype=np.int64)
        prev = train_step(prev, (X[idx], y[idx]), hp, shard_index, i)
        chain.append(prev)
    return chain


class CheckedSource:
    """Batch source that fetches every row through the checked data path."""

    def __init__(self, auth: AuthLayer, kids: list[int]):
        self.auth = auth
        self.kids = kids

    def __len__(self) -> int:
        return len(self.kids)

    def take(self, rows):
        feats, labels = [], []
        for r in rows:
            x, label = decode_features_label(self.auth.fetch_data_checked(self.kids[r]))
            feats.append(x)
            labels.append(label)
        return np.stack(feats).astype(np.float32, copy=False), np.asarray(labels, dtype=np.int64)


@dataclass(frozen=True)
class StepTiming:
    shard: int
    slice_index: int
    samples: int
    restore_s: float
    learn_s: float
    checkpoint_s: float


def resume_chain(
    auth: AuthLayer,
    m0: ModelParams,
    hp: Hyperparams,
    shards: list[int] | None = None,
) -> list[StepTiming]:
    """Train every invalid submodel, each shard from its first invalid slice onward.

    Each step restores its predecessor through the checked path (or starts from
    ``m0``), trains over checked fetches and checkpoints with a fresh seed.
    """
    dims = m0.dims
    steps = []
    for j in range(auth.state.n_shards) if shards is None else shards:
        first = auth.first_invalid_slice(j)
        if first is None:
            continue
        for i in range(first, auth.state.n_slices + 1):
            t0 = time.perf_counter()
            if i == 1:
                prev = m0
            else:
                blob, _ = auth.restore_slice_checked(j, i - 1)
                prev = ml.from_canonical_bytes(blob, dims)
            t1 = time.perf_counter()
            source = CheckedSource(auth, auth.live_kids(j, i))
            model = train_step(prev, source, hp, j, i)
            t2 = time.perf_counter()
            auth.store_submodel(j, i, ml.canonical_bytes(model), auth.slice_owner(j, i).kid)
            t3 = time.perf_counter()
            steps.append(StepTiming(j, i, len(source), t1 - t0, t2 - t1, t3 - t2))
    return steps


def incremental_train(auth: AuthLayer, m0: ModelParams, hp: Hyperparams) -> list[StepTiming]:
    return resume_chain(auth, m0, hp)


def unlearn(auth: AuthLayer, kid: int, m0: ModelParams, hp: Hyperparams) -> tuple[list[int], list[StepTiming]]:
    shard_index = auth.entry(kid).shard
    affected = auth.delete_and_invalidate(kid)
    return affected, resume_chain(auth, m0, hp, [shard_index])


def load_chain(auth: AuthLayer, shard_index: int, dims) -> list[ModelParams]:
    return [
        ml.from_canonical_bytes(auth.restore_slice_checked(shard_index, i)[0], dims)
        for i in range(1, auth.state.n_slices + 1)
    ]
