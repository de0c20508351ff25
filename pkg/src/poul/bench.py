"""Benchmarks, sweeps and the integrity-attack simulator.

Every experiment returns a :class:`BenchResult`; ``write_result`` stores it as
CSV and JSON. Timing rows are medians over ``reps`` repetitions with the
interquartile range as dispersion.
"""

from __future__ import annotations

import contextlib
import csv
import gc
import json
import os
import random
import statistics
import struct
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ml, sisa
from .auth import KEY_ENTRY_SIZE, AuthLayer, AuthState, IntegrityError, RecordStore
from .cuckoo import CuckooFilter, FilterConfig, fingerprint_many
from .data import DataPoint, Dataset, gen_dataset
from .enclave import Enclave, EnclaveContext
from .mht import MerkleTree, verify_path
from .ml import Hyperparams
from .protocol import PoulConfig, PoulServer, PredictProof, ProtocolError, Session


@dataclass
class Row:
    name: str
    value: float
    unit: str
    reps: int = 1
    dispersion: float = 0.0
    params: dict = field(default_factory=dict)


@dataclass
class BenchResult:
    experiment: str
    params: dict
    rows: list[Row] = field(default_factory=list)

    def add(self, name: str, value: float, unit: str, reps: int = 1, dispersion: float = 0.0, **params) -> Row:
        row = Row(name, float(value), unit, reps, float(dispersion), params)
        self.rows.append(row)
        return row

    def add_timing(self, name: str, samples: list[float], unit: str, **params) -> Row:
        return self.add(name, statistics.median(samples), unit, len(samples), iqr(samples), **params)

    def get(self, name: str, **params) -> Row:
        for r in self.rows:
            if r.name == name and all(r.params.get(k) == v for k, v in params.items()):
                return r
        raise KeyError(name)

    def table(self) -> str:
        lines = [f"== {self.experiment} {json.dumps(self.params, sort_keys=True)}"]
        for r in self.rows:
            extra = " ".join(f"{k}={v}" for k, v in r.params.items())
            disp = f" (iqr {r.dispersion:.4g}, n={r.reps})" if r.reps > 1 else ""
            lines.append(f"  {r.name:<34} {r.value:>14.6g} {r.unit:<6}{disp} {extra}".rstrip())
        return "\n".join(lines)


@contextlib.contextmanager
def quiet_gc():
    """Collect once, then keep the cyclic collector out of timed regions (as timeit does)."""
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def iqr(samples: list[float]) -> float:
    if len(samples) < 2:
        return 0.0
    q = statistics.quantiles(samples, n=4)
    return q[2] - q[0]


def write_result(result: BenchResult, results_dir: str | Path) -> tuple[Path, Path]:
    out = Path(results_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{result.experiment}.csv"
    json_path = out / f"{result.experiment}.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "name", "value", "unit", "reps", "dispersion", "params"])
        for r in result.rows:
            w.writerow([result.experiment, r.name, r.value, r.unit, r.reps, r.dispersion, json.dumps(r.params, sort_keys=True)])
    with open(json_path, "w") as fh:
        json.dump({"experiment": result.experiment, "params": result.params, "rows": [asdict(r) for r in result.rows]}, fh, indent=2)
    return csv_path, json_path


# -- filter and Merkle tree ---------------------------------------------------------


def random_items(n: int, bits: int, seed: int, prf_key: bytes | None = None) -> tuple[list[int], list[int]]:
    """(fingerprints, kid hashes) for n random points, fingerprints via the keyed PRF."""
    rng = random.Random(seed)
    kids = [rng.getrandbits(64) for _ in range(n)]
    datas = [rng.getrandbits(128).to_bytes(16, "little") for _ in range(n)]
    key = prf_key or rng.getrandbits(128).to_bytes(16, "little")
    fps = fingerprint_many(kids, datas, bytes(32), key, bits)
    hs = [rng.getrandbits(64) for _ in range(n)]
    return fps, hs


def measure_fpr(config: FilterConfig, n_items: int, n_negatives: int, seed: int = 0) -> tuple[float, CuckooFilter]:
    flt = CuckooFilter(config)
    fps, hs = random_items(n_items, config.fingerprint_bits, seed)
    for fp, h in zip(fps, hs):
        flt.insert(fp, h)
    # negatives are fresh (kid, data) pairs, so their PRF outputs are independent of the members
    qfps, qhs = random_items(n_negatives, config.fingerprint_bits, seed + 1_000_003)
    query = flt.query
    hits = sum(1 for fp, h in zip(qfps, qhs) if query(fp, h))
    return hits / n_negatives, flt


def bench_filter(
    n_items: int = 56_073,
    config: FilterConfig | None = None,
    reps: int = 5,
    n_negatives: int = 100_000,
    seed: int = 0,
) -> BenchResult:
    config = config or FilterConfig()
    res = BenchResult("bench-filter", {"n_items": n_items, **_filter_params(config), "reps": reps})
    fps, hs = random_items(n_items, config.fingerprint_bits, seed)
    pairs = list(zip(fps, hs))
    ins, qry, dele = [], [], []
    with quiet_gc():
        for _ in range(reps):
            flt = CuckooFilter(config)
            insert, query, delete = flt.insert, flt.query, flt.delete
            t0 = time.perf_counter()
            for fp, h in pairs:
                insert(fp, h)
            t1 = time.perf_counter()
            for fp, h in pairs:
                query(fp, h)
            t2 = time.perf_counter()
            for fp, h in pairs:
                delete(fp, h)
            t3 = time.perf_counter()
            ins.append((t1 - t0) / n_items * 1e6)
            qry.append((t2 - t1) / n_items * 1e6)
            dele.append((t3 - t2) / n_items * 1e6)
    res.add_timing("insert", ins, "us")
    res.add_timing("query", qry, "us")
    res.add_timing("delete", dele, "us")
    if n_negatives:
        fpr, flt = measure_fpr(config, n_items, n_negatives, seed)
        res.add("fpr", fpr, "ratio", negatives=n_negatives)
        res.add("load_factor", flt.load_factor, "ratio")
    return res


def _filter_params(config: FilterConfig) -> dict:
    return {
        "buckets": config.bucket_count,
        "entries_per_bucket": config.entries_per_bucket,
        "fp_bits": config.fingerprint_bits,
    }


def bench_mht(n_items: int = 56_073, reps: int = 5, ops: int = 10_000, seed: int = 0) -> BenchResult:
    """MHT update, membership query with path verification, and delete over ``ops`` random leaves."""
    res = BenchResult("bench-mht", {"n_items": n_items, "ops": ops, "reps": reps})
    rng = random.Random(seed)
    leaves = [rng.getrandbits(256).to_bytes(32, "little") for _ in range(n_items)]
    ups, qs, dels, hashes = [], [], [], []
    with quiet_gc():
        for _ in range(reps):
            tree = MerkleTree(leaves)
            idx = [rng.randrange(n_items) for _ in range(ops)]
            vals = [rng.getrandbits(256).to_bytes(32, "little") for _ in range(ops)]
            before = tree.internal_hashes
            t0 = time.perf_counter()
            for i, v in zip(idx, vals):
                tree.update_leaf(i, v)
            t1 = time.perf_counter()
            root = tree.root
            for i in idx:
                verify_path(root, tree.leaf_node(i), i, tree.prove_membership(i))
            t2 = time.perf_counter()
            for i in idx:
                tree.delete_leaf(i)
            t3 = time.perf_counter()
            hashes.append((tree.internal_hashes - before) / (2 * ops))
            ups.append((t1 - t0) / ops * 1e6)
            qs.append((t2 - t1) / ops * 1e6)
            dels.append((t3 - t2) / ops * 1e6)
    res.add_timing("update", ups, "us")
    res.add_timing("query_with_path", qs, "us")
    res.add_timing("delete", dels, "us")
    res.add("hashes_per_update", hashes[0], "count")
    res.add("depth", MerkleTree([b""] * n_items).depth, "count")
    return res


def compare_filter_mht(filter_res: BenchResult, mht_res: BenchResult) -> BenchResult:
    res = BenchResult("filter-vs-mht", {**filter_res.params, "mht_ops": mht_res.params["ops"]})
    for f_name, m_name in (("insert", "update"), ("query", "query_with_path"), ("delete", "delete")):
        ratio = mht_res.get(m_name).value / filter_res.get(f_name).value
        res.add(f"speedup_{f_name}", ratio, "x", filter_us=filter_res.get(f_name).value, mht_us=mht_res.get(m_name).value)
    return res


# -- storage --------------------------------------------------------------------------


def bench_storage(
    n_entries: int = 56_073,
    n_slices: int = 6,
    dims: tuple[int, int, int] = ml.DEFAULT_DIMS,
    config: FilterConfig | None = None,
    store_dir: str | Path | None = None,
    seed: int = 0,
) -> BenchResult:
    """Sizes of key_list, data_store, model_link and the filter for one shard."""
    config = config or FilterConfig()
    res = BenchResult("bench-storage", {"n_entries": n_entries, "n_slices": n_slices, "dims": list(dims), **_filter_params(config)})
    enclave = Enclave()
    enclave.install([])
    state = AuthState.create(config, 1, n_slices)
    tmp = None
    if store_dir is None:
        tmp = tempfile.TemporaryDirectory()
        store_dir = tmp.name
    store_dir = Path(store_dir)
    ds = RecordStore(store_dir / "storage_data.bin")
    ms = RecordStore(store_dir / "storage_model.bin")
    try:
        auth = AuthLayer(EnclaveContext(enclave), state, ds, ms)
        rng = np.random.Generator(np.random.PCG64(seed))
        X = (rng.random((n_entries, dims[0])) < 0.1).astype(np.float32)
        bounds = np.linspace(0, n_entries, n_slices + 1).astype(int)
        for k in range(n_entries):
            point = DataPoint(X[k], int(k & 1))
            slice_index = int(np.searchsorted(bounds, k, side="right"))
            auth.append_data(point.kid, point, 0, slice_index)
        models = [ml.init_model(dims, seed + i) for i in range(n_slices)]
        for i, m in enumerate(models, start=1):
            blob = ml.canonical_bytes(ml.with_slice_index(m, i))
            auth.store_submodel(0, i, blob, auth.slice_owner(0, i).kid)
        key_list = state.key_list_bytes()
        model_payload = n_slices * (ml.init_model(dims, 0).n_params * 4)
        res.add("key_list_bytes", len(key_list), "B")
        res.add("key_list_bytes_per_entry", len(key_list) / n_entries, "B")
        res.add("data_store_bytes", ds.size_bytes, "B")
        res.add("data_store_feature_payload_bytes", n_entries * dims[0] * 4, "B")
        res.add("model_link_bytes", ms.size_bytes, "B")
        res.add("model_link_parameter_bytes", model_payload, "B")
        res.add("filter_table_bytes", len(state.filter.table_bytes()), "B")
        res.add("filter_table_bytes_formula", config.table_bytes, "B")
        res.add("filter_serialized_bytes", len(state.filter.serialize()), "B")
        res.add("key_entry_size", KEY_ENTRY_SIZE, "B")
    finally:
        ds.close()
        ms.close()
        if tmp is not None:
            tmp.cleanup()
    return res


# -- unlearning cost ----------------------------------------------------------------------


def bench_unlearn(
    dataset: Dataset,
    n_slices: int = 6,
    hp: Hyperparams | None = None,
    reps: int = 5,
    config: FilterConfig | None = None,
    seed: int = 0,
) -> BenchResult:
    """Retrain cost of deleting one point from each slice position of shard 0."""
    hp = hp or Hyperparams(batch_size=min(1000, len(dataset.y_train)), epochs=22)
    cfg = PoulConfig(
        n_shards=1,
        n_slices=n_slices,
        dims=(dataset.dim, 128, dataset.classes),
        hp=hp,
        filter=config or FilterConfig(),
    )
    res = BenchResult(
        "bench-unlearn",
        {"n_train": len(dataset.y_train), "n_slices": n_slices, "epochs": hp.epochs, "batch": hp.batch_size, "reps": reps},
    )
    session = Session(cfg)
    t = dataset.X_test[0]
    t0 = time.perf_counter()
    setup = session.setup_phase(dataset.points(), t)
    res.add("setup_seconds", time.perf_counter() - t0, "s")
    if not setup.ok:
        raise ProtocolError("setup phase did not verify")
    rng = random.Random(seed)
    per_pos: dict[int, dict[str, list[float]]] = {
        i: {"learn": [], "overhead": [], "count": []} for i in range(1, n_slices + 1)
    }
    auth = session.server.auth_view()
    with quiet_gc():
        for _ in range(reps):
            for i in range(1, n_slices + 1):
                live = [e.kid for e in auth.state.slices[0][i - 1] if e.live]
                kid = rng.choice(live)
                phase = session.deletion_phase([kid], t)
                if not phase.ok:
                    raise ProtocolError("deletion phase did not verify")
                per_pos[i]["learn"].append(sum(s.learn_s for s in phase.steps))
                per_pos[i]["overhead"].append(sum(s.restore_s + s.checkpoint_s for s in phase.steps))
                per_pos[i]["count"].append(len(phase.steps))
    for i, d in per_pos.items():
        res.add_timing("retrain_seconds", d["learn"], "s", position=i)
        # the fastest repetition is the least disturbed by other load on the machine
        res.add("retrain_seconds_min", min(d["learn"]), "s", reps, position=i)
        res.add_timing("checkpoint_restore_seconds", d["overhead"], "s", position=i)
        res.add("retrained_submodels", statistics.median(d["count"]), "count", reps, position=i)
        res.add(
            "overhead_fraction",
            sum(d["overhead"]) / sum(d["learn"]),
            "ratio",
            reps,
            position=i,
        )
        res.add("max_retrained_submodels", max(d["count"]), "count", reps, position=i)
        res.add("min_retrained_submodels", min(d["count"]), "count", reps, position=i)
    return res


# -- accuracy sweeps -------------------------------------------------------------------------


def epochs_for_fixed_budget(total_epochs: float, n_slices: int) -> int:
    """Per-increment epochs so that cumulative-data training sees about ``total_epochs`` passes.

    Increment i trains over i/s of the shard, so s increments at e epochs make
    e*(s+1)/2 passes over the shard.
    """
    return max(1, round(2 * total_epochs / (n_slices + 1)))


def sweep_slices(
    dataset: Dataset,
    slice_counts=(1, 3, 6, 12),
    total_epochs: float = 22,
    n_shards: int = 1,
    batch_size: int = 1000,
    learning_rate: float = 0.1,
    seed: int = 0,
    workers: int = 1,
) -> BenchResult:
    """Aggregated accuracy per slice count; ``workers`` > 1 trains shards in parallel threads."""
    res = BenchResult(
        "sweep-slices",
        {"n_train": len(dataset.y_train), "n_shards": n_shards, "total_epochs": total_epochs, "batch": batch_size, "lr": learning_rate},
    )
    X, y = dataset.X_train.astype(np.float32), dataset.y_train
    dims = (dataset.dim, 128, dataset.classes)
    m0 = ml.init_model(dims, seed)
    for s in slice_counts:
        epochs = epochs_for_fixed_budget(total_epochs, s)
        hp = Hyperparams(batch_size=batch_size, epochs=epochs, learning_rate=learning_rate, rng_seed=seed)
        plan = sisa.make_plan(list(range(len(y))), n_shards, s, seed)

        def final(j, plan=plan, hp=hp):
            return sisa.train_chain_plain(X, y, [list(sl) for sl in plan.slices[j]], m0, hp, j)[-1]

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            finals = list(pool.map(final, range(n_shards)))
        acc = sisa.aggregate_accuracy(finals, dataset.X_test.astype(np.float32), dataset.y_test)
        res.add("accuracy", acc, "ratio", slices=s, epochs_per_increment=epochs, passes=epochs * (s + 1) / 2)
    return res


def sweep_hparams(
    dataset: Dataset,
    epoch_list=(5, 10, 22),
    batch_sizes=(1000,),
    learning_rate: float = 0.1,
    seed: int = 0,
) -> BenchResult:
    res = BenchResult("sweep-hparams", {"n_train": len(dataset.y_train), "lr": learning_rate, "seed": seed})
    X, y = dataset.X_train.astype(np.float32), dataset.y_train
    dims = (dataset.dim, 128, dataset.classes)
    for batch in batch_sizes:
        for epochs in epoch_list:
            hp = Hyperparams(batch_size=min(batch, len(y)), epochs=epochs, learning_rate=learning_rate, rng_seed=seed)
            model = ml.train_sgd(ml.init_model(dims, seed), (X, y), hp)
            acc = ml.accuracy(model, dataset.X_test.astype(np.float32), dataset.y_test)
            res.add("accuracy", acc, "ratio", epochs=epochs, batch=batch)
    return res


# -- attack simulation ------------------------------------------------------------------------

ATTACKS = (
    "forge_model",
    "fork_instance",
    "replace_data",
    "relocate_submodel",
    "rollback_submodel",
    "replay_proof",
)


def _tiny_session(rng: random.Random, sid: bytes | None = None, enclave: Enclave | None = None):
    dim = 16
    ds = gen_dataset(48, 8, dim=dim, informative=6, seed=rng.randrange(1 << 30))
    cfg = PoulConfig(
        n_shards=rng.choice([1, 2]),
        n_slices=3,
        dims=(dim, 8, 2),
        hp=Hyperparams(batch_size=16, epochs=1, rng_seed=rng.randrange(1 << 30)),
        filter=FilterConfig(bucket_count=64),
        model_seed=rng.randrange(1 << 30),
        plan_seed=rng.randrange(1 << 30),
    )
    session = Session(cfg, enclave=enclave, sid=sid)
    return session, ds


def _halts(fn) -> bool:
    try:
        fn()
    except (IntegrityError, ProtocolError):
        return True
    return False


def _final_link(server: PoulServer, shard: int) -> int:
    auth = server.auth_view()
    return auth.slice_owner(shard, server.config.n_slices).model_link


def attack_trial(name: str, rng: random.Random) -> bool:
    """Run one randomized instance of an attack; True iff it was rejected."""
    session, ds = _tiny_session(rng)
    points = ds.points()
    srv, ver = session.server, session.verifier
    t = ds.X_test[rng.randrange(len(ds.X_test))]

    if name == "replace_data":
        items = session.place(points)
        _, receipt, _ = session.commit_points(items)
        auth = srv.auth_view()
        victim, donor = rng.sample([p.kid for p in points], 2)
        link = auth.entry(victim).data_link
        if rng.random() < 0.5:
            srv.data_store.flip_byte(link, rng.randrange(48, 60))
        else:
            srv.data_store.overwrite(link, srv.data_store.raw_record(auth.entry(donor).data_link))
        return _halts(lambda: srv.prove_learning(session.sid, srv.eid, receipt.h_c))

    setup = session.setup_phase(points, t)
    assert setup.ok, "honest setup must verify before the attack"
    shard = rng.randrange(srv.config.n_shards)

    if name == "forge_model":
        # substitute a differently trained final model on disk, and also try a forged proof
        forged = ml.train_sgd(ml.init_model(srv.config.dims, rng.randrange(1 << 30)), (ds.X_train, ds.y_train), srv.config.hp)
        blob = ml.canonical_bytes(ml.with_slice_index(forged, srv.config.n_slices))
        link = _final_link(srv, shard)
        raw = srv.model_store.raw_record(link)
        fake_mac = os.urandom(32)
        srv.model_store.overwrite(link, raw[:5] + raw[5:11] + fake_mac + blob)
        halted = _halts(lambda: srv.prove_prediction(session.sid, srv.eid, t, ver.h_models))
        ver.challenge(t)
        p = ml.predict(forged, t)
        fake = PredictProof(session.sid, srv.eid, p, ver.challenge_t, setup.predict.h_models, setup.predict.attestation)
        return halted and (p == setup.predict.p or not ver.predict(fake))

    if name == "fork_instance":
        victim = points[rng.randrange(len(points))]
        session.deletion_phase([victim.kid], t)
        fork = Session(srv.config, sid=session.sid)
        fork_setup = fork.setup_phase(points, t)
        ver.challenge(t)
        return not ver.learn(fork_setup.learn) and not ver.predict(fork_setup.predict)

    if name == "relocate_submodel":
        s = srv.config.n_slices
        auth = srv.auth_view()
        other = rng.randrange(1, s)
        a = auth.slice_owner(shard, s).model_link
        b = auth.slice_owner(shard, other).model_link
        ra, rb = srv.model_store.raw_record(a), srv.model_store.raw_record(b)
        srv.model_store.overwrite(a, rb)
        srv.model_store.overwrite(b, ra)
        return _halts(lambda: srv.prove_prediction(session.sid, srv.eid, t, ver.h_models)) and _halts(
            lambda: auth.restore_slice_checked(shard, other)
        )

    if name == "rollback_submodel":
        auth = srv.auth_view()
        victim = rng.choice([e.kid for e in auth.state.slices[shard][rng.randrange(srv.config.n_slices)]])
        old_raw = srv.model_store.raw_record(_final_link(srv, shard))
        phase = session.deletion_phase([victim], t)
        assert phase.ok
        srv.model_store.overwrite(_final_link(srv, shard), old_raw)
        return _halts(lambda: srv.prove_prediction(session.sid, srv.eid, t, ver.h_models))

    if name == "replay_proof":
        victim = points[rng.randrange(len(points))]
        phase = session.deletion_phase([victim.kid], t)
        assert phase.ok
        ver.challenge(t)
        return not ver.learn(setup.learn) and not ver.predict(setup.predict)

    raise ValueError(f"unknown attack {name!r}")


def replacement_detection(samples: int = 2000, seed: int = 0, config: FilterConfig | None = None) -> tuple[float, float]:
    """Fraction of substituted-but-validly-MAC'd records that the filter alone catches.

    Returns (filter detection rate, overall rejection rate).
    """
    rng = random.Random(seed)
    config = config or FilterConfig(bucket_count=1 << 10)
    enclave = Enclave()
    enclave.install([])
    state = AuthState.create(config, 1, 1)
    ds, ms = RecordStore(), RecordStore()
    auth = AuthLayer(EnclaveContext(enclave), state, ds, ms)
    n = min(samples, int(config.bucket_count * config.entries_per_bucket * 0.5))
    kids = []
    for k in range(n):
        p = DataPoint(np.frombuffer(struct.pack("<QQ", k, rng.getrandbits(64)), dtype=np.float32).copy(), k & 1)
        auth.append_data(p.kid, p, 0, 1)
        kids.append(p.kid)
    caught_by_filter = rejected = 0
    for k in range(samples):
        victim, donor = rng.sample(kids, 2)
        link = auth.entry(victim).data_link
        saved = ds.raw_record(link)
        ds.overwrite(link, ds.raw_record(auth.entry(donor).data_link))
        try:
            auth.fetch_data_checked(victim)
        except IntegrityError as exc:
            rejected += 1
            caught_by_filter += type(exc).__name__ == "DeletedOrForged"
        ds.overwrite(link, saved)
    return caught_by_filter / samples, rejected / samples


def attack_sim(trials: int = 100, seed: int = 0, detection_samples: int = 2000) -> BenchResult:
    res = BenchResult("attack-sim", {"trials": trials, "seed": seed})
    rng = random.Random(seed)
    for name in ATTACKS:
        rejected = sum(attack_trial(name, rng) for _ in range(trials))
        res.add("rejected", rejected, "count", trials, attack=name)
    filt, overall = replacement_detection(detection_samples, seed)
    cfg = FilterConfig(bucket_count=1 << 10)
    res.add("replacement_filter_detection_rate", filt, "ratio", detection_samples)
    res.add("replacement_rejection_rate", overall, "ratio", detection_samples)
    res.add("replacement_fpr_bound", 2 * cfg.entries_per_bucket / 2 ** cfg.fingerprint_bits, "ratio")
    return res
