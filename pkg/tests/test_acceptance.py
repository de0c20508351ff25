"""Exit criteria, each checked at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; a summary block lists one
PASS/FAIL line per criterion.
"""

import random
import time

import numpy as np
import pytest
from conftest import small_config

from poul import bench, ml, sisa
from poul.cuckoo import FilterConfig
from poul.data import gen_dataset
from poul.ml import Hyperparams
from poul.protocol import PoulConfig, Session, VerifyStats

pytestmark = pytest.mark.acceptance


def _oracle_chains(session, X, y, row_of, dead, m0, hp):
    plan = sisa.remove_kids(session.plan, dead)
    return [
        sisa.train_chain_plain(X, y, [[row_of[k] for k in sl] for sl in shard], m0, hp, j)
        for j, shard in enumerate(plan.slices)
    ]


def test_exact_unlearning_equals_retraining(criterion):
    rng = random.Random(2024)
    start = time.perf_counter()
    mismatches = []
    for trial in range(20):
        n_shards, n_slices = rng.choice([1, 2]), rng.choice([1, 3, 6])
        n = rng.randrange(300, 2001)
        ds = gen_dataset(n, 10, seed=rng.randrange(1 << 30))
        hp = Hyperparams(batch_size=200, epochs=3, rng_seed=rng.randrange(1 << 30))
        cfg = PoulConfig(n_shards, n_slices, (ds.dim, 128, 2), hp, rng.randrange(1 << 30), rng.randrange(1 << 30),
                         FilterConfig(bucket_count=1 << 10))
        s = Session(cfg)
        points = ds.points()
        assert s.setup_phase(points, ds.X_test[0]).ok
        j = rng.randrange(n_shards)
        i = rng.randrange(1, n_slices + 1)
        victim = rng.choice(s.plan.slices[j][i - 1])
        phase = s.deletion_phase([victim], ds.X_test[1])
        assert phase.ok and phase.affected[victim] == list(range(i, n_slices + 1))
        row_of = {p.kid: r for r, p in enumerate(points)}
        m0 = ml.init_model(cfg.dims, cfg.model_seed)
        expected = _oracle_chains(s, ds.X_train.astype(np.float32), ds.y_train, row_of, {victim}, m0, hp)
        auth = s.server.auth_view()
        for shard in range(n_shards):
            got = sisa.load_chain(auth, shard, cfg.dims)
            if [ml.canonical_bytes(m) for m in got] != [ml.canonical_bytes(m) for m in expected[shard]]:
                mismatches.append((trial, shard))
    elapsed = time.perf_counter() - start
    ok = criterion(1, not mismatches and elapsed < 300, f"20 configs, mismatches={mismatches}, {elapsed:.1f}s")
    assert ok


def test_protocol_completeness(criterion):
    rng = random.Random(7)
    accepted = 0
    for _ in range(50):
        dim = 24
        ds = gen_dataset(rng.randrange(60, 160), 5, dim=dim, informative=8, seed=rng.randrange(1 << 30))
        cfg = small_config(n_shards=rng.choice([1, 2, 3]), n_slices=rng.choice([1, 2, 3, 4]), dim=dim,
                           epochs=rng.choice([1, 2]), seed=rng.randrange(1 << 30))
        s = Session(cfg)
        points = ds.points()
        setup = s.setup_phase(points, ds.X_test[0])
        victims = [p.kid for p in rng.sample(points, rng.randrange(1, 4))]
        deletion = s.deletion_phase(victims, ds.X_test[1])
        accepted += setup.ok and deletion.ok
    ok = criterion(2, accepted == 50, f"{accepted}/50 runs accepted by all three checks")
    assert ok


def test_attack_soundness(criterion):
    res = bench.attack_sim(trials=100, seed=11, detection_samples=20_000)
    rejected = {name: int(res.get("rejected", attack=name).value) for name in bench.ATTACKS}
    detection = res.get("replacement_filter_detection_rate").value
    bound = res.get("replacement_fpr_bound").value
    overall = res.get("replacement_rejection_rate").value
    ok = all(v == 100 for v in rejected.values()) and detection >= 1 - bound and overall == 1.0
    criterion(3, ok, f"rejected={rejected} filter detection={detection:.5f} >= {1 - bound:.5f}, overall={overall}")
    assert ok


# Unattainable as stated: at 3,500 items in 2^12 x 4 slots (load 0.214) a cuckoo filter's
# FPR is about 2*b*load/2^f, i.e. ~4e-4 at f=12 and ~7e-3 at f=8, below both target ranges.
@pytest.mark.xfail(strict=True, reason="target FPR ranges need a load near 0.85; see decisions ledger")
def test_filter_fpr_at_stated_load(criterion):
    measured = {}
    for bits in (12, 8):
        cfg = FilterConfig(bucket_count=1 << 12, entries_per_bucket=4, fingerprint_bits=bits)
        measured[bits], _ = bench.measure_fpr(cfg, 3500, 1_000_000, seed=5)
    ok = 0.001 <= measured[12] <= 0.006 and 0.02 <= measured[8] <= 0.06
    criterion(4, ok, f"FPR f=12: {measured[12]:.6f} (want [0.001, 0.006]), f=8: {measured[8]:.6f} (want [0.02, 0.06])")
    assert ok


def test_filter_fpr_tracks_load_factor():
    """Same filter at high load: FPR lands inside both ranges and near 2*b*load/2^f."""
    for bits, lo, hi in ((12, 0.001, 0.006), (8, 0.02, 0.06)):
        cfg = FilterConfig(bucket_count=1 << 12, entries_per_bucket=4, fingerprint_bits=bits)
        fpr, flt = bench.measure_fpr(cfg, 14_000, 1_000_000, seed=5)
        expected = 2 * 4 * flt.load_factor / 2**bits
        assert lo <= fpr <= hi
        assert abs(fpr - expected) < 0.15 * expected


def test_filter_beats_merkle_tree(criterion):
    start = time.perf_counter()
    flt = bench.bench_filter(56_073, FilterConfig(), reps=3, n_negatives=0)
    mht = bench.bench_mht(56_073, reps=3, ops=10_000)
    cmp = bench.compare_filter_mht(flt, mht)
    speedups = {r.name.removeprefix("speedup_"): r.value for r in cmp.rows}
    elapsed = time.perf_counter() - start
    ok = all(v >= 10 for v in speedups.values()) and elapsed < 120
    criterion(5, ok, "speedups " + ", ".join(f"{k}={v:.1f}x" for k, v in speedups.items()) + f", {elapsed:.1f}s")
    assert ok


def test_storage_accounting(criterion, tmp_path):
    res = bench.bench_storage(56_073, 6, store_dir=tmp_path)
    key_list = res.get("key_list_bytes").value
    per_entry = res.get("key_list_bytes_per_entry").value
    model_link = res.get("model_link_bytes").value
    target = 6 * 308_744
    table = res.get("filter_table_bytes").value
    ok = (
        per_entry <= 52
        and key_list <= 2.92e6
        and abs(model_link - target) <= 0.10 * target
        and table == res.get("filter_table_bytes_formula").value == (1 << 16) * 4 * 12 // 8
    )
    criterion(6, ok, f"key_list={key_list:.0f} B ({per_entry:.1f} B/entry), model_link={model_link:.0f} B "
                     f"(target {target}), filter table={table:.0f} B")
    assert ok


def test_unlearning_cost_shape(criterion):
    ds = gen_dataset(1200, 50, seed=1)
    res = bench.bench_unlearn(ds, 6, Hyperparams(batch_size=200, epochs=5), reps=5,
                              config=FilterConfig(bucket_count=1 << 10), seed=3)
    positions = range(1, 7)
    counts_ok = all(
        res.get("min_retrained_submodels", position=i).value == res.get("max_retrained_submodels", position=i).value
        == 6 - i + 1
        for i in positions
    )
    fastest = [res.get("retrain_seconds_min", position=i).value for i in positions]
    medians = [res.get("retrain_seconds", position=i).value for i in positions]
    monotone = all(a >= b for a, b in zip(fastest, fastest[1:]))
    overhead = [res.get("overhead_fraction", position=i).value for i in positions]
    ok = counts_ok and monotone and max(overhead) < 0.05
    criterion(7, ok, f"counts exact={counts_ok}, retrain s (min of 5)={[round(t, 3) for t in fastest]}, "
                     f"medians={[round(t, 3) for t in medians]}, max overhead={max(overhead):.4f}")
    assert ok


def test_constant_verification_cost(criterion):
    per_call = set()
    totals = {}
    for s_count in (1, 3, 6, 12):
        ds = gen_dataset(96, 6, dim=24, informative=8, seed=s_count)
        session = Session(small_config(n_slices=s_count, epochs=1))
        v = session.verifier
        calls = []
        for name in ("receipt", "learn", "predict"):
            inner = getattr(v, name)

            def counted(msg, inner=inner):
                before = v.stats.signature_checks
                ok = inner(msg)
                calls.append(v.stats.signature_checks - before)
                return ok

            setattr(v, name, counted)
        assert session.setup_phase(ds.points(), ds.X_test[0]).ok
        auth = session.server.auth_view()
        for i in (1, s_count):
            victim = next(e.kid for e in auth.state.slices[0][i - 1] if e.live)
            phase = session.deletion_phase([victim], ds.X_test[1])
            assert phase.ok and len(phase.steps) == s_count - i + 1
        per_call |= set(calls)
        totals[s_count] = v.stats.signature_checks
    ok = per_call == {1} and len(set(totals.values())) == 1
    criterion(8, ok, f"signature checks per assertion={sorted(per_call)}, per session={totals}")
    assert ok
    assert VerifyStats().signature_checks == 0


def test_slice_count_insensitivity(criterion):
    ds = gen_dataset(12_000, 2_000, seed=0)
    res = bench.sweep_slices(ds, (1, 3, 6, 12), total_epochs=22, batch_size=1000, learning_rate=0.1)
    acc = {int(r.params["slices"]): r.value for r in res.rows}
    spread = max(acc.values()) - min(acc.values())
    ok = spread <= 0.03
    criterion(9, ok, f"accuracy by slices={ {k: round(v, 4) for k, v in acc.items()} }, spread={spread * 100:.2f} pp")
    assert ok


def test_synthetic_accuracy(criterion):
    ds = gen_dataset(12_000, 2_000, seed=0)
    res = bench.sweep_hparams(ds, (5, 10, 22), (1000,), learning_rate=0.1)
    acc = [r.value for r in res.rows]
    ok = acc[-1] >= 0.90 and acc[0] <= acc[1] <= acc[2]
    criterion(10, ok, f"accuracy at 5/10/22 epochs={[round(a, 4) for a in acc]}")
    assert ok
