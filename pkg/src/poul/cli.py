"""Command-line driver.

State for the protocol commands (setup, challenge, delete, audit) lives in the
results directory: the platform key standing in for the hardware root, the
sealed enclave state, both record stores, the verifier's pinned values and
the transcript.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .auditor import Auditor, recompute_verdict, verify_report
from .cuckoo import FilterConfig
from .data import PURCHASE_TEST, PURCHASE_TRAIN, DataPoint, gen_dataset, read_dataset, write_dataset
from .enclave import Enclave
from .ml import Hyperparams
from .protocol import (
    PROGRAMS,
    PoulConfig,
    PoulServer,
    Session,
    Transcript,
    Verifier,
    message_from_record,
    verify_transcript,
)


def _filter_config(args) -> FilterConfig:
    return FilterConfig(
        bucket_count=args.buckets,
        entries_per_bucket=args.entries_per_bucket,
        fingerprint_bits=args.fp_bits,
    )


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--results-dir", default="results")
    p.add_argument("--seed", type=int, default=0)


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--slices", type=int, default=6)
    p.add_argument("--batch", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=22)
    p.add_argument("--lr", type=float, default=0.1)


def _add_filter(p: argparse.ArgumentParser, buckets: int = 1 << 16) -> None:
    p.add_argument("--fp-bits", type=int, default=12)
    p.add_argument("--buckets", type=int, default=buckets)
    p.add_argument("--entries-per-bucket", type=int, default=4)


def _add_dataset(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default=None, help="directory holding train.bin and test.bin")
    p.add_argument("--n-train", type=int, default=1200, help="synthetic size when --dataset is not given")
    p.add_argument("--n-test", type=int, default=300)


def _load_dataset(args):
    if args.dataset:
        return read_dataset(args.dataset)
    return gen_dataset(args.n_train, args.n_test, seed=args.seed)


def _emit(result: bench.BenchResult, args) -> None:
    print(result.table())
    csv_path, json_path = bench.write_result(result, args.results_dir)
    print(f"wrote {csv_path} and {json_path}")


# -- persisted protocol state ------------------------------------------------------


class StateDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.state = self.root / "state"

    def platform_key(self) -> bytes:
        path = self.state / "platform.key"
        if not path.exists():
            self.state.mkdir(parents=True, exist_ok=True)
            path.write_bytes(os.urandom(32))
        return path.read_bytes()

    def save(self, session: Session) -> None:
        self.state.mkdir(parents=True, exist_ok=True)
        (self.state / "sealed.bin").write_bytes(session.server.enclave.seal_state())
        (self.state / "config.json").write_text(json.dumps(session.config.to_json(), indent=2))
        (self.state / "verifier.json").write_text(json.dumps(session.verifier.to_json(), indent=2))
        session.transcript.write(self.state / "transcript.jsonl")

    def load(self) -> Session:
        if not (self.state / "sealed.bin").exists():
            raise SystemExit(f"no session under {self.state}; run `setup` first")
        config = PoulConfig.from_json(json.loads((self.state / "config.json").read_text()))
        enclave = Enclave(platform_key=self.platform_key())
        enclave.install(PROGRAMS)
        enclave.unseal_state((self.state / "sealed.bin").read_bytes())
        verifier = Verifier.from_json(json.loads((self.state / "verifier.json").read_text()))
        server = PoulServer(config, enclave, self.state, verifier.pins.sid)
        return Session.resume(server, verifier, Transcript.read(self.state / "transcript.jsonl"))


def _report_phase(name: str, phase) -> bool:
    for k, ok in phase.accepted.items():
        print(f"  {name} verify_{k}: {'accept' if ok else 'REJECT'}")
    print(f"  prediction: label={phase.predict.p.label} scores={tuple(round(x, 4) for x in phase.predict.p.scores)}")
    print(f"  retrained submodels: {len(phase.steps)}")
    return phase.ok


def cmd_gen_dataset(args) -> int:
    ds = gen_dataset(args.n_train, args.n_test, dim=args.dim, classes=args.classes, seed=args.seed)
    out = args.dataset or os.path.join(args.results_dir, "dataset")
    train, test = write_dataset(out, ds)
    print(f"wrote {len(ds.y_train)} training records to {train} and {len(ds.y_test)} test records to {test}")
    return 0


def cmd_setup(args) -> int:
    ds = _load_dataset(args)
    config = PoulConfig(
        n_shards=args.shards,
        n_slices=args.slices,
        dims=(ds.dim, 128, ds.classes),
        hp=Hyperparams(min(args.batch, len(ds.y_train)), args.epochs, args.lr, args.seed),
        model_seed=args.seed,
        plan_seed=args.seed,
        filter=_filter_config(args),
    )
    sd = StateDir(args.results_dir)
    if (sd.state / "sealed.bin").exists():
        for f in sd.state.iterdir():
            f.unlink()
    enclave = Enclave(platform_key=sd.platform_key())
    session = Session(config, enclave=enclave, store_dir=sd.state)
    phase = session.setup_phase(ds.points(), ds.X_test[args.challenge_index])
    print(f"setup: {len(ds.y_train)} points, {args.shards} shard(s) x {args.slices} slice(s)")
    print(f"  pk={session.server.pk.hex()}")
    print(f"  eid={session.server.eid.hex()}")
    ok = _report_phase("setup", phase)
    sd.save(session)
    return 0 if ok else 1


def cmd_challenge(args) -> int:
    sd = StateDir(args.results_dir)
    session = sd.load()
    ds = _load_dataset(args)
    _, ok = session._predict(ds.X_test[args.index])
    pp = message_from_record(session.transcript.records[-1])
    print(f"challenge test[{args.index}]: label={pp.p.label} verify_predict: {'accept' if ok else 'REJECT'}")
    sd.save(session)
    return 0 if ok else 1


def cmd_delete(args) -> int:
    sd = StateDir(args.results_dir)
    session = sd.load()
    ds = _load_dataset(args)
    if args.kid:
        kids = [int(k, 16) for k in args.kid]
        points = []
    else:
        points = [DataPoint(ds.X_train[i].astype(np.float32), int(ds.y_train[i])) for i in args.index]
        kids = [p.kid for p in points]
    phase = session.deletion_phase(kids, ds.X_test[args.challenge_index])
    for kid, affected in phase.affected.items():
        print(f"  deleted {kid:#018x}: invalidated submodels {affected}")
    ok = _report_phase("deletion", phase)
    for p in points:
        _, absent = session.check_absent(p)
        print(f"  membership of {p.kid:#018x} after deletion: {'absent (verified)' if absent else 'PRESENT OR UNVERIFIED'}")
        ok = ok and absent
    sd.save(session)
    return 0 if ok else 1


def cmd_audit(args) -> int:
    sd = StateDir(args.results_dir)
    session = sd.load()
    ds = _load_dataset(args)
    auditor = Auditor(session.verifier.pins)
    tap = auditor.establish_channel(session.server)
    last_learn = next((r for r in reversed(session.transcript.records) if r["type"] == "learn"), None)
    if last_learn is None:
        raise SystemExit("transcript holds no learning proof")
    tap("learn", message_from_record(last_learn))
    for k in range(args.predictions):
        session._predict(ds.X_test[k % len(ds.X_test)])
    if args.inject_stale:
        current = session.verifier.h_models
        stale = next(
            (r for r in session.transcript.records if r["type"] == "predict" and tuple(bytes.fromhex(h) for h in r["h_models"]) != current),
            None,
        )
        if stale is None:
            print("  no stale prediction in the transcript to inject")
        else:
            tap("predict", message_from_record(stale))
    report = auditor.fetch_reports()
    recomputed = all(recompute_verdict(e, session.verifier.pins) == e.verdict for e in report.entries)
    valid = verify_report(auditor.pk, report)
    print(f"audit: {report.count} entries, {len(report.alerts)} alert(s), head={report.head.hex()[:16]}")
    for a in report.alerts:
        print(f"  alert seq={a.seq} failure={a.failure}")
    print(f"  report signature and chain: {'valid' if valid else 'INVALID'}; verdicts recomputed: {recomputed}")
    out = Path(args.results_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "audit_log.jsonl", "w") as fh:
        for e in report.entries:
            fh.write(json.dumps(e.__dict__, sort_keys=True) + "\n")
    sd.save(session)
    return 0 if valid and recomputed and not report.alerts else 1


def cmd_verify_transcript(args) -> int:
    path = Path(args.transcript or Path(args.results_dir) / "state" / "transcript.jsonl")
    results = verify_transcript(Transcript.read(path))
    for n, kind, ok in results:
        print(f"  record {n:>4} {kind:<8} {'accept' if ok else 'REJECT'}")
    return 0 if all(ok for _, _, ok in results) else 1


def cmd_bench_filter(args) -> int:
    res = bench.bench_filter(args.items, _filter_config(args), args.reps, args.negatives, args.seed)
    _emit(res, args)
    return 0


def cmd_bench_mht(args) -> int:
    mht = bench.bench_mht(args.items, args.reps, args.ops, args.seed)
    _emit(mht, args)
    flt = bench.bench_filter(args.items, _filter_config(args), args.reps, 0, args.seed)
    _emit(bench.compare_filter_mht(flt, mht), args)
    return 0


def cmd_bench_unlearn(args) -> int:
    ds = _load_dataset(args)
    hp = Hyperparams(min(args.batch, len(ds.y_train)), args.epochs, args.lr, args.seed)
    _emit(bench.bench_unlearn(ds, args.slices, hp, args.reps, _filter_config(args), args.seed), args)
    return 0


def cmd_bench_storage(args) -> int:
    _emit(bench.bench_storage(args.entries, args.slices, config=_filter_config(args), seed=args.seed), args)
    return 0


def cmd_attack_sim(args) -> int:
    res = bench.attack_sim(args.trials, args.seed)
    _emit(res, args)
    failed = [r.params["attack"] for r in res.rows if r.name == "rejected" and r.value < args.trials]
    if failed:
        print(f"attacks not always rejected: {failed}")
        return 1
    return 0


def cmd_sweep_slices(args) -> int:
    ds = _load_dataset(args)
    res = bench.sweep_slices(
        ds,
        tuple(args.slice_counts),
        args.epochs,
        args.shards,
        min(args.batch, len(ds.y_train)),
        args.lr,
        args.seed,
        args.parallel_shards,
    )
    _emit(res, args)
    return 0


def cmd_sweep_hparams(args) -> int:
    ds = _load_dataset(args)
    res = bench.sweep_hparams(ds, tuple(args.epoch_list), tuple(args.batch_sizes), args.lr, args.seed)
    _emit(res, args)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poul", description="Verifiable unlearning: protocol runs and benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="write a synthetic Purchase-shaped dataset")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="output directory (default: <results-dir>/dataset)")
    p.add_argument("--n-train", type=int, default=PURCHASE_TRAIN)
    p.add_argument("--n-test", type=int, default=PURCHASE_TEST)
    p.add_argument("--dim", type=int, default=600)
    p.add_argument("--classes", type=int, default=2)
    p.set_defaults(fn=cmd_gen_dataset)

    p = sub.add_parser("setup", help="commit a dataset, train, prove and verify")
    _add_common(p)
    _add_training(p)
    _add_filter(p)
    _add_dataset(p)
    p.add_argument("--challenge-index", type=int, default=0)
    p.set_defaults(fn=cmd_setup)

    p = sub.add_parser("challenge", help="ask for a proven prediction on a test point")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(fn=cmd_challenge)

    p = sub.add_parser("delete", help="delete training points, retrain and verify")
    _add_common(p)
    _add_dataset(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--index", type=int, nargs="+", help="training-set row indices")
    g.add_argument("--kid", nargs="+", help="kids in hex")
    p.add_argument("--challenge-index", type=int, default=1)
    p.set_defaults(fn=cmd_delete)

    p = sub.add_parser("audit", help="run predictions under an auditing enclave")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--predictions", type=int, default=10)
    p.add_argument("--inject-stale", action="store_true", help="replay an outdated prediction proof")
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("verify-transcript", help="replay the verifier over a transcript file")
    _add_common(p)
    p.add_argument("--transcript", default=None)
    p.set_defaults(fn=cmd_verify_transcript)

    p = sub.add_parser("bench-filter", help="cuckoo filter timings and false-positive rate")
    _add_common(p)
    _add_filter(p)
    p.add_argument("--items", type=int, default=56_073)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--negatives", type=int, default=1_000_000)
    p.set_defaults(fn=cmd_bench_filter)

    p = sub.add_parser("bench-mht", help="Merkle tree timings and speedup of the filter")
    _add_common(p)
    _add_filter(p)
    p.add_argument("--items", type=int, default=56_073)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--ops", type=int, default=10_000)
    p.set_defaults(fn=cmd_bench_mht)

    p = sub.add_parser("bench-unlearn", help="retrain cost per deletion position")
    _add_common(p)
    _add_training(p)
    _add_filter(p)
    _add_dataset(p)
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(fn=cmd_bench_unlearn)

    p = sub.add_parser("bench-storage", help="sizes of key_list, stores and filter")
    _add_common(p)
    _add_filter(p)
    p.add_argument("--entries", type=int, default=56_073)
    p.add_argument("--slices", type=int, default=6)
    p.set_defaults(fn=cmd_bench_storage)

    p = sub.add_parser("attack-sim", help="run the tampering strategies and check each is rejected")
    _add_common(p)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(fn=cmd_attack_sim)

    p = sub.add_parser("sweep-slices", help="accuracy versus slice count at a fixed training budget")
    _add_common(p)
    _add_training(p)
    _add_dataset(p)
    p.add_argument("--slice-counts", type=int, nargs="+", default=[1, 3, 6, 12])
    p.add_argument("--parallel-shards", type=int, default=1, metavar="N", help="train shards in N threads")
    p.set_defaults(fn=cmd_sweep_slices)

    p = sub.add_parser("sweep-hparams", help="accuracy versus epochs and batch size")
    _add_common(p)
    _add_training(p)
    _add_dataset(p)
    p.add_argument("--epoch-list", type=int, nargs="+", default=[5, 10, 22])
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[1000])
    p.set_defaults(fn=cmd_sweep_hparams)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
