"""Commit-and-prove protocol between a server-hosted enclave and a data owner.

The enclave runs four installed programs:

* ``prog_k`` derives the kid of a data point.
* ``prog_c`` commits additions and deletions and signs the resulting filter
  and key-list digests (a :class:`Receipt`).
* ``prog_t`` trains every invalid submodel and signs the chain-final model
  digests (a :class:`LearnProof`).
* ``prog_p`` restores the final models, checks them against the claimed
  digests, predicts and signs (a :class:`PredictProof`).

Every signed payload starts with a type tag and the session id. The verifier
rebuilds each payload from its own pinned values (sid, program measurements,
the challenge it sent, the digests it last accepted), so one signature check
per assertion covers all of them.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ml, sisa
from .auth import AuthLayer, AuthState, RecordStore
from .cuckoo import FilterConfig, fingerprint, kid_hash
from .data import DataPoint
from .enclave import Attestation, Enclave, Program, measure, prog_id, verify_signature
from .ml import Hyperparams, ModelParams, Prediction


class ProtocolError(Exception):
    pass


class StaleCommitment(ProtocolError):
    pass


class WrongModel(ProtocolError):
    pass


class Unauthorized(ProtocolError):
    pass


@dataclass(frozen=True)
class PoulConfig:
    n_shards: int = 1
    n_slices: int = 6
    dims: tuple[int, int, int] = ml.DEFAULT_DIMS
    hp: Hyperparams = field(default_factory=Hyperparams)
    model_seed: int = 0
    plan_seed: int = 0
    filter: FilterConfig = field(default_factory=FilterConfig)
    multi_owner: bool = False

    def to_json(self) -> dict:
        f = self.filter
        return {
            "n_shards": self.n_shards,
            "n_slices": self.n_slices,
            "dims": list(self.dims),
            "hp": {
                "batch_size": self.hp.batch_size,
                "epochs": self.hp.epochs,
                "learning_rate": self.hp.learning_rate,
                "rng_seed": self.hp.rng_seed,
            },
            "model_seed": self.model_seed,
            "plan_seed": self.plan_seed,
            "filter": {
                "bucket_count": f.bucket_count,
                "entries_per_bucket": f.entries_per_bucket,
                "fingerprint_bits": f.fingerprint_bits,
                "displacement_limit": f.displacement_limit,
                "eviction_seed": f.eviction_seed,
            },
            "multi_owner": self.multi_owner,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PoulConfig":
        return cls(
            n_shards=d["n_shards"],
            n_slices=d["n_slices"],
            dims=tuple(d["dims"]),
            hp=Hyperparams(**d["hp"]),
            model_seed=d["model_seed"],
            plan_seed=d["plan_seed"],
            filter=FilterConfig(**d["filter"]),
            multi_owner=d["multi_owner"],
        )

    def canonical(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()


def pack_fields(*parts: bytes) -> bytes:
    return b"".join(struct.pack("<I", len(p)) + p for p in parts)


def _stores(inp) -> tuple[RecordStore, RecordStore]:
    return inp["data_store"], inp["model_store"]


def _layer(ctx, inp) -> AuthLayer:
    state = ctx.mem.get("auth")
    if state is None:
        raise ProtocolError("enclave state not initialized")
    ds, ms = _stores(inp)
    return AuthLayer(ctx, state, ds, ms)


# -- enclave programs ---------------------------------------------------------
# Each takes (ctx, inp) and returns (result, signed output bytes).


def prog_k(ctx, inp):
    point: DataPoint = inp["point"]
    kid = point.kid
    return kid, struct.pack("<Q", kid)


def prog_c(ctx, inp):
    msg = inp["msg"]
    sid = inp["sid"]
    if msg == "init":
        if "auth" not in ctx.mem:
            cfg: PoulConfig = inp["config"]
            ctx.mem["config"] = cfg
            ctx.mem["auth"] = AuthState.create(
                cfg.filter, cfg.n_shards, cfg.n_slices, cfg.multi_owner, cfg.canonical()
            )
        result = None
    elif msg == "add":
        auth = _layer(ctx, inp)
        kids = []
        for point, shard, slice_index in inp["items"]:
            if auth.state.multi_owner and point.owner != inp.get("requester"):
                raise Unauthorized("multi-owner commits must come from the point's owner")
            kid, _ = prog_k(ctx, {"point": point})
            auth.append_data(kid, point, shard, slice_index)
            kids.append(kid)
        result = kids
    elif msg == "del":
        auth = _layer(ctx, inp)
        kids = list(inp["kids"])
        if len(set(kids)) != len(kids):
            raise ProtocolError("duplicate kid in deletion request")
        for kid in kids:
            entry = auth.entry(kid)
            if not entry.live:
                raise ProtocolError(f"kid {kid:#018x} is already deleted")
            if auth.state.multi_owner:
                data = auth.fetch_data_checked(kid)
                if DataPoint.from_bytes(data).owner != inp.get("requester"):
                    raise Unauthorized(f"requester does not own kid {kid:#018x}")
        # foremost location first, so each shard's chain is resumed once by prog_t
        kids.sort(key=auth.location)
        result = {kid: auth.delete_and_invalidate(kid) for kid in kids}
    elif msg == "query":
        auth = _layer(ctx, inp)
        point: DataPoint = inp["point"]
        kid, _ = prog_k(ctx, {"point": point})
        data = point.to_bytes()
        fp = fingerprint(kid, data, ctx.eid, ctx.prf_key, auth.state.filter.config.fingerprint_bits, point.owner)
        present = auth.state.filter.query(fp, kid_hash(kid))
        h_c = auth.state.filter.digest()
        out = pack_fields(b"member", sid, h_c, struct.pack("<Q?", kid, present), ctx.measurement("prog_c"))
        return (kid, present, h_c), out
    else:
        raise ProtocolError(f"unknown commit message {msg!r}")
    state: AuthState = ctx.mem["auth"]
    h_c = state.filter.digest()
    h_keys = state.key_list_digest()
    out = pack_fields(b"receipt", sid, h_c, h_keys, ctx.measurement("prog_c"), ctx.measurement("prog_k"))
    return (result, h_c, h_keys), out


def prog_t(ctx, inp):
    auth = _layer(ctx, inp)
    cfg: PoulConfig = ctx.mem["config"]
    h_c = auth.state.filter.digest()
    if inp["h_c"] != h_c:
        raise StaleCommitment("commitment does not match the enclave filter")
    m0 = ml.init_model(cfg.dims, cfg.model_seed)
    steps = sisa.resume_chain(auth, m0, cfg.hp)
    h_models = tuple(auth.restore_slice_checked(j, cfg.n_slices)[1] for j in range(cfg.n_shards))
    out = pack_fields(b"learn", inp["sid"], h_c, *h_models, ctx.measurement("prog_t"))
    return (steps, h_models), out


def prog_p(ctx, inp):
    auth = _layer(ctx, inp)
    cfg: PoulConfig = ctx.mem["config"]
    claimed = tuple(inp["h_models"])
    if len(claimed) != cfg.n_shards:
        raise WrongModel(f"expected {cfg.n_shards} model digests, got {len(claimed)}")
    models = []
    for j in range(cfg.n_shards):
        blob, h = auth.restore_slice_checked(j, cfg.n_slices)
        if h != claimed[j]:
            raise WrongModel(f"final model of shard {j} does not match the claimed digest")
        models.append(ml.from_canonical_bytes(blob, cfg.dims))
    t = np.ascontiguousarray(inp["t"], dtype="<f4")
    p = sisa.aggregate_predict(models, t)
    out = pack_fields(b"predict", inp["sid"], p.to_bytes(), t.tobytes(), *claimed, ctx.measurement("prog_p"))
    return p, out


PROGRAMS = (
    Program("prog_k", prog_k),
    Program("prog_c", prog_c),
    Program("prog_t", prog_t),
    Program("prog_p", prog_p),
)


def expected_eid() -> bytes:
    """The identity an owner computes locally from the public program code."""
    return measure(PROGRAMS)


def expected_measurements() -> dict[str, bytes]:
    return {p.name: p.measurement for p in PROGRAMS}


# -- messages -------------------------------------------------------------------


@dataclass(frozen=True)
class Receipt:
    sid: bytes
    eid: bytes
    h_c: bytes
    h_keys: bytes
    attestation: Attestation

    def payload(self, measurements: dict[str, bytes]) -> bytes:
        return pack_fields(b"receipt", self.sid, self.h_c, self.h_keys, measurements["prog_c"], measurements["prog_k"])


@dataclass(frozen=True)
class LearnProof:
    sid: bytes
    eid: bytes
    h_c: bytes
    h_models: tuple[bytes, ...]
    attestation: Attestation

    def payload(self, measurements: dict[str, bytes]) -> bytes:
        return pack_fields(b"learn", self.sid, self.h_c, *self.h_models, measurements["prog_t"])


@dataclass(frozen=True)
class PredictProof:
    sid: bytes
    eid: bytes
    p: Prediction
    t: bytes
    h_models: tuple[bytes, ...]
    attestation: Attestation

    def payload(self, measurements: dict[str, bytes]) -> bytes:
        return pack_fields(b"predict", self.sid, self.p.to_bytes(), self.t, *self.h_models, measurements["prog_p"])


@dataclass(frozen=True)
class MembershipProof:
    sid: bytes
    eid: bytes
    h_c: bytes
    kid: int
    present: bool
    attestation: Attestation

    def payload(self, measurements: dict[str, bytes]) -> bytes:
        return pack_fields(
            b"member", self.sid, self.h_c, struct.pack("<Q?", self.kid, self.present), measurements["prog_c"]
        )


# -- verification ---------------------------------------------------------------


@dataclass
class VerifyStats:
    signature_checks: int = 0
    equality_checks: int = 0


@dataclass(frozen=True)
class Pins:
    """What the verifier fixes before the session: key, identity, sid, program code."""

    pk: bytes
    eid: bytes
    sid: bytes
    measurements: dict[str, bytes]


def _check_signed(pins: Pins, prog: str, payload: bytes, att: Attestation, stats: VerifyStats | None) -> bool:
    # the message is rebuilt from pinned values; only the signature comes from the prover
    message = pins.eid + prog_id(prog) + hashlib.sha256(payload).digest()
    if stats is not None:
        stats.signature_checks += 1
    return verify_signature(pins.pk, att.signature, message)


def _eq(a, b, stats: VerifyStats | None) -> bool:
    if stats is not None:
        stats.equality_checks += 1
    return a == b


def verify_receipt(pins: Pins, r: Receipt, stats: VerifyStats | None = None) -> bool:
    rebuilt = Receipt(pins.sid, pins.eid, r.h_c, r.h_keys, r.attestation)
    return _check_signed(pins, "prog_c", rebuilt.payload(pins.measurements), r.attestation, stats)


def verify_learn(pins: Pins, lp: LearnProof, expected_h_c: bytes, stats: VerifyStats | None = None) -> bool:
    if not _eq(lp.h_c, expected_h_c, stats):
        return False
    rebuilt = LearnProof(pins.sid, pins.eid, expected_h_c, lp.h_models, lp.attestation)
    return _check_signed(pins, "prog_t", rebuilt.payload(pins.measurements), lp.attestation, stats)


def verify_predict(
    pins: Pins,
    pp: PredictProof,
    expected_h_models: tuple[bytes, ...],
    expected_t: bytes,
    stats: VerifyStats | None = None,
) -> bool:
    if not _eq(pp.t, expected_t, stats):
        return False
    if not _eq(tuple(pp.h_models), tuple(expected_h_models), stats):
        return False
    rebuilt = PredictProof(pins.sid, pins.eid, pp.p, expected_t, tuple(expected_h_models), pp.attestation)
    return _check_signed(pins, "prog_p", rebuilt.payload(pins.measurements), pp.attestation, stats)


def verify_membership(pins: Pins, mp: MembershipProof, expected_h_c: bytes, stats: VerifyStats | None = None) -> bool:
    if not _eq(mp.h_c, expected_h_c, stats):
        return False
    rebuilt = MembershipProof(pins.sid, pins.eid, expected_h_c, mp.kid, mp.present, mp.attestation)
    return _check_signed(pins, "prog_c", rebuilt.payload(pins.measurements), mp.attestation, stats)


def _opt_hex(b: bytes | None) -> str | None:
    return None if b is None else b.hex()


def _opt_bytes(s: str | None) -> bytes | None:
    return None if s is None else bytes.fromhex(s)


class Verifier:
    """Data-owner side: pins pk at enclave init and tracks the latest accepted digests.

    "Latest" is transcript order within the session.
    """

    def __init__(self, pk: bytes, sid: bytes, eid: bytes | None = None, measurements: dict[str, bytes] | None = None):
        self.pins = Pins(pk, eid or expected_eid(), sid, measurements or expected_measurements())
        self.stats = VerifyStats()
        self.h_c: bytes | None = None
        self.h_keys: bytes | None = None
        self.h_models: tuple[bytes, ...] | None = None
        self.challenge_t: bytes | None = None

    def receipt(self, r: Receipt) -> bool:
        ok = verify_receipt(self.pins, r, self.stats)
        if ok:
            self.h_c, self.h_keys = r.h_c, r.h_keys
            self.h_models = None
        return ok

    def learn(self, lp: LearnProof) -> bool:
        if self.h_c is None:
            return False
        ok = verify_learn(self.pins, lp, self.h_c, self.stats)
        if ok:
            self.h_models = tuple(lp.h_models)
        return ok

    def challenge(self, t: np.ndarray) -> bytes:
        self.challenge_t = np.ascontiguousarray(t, dtype="<f4").tobytes()
        return self.challenge_t

    def predict(self, pp: PredictProof) -> bool:
        if self.h_models is None or self.challenge_t is None:
            return False
        return verify_predict(self.pins, pp, self.h_models, self.challenge_t, self.stats)

    def membership(self, mp: MembershipProof) -> bool:
        if self.h_c is None:
            return False
        return verify_membership(self.pins, mp, self.h_c, self.stats)

    def to_json(self) -> dict:
        opt = _opt_hex
        return {
            "pk": self.pins.pk.hex(),
            "eid": self.pins.eid.hex(),
            "sid": self.pins.sid.hex(),
            "h_c": opt(self.h_c),
            "h_keys": opt(self.h_keys),
            "h_models": None if self.h_models is None else [h.hex() for h in self.h_models],
            "challenge_t": opt(self.challenge_t),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Verifier":
        opt = _opt_bytes
        v = cls(bytes.fromhex(d["pk"]), bytes.fromhex(d["sid"]), bytes.fromhex(d["eid"]))
        v.h_c, v.h_keys, v.challenge_t = opt(d["h_c"]), opt(d["h_keys"]), opt(d["challenge_t"])
        v.h_models = None if d["h_models"] is None else tuple(bytes.fromhex(h) for h in d["h_models"])
        return v


# -- server -----------------------------------------------------------------------


class PoulServer:
    """Untrusted host: owns the record stores and relays calls into the enclave."""

    def __init__(
        self,
        config: PoulConfig,
        enclave: Enclave | None = None,
        store_dir: str | Path | None = None,
        sid: bytes = b"",
    ):
        self.config = config
        self.enclave = enclave or Enclave()
        self.eid = self.enclave.install(PROGRAMS)
        store_dir = Path(store_dir) if store_dir is not None else None
        self.data_store = RecordStore(store_dir / "data_store.bin" if store_dir else None)
        self.model_store = RecordStore(store_dir / "model_link.bin" if store_dir else None)
        self.last_steps: list[sisa.StepTiming] = []
        self.observers: list = []
        # an enclave restored from sealed state already holds its lineage state
        self.init_receipt = self._init(sid) if "auth" not in self.enclave._state.mem else None

    @property
    def pk(self) -> bytes:
        return self.enclave.pk

    def _call(self, prog: str, inp: dict):
        inp = dict(inp, data_store=self.data_store, model_store=self.model_store)
        return self.enclave.resume(self.eid, prog, inp)

    def _init(self, sid: bytes) -> Receipt:
        (_, h_c, h_keys), att = self._call("prog_c", {"msg": "init", "sid": sid, "config": self.config})
        return Receipt(sid, self.eid, h_c, h_keys, att)

    def auth_view(self) -> AuthLayer:
        """Direct handle on the in-enclave lineage state, for tests and benchmarks only."""
        from .enclave import EnclaveContext

        return AuthLayer(EnclaveContext(self.enclave), self.enclave._state.mem["auth"], self.data_store, self.model_store)

    def commit_add(self, sid: bytes, items, requester: bytes | None = None) -> tuple[list[int], Receipt]:
        (kids, h_c, h_keys), att = self._call(
            "prog_c", {"msg": "add", "sid": sid, "items": list(items), "requester": requester}
        )
        return kids, Receipt(sid, self.eid, h_c, h_keys, att)

    def commit_del(self, sid: bytes, kids, requester: bytes | None = None) -> tuple[dict, Receipt]:
        (affected, h_c, h_keys), att = self._call(
            "prog_c", {"msg": "del", "sid": sid, "kids": list(kids), "requester": requester}
        )
        return affected, Receipt(sid, self.eid, h_c, h_keys, att)

    def commit(self, sid: bytes, eid: bytes, msg: str, d, requester: bytes | None = None):
        if eid != self.eid:
            raise ProtocolError("commit addressed to a different enclave")
        if msg == "add":
            return self.commit_add(sid, d, requester)
        if msg == "del":
            return self.commit_del(sid, d, requester)
        raise ProtocolError(f"unknown commit message {msg!r}")

    def prove_learning(self, sid: bytes, eid: bytes, h_c: bytes) -> LearnProof:
        if eid != self.eid:
            raise ProtocolError("request addressed to a different enclave")
        (steps, h_models), att = self._call("prog_t", {"sid": sid, "h_c": h_c})
        self.last_steps = steps
        proof = LearnProof(sid, self.eid, h_c, h_models, att)
        for obs in self.observers:
            obs("learn", proof)
        return proof

    def prove_prediction(self, sid: bytes, eid: bytes, t: np.ndarray, h_models) -> PredictProof:
        if eid != self.eid:
            raise ProtocolError("request addressed to a different enclave")
        t = np.ascontiguousarray(t, dtype="<f4")
        p, att = self._call("prog_p", {"sid": sid, "t": t, "h_models": tuple(h_models)})
        proof = PredictProof(sid, self.eid, p, t.tobytes(), tuple(h_models), att)
        for obs in self.observers:
            obs("predict", proof)
        return proof

    def query_membership(self, sid: bytes, point: DataPoint) -> MembershipProof:
        (kid, present, h_c), att = self._call("prog_c", {"msg": "query", "sid": sid, "point": point})
        return MembershipProof(sid, self.eid, h_c, kid, present, att)

    def final_models(self) -> list[ModelParams]:
        auth = self.auth_view()
        return [
            ml.from_canonical_bytes(auth.restore_slice_checked(j, self.config.n_slices)[0], self.config.dims)
            for j in range(self.config.n_shards)
        ]


# -- transcript --------------------------------------------------------------------


def _hex(b: bytes) -> str:
    return b.hex()


def message_record(kind: str, m) -> dict:
    rec = {"type": kind, "sid": _hex(m.sid), "eid": _hex(m.eid), "attestation": _hex(m.attestation.to_bytes())}
    if kind == "receipt":
        rec.update(h_c=_hex(m.h_c), h_keys=_hex(m.h_keys))
    elif kind == "learn":
        rec.update(h_c=_hex(m.h_c), h_models=[_hex(h) for h in m.h_models])
    elif kind == "predict":
        rec.update(
            scores=list(m.p.scores), label=m.p.label, t=_hex(m.t), h_models=[_hex(h) for h in m.h_models]
        )
    elif kind == "member":
        rec.update(h_c=_hex(m.h_c), kid=m.kid, present=m.present)
    else:
        raise ValueError(f"unknown record type {kind!r}")
    return rec


def message_from_record(rec: dict):
    kind = rec["type"]
    sid, eid = bytes.fromhex(rec["sid"]), bytes.fromhex(rec["eid"])
    att = Attestation.from_bytes(bytes.fromhex(rec["attestation"]))
    if kind == "receipt":
        return Receipt(sid, eid, bytes.fromhex(rec["h_c"]), bytes.fromhex(rec["h_keys"]), att)
    if kind == "learn":
        return LearnProof(sid, eid, bytes.fromhex(rec["h_c"]), tuple(bytes.fromhex(h) for h in rec["h_models"]), att)
    if kind == "predict":
        p = Prediction(tuple(rec["scores"]), rec["label"])
        hs = tuple(bytes.fromhex(h) for h in rec["h_models"])
        return PredictProof(sid, eid, p, bytes.fromhex(rec["t"]), hs, att)
    if kind == "member":
        return MembershipProof(sid, eid, bytes.fromhex(rec["h_c"]), rec["kid"], rec["present"], att)
    raise ValueError(f"unknown record type {kind!r}")


@dataclass
class Transcript:
    records: list[dict] = field(default_factory=list)

    def add(self, kind: str, message=None, **extra) -> dict:
        rec = message_record(kind, message) if message is not None else {"type": kind}
        rec.update(extra)
        self.records.append(rec)
        return rec

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "Transcript":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def verify_transcript(transcript: Transcript, pk: bytes | None = None) -> list[tuple[int, str, bool]]:
    """Replay the verifier over a transcript offline.

    Records of type ``session`` carry the pinned pk and sid, ``challenge``
    records carry the test input sent before a prediction. An explicit ``pk``
    overrides the one in the transcript.
    """
    verifier: Verifier | None = None
    results = []
    for n, rec in enumerate(transcript.records):
        kind = rec["type"]
        if kind == "session":
            verifier = Verifier(pk or bytes.fromhex(rec["pk"]), bytes.fromhex(rec["sid"]))
            continue
        if verifier is None:
            raise ValueError("transcript does not start with a session record")
        if kind == "challenge":
            verifier.challenge_t = bytes.fromhex(rec["t"])
            continue
        msg = message_from_record(rec)
        ok = {
            "receipt": verifier.receipt,
            "learn": verifier.learn,
            "predict": verifier.predict,
            "member": verifier.membership,
        }[kind](msg)
        results.append((n, kind, ok))
    return results


# -- phases -------------------------------------------------------------------------


@dataclass
class PhaseResult:
    receipt: Receipt
    learn: LearnProof
    predict: PredictProof
    accepted: dict[str, bool]
    steps: list[sisa.StepTiming]
    affected: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.accepted.values())


class Session:
    """One owner-server session: a server, a verifier pinned to its pk, and a transcript."""

    def __init__(
        self,
        config: PoulConfig,
        enclave: Enclave | None = None,
        store_dir: str | Path | None = None,
        sid: bytes | None = None,
    ):
        self.config = config
        self.sid = sid if sid is not None else os.urandom(16)
        self.server = PoulServer(config, enclave, store_dir, self.sid)
        self.verifier = Verifier(self.server.pk, self.sid)
        self.transcript = Transcript()
        self.transcript.add("session", sid=_hex(self.sid), pk=_hex(self.server.pk), eid=_hex(self.server.eid))
        self.plan: sisa.ShardPlan | None = None
        self.points: dict[int, DataPoint] = {}
        self.receipts: list[Receipt] = []
        self._receipt_ok = False

    @classmethod
    def resume(cls, server: PoulServer, verifier: Verifier, transcript: Transcript) -> "Session":
        """Reassemble a session from a restored server and a persisted verifier."""
        self = cls.__new__(cls)
        self.config = server.config
        self.sid = verifier.pins.sid
        self.server = server
        self.verifier = verifier
        self.transcript = transcript
        self.plan = None
        self.points = {}
        self.receipts = []
        self._receipt_ok = verifier.h_c is not None
        return self

    def place(self, points: list[DataPoint]) -> list[tuple[DataPoint, int, int]]:
        """Plan shards and slices over all points; items come back in training order."""
        by_kid = {p.kid: p for p in points}
        if len(by_kid) != len(points):
            raise ValueError("duplicate data points")
        self.plan = sisa.make_plan([p.kid for p in points], self.config.n_shards, self.config.n_slices, self.config.plan_seed)
        self.points.update(by_kid)
        return [
            (by_kid[kid], j, i)
            for j, shard in enumerate(self.plan.slices)
            for i, sl in enumerate(shard, start=1)
            for kid in sl
        ]

    def _receipt(self, r: Receipt) -> bool:
        self.transcript.add("receipt", r)
        self.receipts.append(r)
        self._receipt_ok = self.verifier.receipt(r)
        return self._receipt_ok

    def _learn(self, h_c: bytes) -> tuple[LearnProof, bool]:
        lp = self.server.prove_learning(self.sid, self.server.eid, h_c)
        self.transcript.add("learn", lp)
        return lp, self.verifier.learn(lp)

    def _predict(self, t: np.ndarray) -> tuple[PredictProof, bool]:
        t_bytes = self.verifier.challenge(t)
        self.transcript.add("challenge", t=_hex(t_bytes))
        pp = self.server.prove_prediction(self.sid, self.server.eid, t, self.verifier.h_models or ())
        self.transcript.add("predict", pp)
        return pp, self.verifier.predict(pp)

    def commit_points(self, items, requester: bytes | None = None) -> tuple[list[int], Receipt, bool]:
        kids, r = self.server.commit_add(self.sid, items, requester)
        return kids, r, self._receipt(r)

    def multi_owner_commit(self, owner: bytes, items) -> tuple[Receipt, bool]:
        """Commit one owner's points; the owner checks the receipt for the resulting state."""
        _, r, ok = self.commit_points([(p, j, i) for p, j, i in items if p.owner == owner], owner)
        return r, ok

    def setup_phase(self, points: list[DataPoint], t: np.ndarray) -> PhaseResult:
        items = self.place(points)
        _, r, ok_r = self.commit_points(items)
        return self._finish(r, ok_r, t, {})

    def train_and_prove(self, t: np.ndarray) -> PhaseResult:
        """Learning and prediction steps over whatever has been committed."""
        return self._finish(self.receipts[-1], self._receipt_ok, t, {})

    def _finish(self, r: Receipt, ok_r: bool, t: np.ndarray, affected: dict) -> PhaseResult:
        lp, ok_l = self._learn(r.h_c)
        pp, ok_p = self._predict(t)
        return PhaseResult(
            r,
            lp,
            pp,
            {"receipt": ok_r, "learn": ok_l, "predict": ok_p},
            self.server.last_steps,
            affected,
        )

    def deletion_phase(self, kids: list[int], t: np.ndarray, requester: bytes | None = None) -> PhaseResult:
        affected, r = self.server.commit_del(self.sid, kids, requester)
        ok_r = self._receipt(r)
        return self._finish(r, ok_r, t, affected)

    def check_absent(self, point: DataPoint) -> tuple[MembershipProof, bool]:
        """Owner-side check that a point is no longer in the committed filter."""
        mp = self.server.query_membership(self.sid, point)
        self.transcript.add("member", mp)
        return mp, self.verifier.membership(mp) and not mp.present

