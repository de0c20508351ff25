"""Auditing enclave: watches prediction calls of an execution enclave.

The execution side forwards every LearnProof and PredictProof over an
authenticated channel with strictly increasing sequence numbers. The auditor
checks the attestation and, for predictions, that the served model digests
equal the latest learned ones. Results go into a hash-chained log held in the
auditor's own enclave; failures also produce signed alert reports.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass

from .enclave import (
    Attestation,
    ChannelEndpoint,
    ChannelError,
    Enclave,
    Program,
    prog_id,
    verify_attestation,
    verify_signature,
)
from .protocol import LearnProof, Pins, PoulServer, PredictProof, message_record, pack_fields

GENESIS = bytes(32)


@dataclass(frozen=True)
class CallRecord:
    seq: int
    kind: str
    body: bytes  # canonical JSON of the observed message
    tag: bytes

    @staticmethod
    def encode(kind: str, message) -> bytes:
        return json.dumps(message_record(kind, message), sort_keys=True).encode()

    def authenticated(self) -> bytes:
        return pack_fields(b"obs", struct.pack("<Q", self.seq), self.kind.encode(), self.body)


@dataclass(frozen=True)
class AuditLogEntry:
    seq: int
    kind: str
    prog: str
    input_digest: str
    output_digest: str
    signature: str
    models_digest: str
    reference_digest: str
    verdict: bool
    reason: str
    timestamp: float
    prev: str
    digest: str = ""

    def body(self) -> bytes:
        d = asdict(self)
        d.pop("digest")
        return json.dumps(d, sort_keys=True).encode()


@dataclass(frozen=True)
class AlertReport:
    seq: int
    failure: str
    entry_digest: bytes
    attestation: Attestation

    def payload(self) -> bytes:
        return pack_fields(b"alert", struct.pack("<Q", self.seq), self.failure.encode(), self.entry_digest)


@dataclass(frozen=True)
class AuditReport:
    entries: list[AuditLogEntry]
    alerts: list[AlertReport]
    count: int
    head: bytes
    attestation: Attestation

    def payload(self) -> bytes:
        return pack_fields(b"head", struct.pack("<Q", self.count), self.head)


def _digest_models(h_models) -> bytes:
    return hashlib.sha256(b"".join(h_models)).digest()


def chain_digest(prev: bytes, entry: AuditLogEntry) -> bytes:
    return hashlib.sha256(prev + entry.body()).digest()


def _measured_output(pins: Pins, kind: str, message) -> tuple[str, bytes, bytes]:
    """Program name, input digest and rebuilt output digest for an observed proof."""
    if kind == "learn":
        rebuilt = LearnProof(pins.sid, pins.eid, message.h_c, message.h_models, message.attestation)
        return "prog_t", hashlib.sha256(message.h_c).digest(), hashlib.sha256(rebuilt.payload(pins.measurements)).digest()
    rebuilt = PredictProof(pins.sid, pins.eid, message.p, message.t, message.h_models, message.attestation)
    return "prog_p", hashlib.sha256(message.t).digest(), hashlib.sha256(rebuilt.payload(pins.measurements)).digest()


def prog_audit(ctx, inp):
    mem = ctx.mem
    rec: CallRecord = inp["record"]
    channel: ChannelEndpoint = mem["channel"]
    if not channel.check(rec.authenticated(), rec.tag):
        raise ChannelError("observation failed channel authentication")
    if rec.seq != mem["next_seq"]:
        raise ChannelError(f"sequence {rec.seq} out of order, expected {mem['next_seq']}")
    mem["next_seq"] += 1
    pins: Pins = mem["pins"]
    message = inp["message"]
    prog, in_digest, out_digest = _measured_output(pins, rec.kind, message)
    sig = message.attestation.signature
    models = _digest_models(message.h_models)
    reference = mem["reference"] or GENESIS
    sig_ok = verify_signature(pins.pk, sig, pins.eid + prog_id(prog) + out_digest)
    if not sig_ok:
        verdict, reason = False, "bad-attestation"
    elif rec.kind == "learn":
        verdict, reason = True, ""
        mem["reference"] = models
    elif mem["reference"] is None:
        verdict, reason = False, "no-learned-model"
    elif models != reference:
        verdict, reason = False, "stale-model"
    else:
        verdict, reason = True, ""
    log: list = mem["log"]
    prev = log[-1].digest if log else GENESIS.hex()
    entry = AuditLogEntry(
        rec.seq,
        rec.kind,
        prog,
        in_digest.hex(),
        out_digest.hex(),
        sig.hex(),
        models.hex(),
        reference.hex(),
        verdict,
        reason,
        inp["timestamp"],
        prev,
    )
    entry = AuditLogEntry(**{**asdict(entry), "digest": chain_digest(bytes.fromhex(prev), entry).hex()})
    log.append(entry)
    return entry, entry.body()


def prog_sign(ctx, inp):
    """Signs alert and log-head payloads built by the auditor."""
    return None, inp["payload"]


AUDIT_PROGRAMS = (Program("prog_aud", prog_audit), Program("prog_sig", prog_sign))


def recompute_verdict(entry: AuditLogEntry, exec_pins: Pins) -> bool:
    """Re-derive a logged verdict from the logged digests and the pinned execution pk."""
    message = exec_pins.eid + prog_id(entry.prog) + bytes.fromhex(entry.output_digest)
    if not verify_signature(exec_pins.pk, bytes.fromhex(entry.signature), message):
        return False
    if entry.kind == "learn":
        return True
    return entry.reference_digest != GENESIS.hex() and entry.models_digest == entry.reference_digest


class ExecutionTap:
    """Execution-side interposer: tags each proof and hands it to the auditor."""

    def __init__(self, endpoint: ChannelEndpoint, sink):
        self.endpoint = endpoint
        self.sink = sink
        self.seq = 0

    def __call__(self, kind: str, proof) -> None:
        body = CallRecord.encode(kind, proof)
        rec = CallRecord(self.seq, kind, body, b"")
        rec = CallRecord(self.seq, kind, body, self.endpoint.tag(rec.authenticated()))
        self.seq += 1
        self.sink(rec, proof)


class Auditor:
    def __init__(self, exec_pins: Pins, enclave: Enclave | None = None):
        self.enclave = enclave or Enclave()
        self.eid = self.enclave.install(AUDIT_PROGRAMS)
        self.exec_pins = exec_pins
        mem = self.enclave._state.mem
        mem.update(pins=exec_pins, log=[], next_seq=0, reference=None, alerts=[])
        self.last_record: CallRecord | None = None

    @property
    def pk(self) -> bytes:
        return self.enclave.pk

    @property
    def log(self) -> list[AuditLogEntry]:
        return list(self.enclave._state.mem["log"])

    @property
    def alerts(self) -> list[AlertReport]:
        return list(self.enclave._state.mem["alerts"])

    def establish_channel(self, server: PoulServer) -> ExecutionTap:
        """Authenticated key agreement with the execution enclave; installs the tap on the server."""
        ours = ChannelEndpoint(self.enclave, self.eid)
        theirs = ChannelEndpoint(server.enclave, server.eid)
        key_a = ours.accept(theirs.offer(self.eid), self.exec_pins.pk, self.exec_pins.eid)
        key_b = theirs.accept(ours.offer(server.eid), self.pk, self.eid)
        if key_a != key_b:
            raise ChannelError("key agreement produced different keys")
        self.enclave._state.mem["channel"] = ours
        tap = ExecutionTap(theirs, self.observe_and_verify)
        server.observers.append(tap)
        return tap

    def observe_and_verify(self, record: CallRecord, message) -> AuditLogEntry:
        entry, _ = self.enclave.resume(
            self.eid, "prog_aud", {"record": record, "message": message, "timestamp": time.time()}
        )
        self.last_record = record
        if not entry.verdict:
            payload_stub = AlertReport(entry.seq, entry.reason, bytes.fromhex(entry.digest), None)
            _, att = self.enclave.resume(self.eid, "prog_sig", {"payload": payload_stub.payload()})
            self.enclave._state.mem["alerts"].append(
                AlertReport(entry.seq, entry.reason, bytes.fromhex(entry.digest), att)
            )
        return entry

    def fetch_reports(self, start: int = 0, end: int | None = None) -> AuditReport:
        """Entries in [start, end) plus alerts, with a signed digest of the log prefix up to ``end``."""
        log = self.enclave._state.mem["log"]
        end = len(log) if end is None else min(end, len(log))
        head = bytes.fromhex(log[end - 1].digest) if end else GENESIS
        stub = AuditReport([], [], end, head, None)
        _, att = self.enclave.resume(self.eid, "prog_sig", {"payload": stub.payload()})
        alerts = [a for a in self.enclave._state.mem["alerts"] if start <= a.seq < end]
        return AuditReport(log[start:end], alerts, end, head, att)


def verify_alert(auditor_pk: bytes, alert: AlertReport) -> bool:
    return verify_attestation(auditor_pk, alert.attestation, alert.payload())


def verify_report(auditor_pk: bytes, report: AuditReport, presented: list[AuditLogEntry] | None = None) -> bool:
    """Owner-side check of a fetched report.

    Verifies the auditor's signature over (count, head) and that the presented
    entries (default: the report's own) hash-chain from genesis to the head.
    A truncated or edited log fails here.
    """
    if not verify_attestation(auditor_pk, report.attestation, report.payload()):
        return False
    entries = report.entries if presented is None else presented
    if len(entries) != report.count:
        return False
    prev = GENESIS
    for entry in entries:
        if entry.prev != prev.hex():
            return False
        prev = chain_digest(prev, entry)
        if prev.hex() != entry.digest:
            return False
    return prev == report.head and all(verify_alert(auditor_pk, a) for a in report.alerts)
