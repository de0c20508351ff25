"""In-process simulation of an attesting enclave.

An :class:`Enclave` owns a signing key, a sealing root, MAC/PRF keys and a seed
generator. None of them are reachable through its public surface; installed
programs get a :class:`EnclaveContext` that can *use* the secrets (MAC, PRF,
fresh seeds) without reading them. Every ``resume`` signs
``eid || prog_id || SHA-256(output)`` with Ed25519.
"""

from __future__ import annotations

import hashlib
import hmac
import inspect
import os
import pickle
import struct
from dataclasses import dataclass, field
from typing import Any, Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

SIGNATURE_SIZE = 64
PROG_ID_SIZE = 8
ATTESTATION_SIZE = 32 + PROG_ID_SIZE + 32 + SIGNATURE_SIZE


class EnclaveError(RuntimeError):
    pass


class SealError(EnclaveError):
    pass


def prog_id(name: str) -> bytes:
    raw = name.encode()
    if len(raw) > PROG_ID_SIZE:
        raise ValueError(f"program id {name!r} longer than {PROG_ID_SIZE} bytes")
    return raw.ljust(PROG_ID_SIZE, b"\0")


@dataclass(frozen=True)
class Program:
    name: str
    fn: Callable[["EnclaveContext", Any], tuple[Any, bytes]]
    code: bytes = b""

    def __post_init__(self):
        if not self.code:
            object.__setattr__(self, "code", inspect.getsource(self.fn).encode())

    @property
    def measurement(self) -> bytes:
        return hashlib.sha256(self.code).digest()


def measure(programs) -> bytes:
    """eid: SHA-256 over the length-prefixed (name, code) pairs in install order."""
    h = hashlib.sha256()
    for p in programs:
        for part in (p.name.encode(), p.code):
            h.update(struct.pack("<Q", len(part)))
            h.update(part)
    return h.digest()


@dataclass(frozen=True)
class Attestation:
    eid: bytes
    prog_id: bytes
    output_hash: bytes
    signature: bytes

    @property
    def message(self) -> bytes:
        return self.eid + self.prog_id + self.output_hash

    def to_bytes(self) -> bytes:
        return self.message + self.signature

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Attestation":
        if len(blob) != ATTESTATION_SIZE:
            raise ValueError(f"attestation must be {ATTESTATION_SIZE} bytes, got {len(blob)}")
        return cls(blob[:32], blob[32:40], blob[40:72], blob[72:])


def verify_signature(pk: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(pk).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def verify_attestation(pk: bytes, att: Attestation, output: bytes | None = None) -> bool:
    if output is not None and hashlib.sha256(output).digest() != att.output_hash:
        return False
    return verify_signature(pk, att.signature, att.message)


class _SeedGenerator:
    """Keyed 64-bit permutation of a counter (4-round Feistel, HMAC round function).

    A permutation never repeats an output for distinct counters.
    """

    def __init__(self, key: bytes, counter: int = 0):
        self._key = key
        self.counter = counter

    def _round(self, r: int, half: int) -> int:
        mac = hmac.digest(self._key, struct.pack("<BI", r, half), "sha256")
        return int.from_bytes(mac[:4], "little")

    def next(self) -> int:
        x = self.counter
        self.counter += 1
        if self.counter > 1 << 64:
            raise EnclaveError("seed counter exhausted")
        left, right = x >> 32, x & 0xFFFFFFFF
        for r in range(4):
            left, right = right, left ^ self._round(r, right)
        return (left << 32) | right


@dataclass
class EnclaveState:
    eid: bytes | None
    pk: bytes
    program_names: tuple[str, ...]
    mem: dict = field(default_factory=dict)
    # secrets; excluded from repr
    _sk: bytes = field(default=b"", repr=False)
    _mac_key: bytes = field(default=b"", repr=False)
    _prf_key: bytes = field(default=b"", repr=False)
    _seed_key: bytes = field(default=b"", repr=False)
    _seed_counter: int = field(default=0, repr=False)


class EnclaveContext:
    """What an installed program sees while it runs."""

    def __init__(self, enclave: "Enclave"):
        self._enclave = enclave

    @property
    def eid(self) -> bytes:
        return self._enclave.eid

    @property
    def mem(self) -> dict:
        return self._enclave._state.mem

    def mac(self, data: bytes) -> bytes:
        return hashlib.blake2b(data, key=self._enclave._state._mac_key, digest_size=32).digest()

    def mac_parts(self, *parts: bytes) -> bytes:
        h = hashlib.blake2b(key=self._enclave._state._mac_key, digest_size=32)
        for p in parts:
            h.update(p)
        return h.digest()

    @property
    def prf_key(self) -> bytes:
        # handed only to in-enclave structures (the filter), never returned by resume
        return self._enclave._state._prf_key

    def fresh_seed(self) -> int:
        return self._enclave.fresh_seed()

    def measurement(self, name: str) -> bytes:
        return self._enclave._programs[name].measurement


class Enclave:
    """A simulated enclave instance.

    ``platform_key`` stands in for the hardware root from which sealing keys
    are derived; two instances only share sealed state if they share it.
    """

    def __init__(self, platform_key: bytes | None = None, security_bits: int = 128):
        if security_bits > 128:
            raise ValueError("the simulation provides at most 128-bit security")
        sk = Ed25519PrivateKey.generate()
        pk = sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        self._platform_key = platform_key if platform_key is not None else os.urandom(32)
        self._state = EnclaveState(
            eid=None,
            pk=pk,
            program_names=(),
            _sk=sk.private_bytes(
                serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
            ),
            _mac_key=os.urandom(16),
            _prf_key=os.urandom(16),
            _seed_key=os.urandom(32),
        )
        self._sk = sk
        self._seeds = _SeedGenerator(self._state._seed_key)
        self._programs: dict[str, Program] = {}
        self.resume_calls = 0

    @classmethod
    def init(cls, security_bits: int = 128, platform_key: bytes | None = None) -> tuple["Enclave", bytes]:
        enclave = cls(platform_key=platform_key, security_bits=security_bits)
        return enclave, enclave.pk

    @property
    def pk(self) -> bytes:
        return self._state.pk

    @property
    def eid(self) -> bytes:
        if self._state.eid is None:
            raise EnclaveError("no programs installed")
        return self._state.eid

    @property
    def programs(self) -> dict[str, Program]:
        return dict(self._programs)

    def install(self, programs) -> bytes:
        programs = list(programs)
        names = [p.name for p in programs]
        if len(set(names)) != len(names):
            raise EnclaveError("duplicate program names")
        for name in names:
            prog_id(name)
        self._programs = {p.name: p for p in programs}
        self._state.eid = measure(programs)
        self._state.program_names = tuple(names)
        return self._state.eid

    def _sign(self, message: bytes) -> bytes:
        return self._sk.sign(message)

    def resume(self, eid: bytes, prog_name: str, inp: Any) -> tuple[Any, Attestation]:
        if self._state.eid is None or eid != self._state.eid:
            raise EnclaveError("unknown enclave id")
        program = self._programs.get(prog_name)
        if program is None:
            raise EnclaveError(f"program {prog_name!r} is not installed")
        self.resume_calls += 1
        result, output = program.fn(EnclaveContext(self), inp)
        pid = prog_id(prog_name)
        output_hash = hashlib.sha256(output).digest()
        return result, Attestation(eid, pid, output_hash, self._sign(eid + pid + output_hash))

    def fresh_seed(self) -> int:
        seed = self._seeds.next()
        self._state._seed_counter = self._seeds.counter
        return seed

    def sign_handshake(self, message: bytes) -> bytes:
        """Signature over a key-exchange transcript; used by the auditor channel."""
        return self._sign(b"poul-handshake" + message)

    # -- sealing -------------------------------------------------------------

    def _sealing_key(self) -> bytes:
        return HKDF(
            algorithm=hashes.SHA256(), length=16, salt=None, info=b"poul-seal" + (self._state.eid or b"")
        ).derive(self._platform_key)

    def seal_state(self) -> bytes:
        """nonce(12) || AES-GCM ciphertext || tag(16)."""
        self._state._seed_counter = self._seeds.counter
        plaintext = pickle.dumps(self._state, protocol=pickle.HIGHEST_PROTOCOL)
        nonce = os.urandom(12)
        return nonce + AESGCM(self._sealing_key()).encrypt(nonce, plaintext, self._state.eid or b"")

    def unseal_state(self, blob: bytes) -> EnclaveState:
        if len(blob) < 28:
            raise SealError("sealed blob too short")
        nonce, ct = blob[:12], blob[12:]
        try:
            plaintext = AESGCM(self._sealing_key()).decrypt(nonce, ct, self._state.eid or b"")
        except InvalidTag as exc:
            raise SealError("sealed state failed authentication") from exc
        state: EnclaveState = pickle.loads(plaintext)
        if state.eid != self._state.eid:
            raise SealError("sealed state belongs to a different enclave identity")
        self._state = state
        self._sk = Ed25519PrivateKey.from_private_bytes(state._sk)
        self._seeds = _SeedGenerator(state._seed_key, state._seed_counter)
        return state

    def state_digest(self) -> bytes:
        s = self._state
        return hashlib.sha256(
            pickle.dumps((s.eid, s.pk, s.program_names, s.mem, s._seed_counter), protocol=pickle.HIGHEST_PROTOCOL)
        ).digest()


class ChannelError(EnclaveError):
    pass


@dataclass(frozen=True)
class HandshakeMessage:
    eid: bytes
    pk: bytes
    ephemeral: bytes
    signature: bytes


class ChannelEndpoint:
    """One side of an authenticated X25519 key agreement between two enclaves.

    Each side signs its ephemeral key together with both enclave ids under its
    enclave signing key; the peer checks that signature against a pinned pk.
    """

    def __init__(self, enclave: Enclave, eid: bytes):
        self._enclave = enclave
        self.eid = eid
        self._eph = X25519PrivateKey.generate()
        self.ephemeral = self._eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        self.key: bytes | None = None

    def offer(self, peer_eid: bytes) -> HandshakeMessage:
        sig = self._enclave.sign_handshake(self.eid + peer_eid + self.ephemeral)
        return HandshakeMessage(self.eid, self._enclave.pk, self.ephemeral, sig)

    def accept(self, msg: HandshakeMessage, pinned_pk: bytes, expected_eid: bytes) -> bytes:
        if msg.pk != pinned_pk:
            raise ChannelError("peer presented an unexpected verification key")
        if msg.eid != expected_eid:
            raise ChannelError("peer enclave identity mismatch")
        if not verify_signature(pinned_pk, msg.signature, b"poul-handshake" + msg.eid + self.eid + msg.ephemeral):
            raise ChannelError("handshake signature invalid")
        shared = self._eph.exchange(X25519PublicKey.from_public_bytes(msg.ephemeral))
        ids = b"".join(sorted([self.eid, msg.eid]))
        eph = b"".join(sorted([self.ephemeral, msg.ephemeral]))
        self.key = HKDF(algorithm=hashes.SHA256(), length=32, salt=eph, info=b"poul-channel" + ids).derive(shared)
        return self.key

    def tag(self, payload: bytes) -> bytes:
        if self.key is None:
            raise ChannelError("channel not established")
        return hmac.digest(self.key, payload, "sha256")

    def check(self, payload: bytes, tag: bytes) -> bool:
        return self.key is not None and hmac.compare_digest(self.tag(payload), tag)
