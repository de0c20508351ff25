"""Deletable cuckoo filter over keyed fingerprints.

Buckets hold up to ``entries_per_bucket`` nonzero fingerprints; zero marks an
empty slot in the serialized form. The alternate bucket of a fingerprint is
derived from the fingerprint alone (partial-key cuckoo hashing), so items can be
relocated without the original element.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass, field

import numpy as np
import xxhash
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

_ALT_HASH_SEED = 0x9E3779B97F4A7C15
_KID_HASH_SEED = 0xC2B2AE3D27D4EB4F
_ALT_TABLE_MAX_BITS = 20


class CuckooInsertError(RuntimeError):
    """Displacement limit reached; the filter is left unchanged."""


@dataclass(frozen=True)
class FilterConfig:
    bucket_count: int = 1 << 16
    entries_per_bucket: int = 4
    fingerprint_bits: int = 12
    displacement_limit: int = 500
    eviction_seed: int = 0
    prf_key: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = self.bucket_count
        if n <= 0 or n & (n - 1):
            raise ValueError(f"bucket_count must be a power of two, got {n}")
        if not 1 <= self.fingerprint_bits <= 32:
            raise ValueError("fingerprint_bits must lie in [1, 32]")
        if self.entries_per_bucket < 1:
            raise ValueError("entries_per_bucket must be positive")

    @property
    def table_bytes(self) -> int:
        """Packed size of the bucket array: buckets * entries * bits / 8."""
        return self.bucket_count * self.entries_per_bucket * self.fingerprint_bits // 8


def fingerprint(
    kid: int,
    data: bytes,
    eid: bytes,
    prf_key: bytes,
    bits: int,
    owner: bytes | None = None,
    encryptor=None,
) -> int:
    """AES-128 over a 128-bit digest of kid||data||eid[||owner], truncated to ``bits``.

    A zero output is remapped to 1 (bias at most 2**-bits). ``encryptor`` may be
    a reusable ECB encryptor for ``prf_key`` (see :func:`prf_encryptor`).
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<Q", kid))
    h.update(data)
    h.update(eid)
    if owner:
        h.update(owner)
    block = (encryptor or prf_encryptor(prf_key)).update(h.digest())
    fp = int.from_bytes(block[:4], "little") & ((1 << bits) - 1)
    return fp or 1


def prf_encryptor(prf_key: bytes):
    return Cipher(algorithms.AES(prf_key), modes.ECB()).encryptor()


def fingerprint_many(
    kids: list[int],
    datas: list[bytes],
    eid: bytes,
    prf_key: bytes,
    bits: int,
) -> list[int]:
    """Batch form of :func:`fingerprint` (single-owner); one AES pass over all blocks."""
    blocks = []
    for kid, data in zip(kids, datas):
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack("<Q", kid))
        h.update(data)
        h.update(eid)
        blocks.append(h.digest())
    ct = Cipher(algorithms.AES(prf_key), modes.ECB()).encryptor().update(b"".join(blocks))
    words = np.frombuffer(ct, dtype="<u4")[::4] & np.uint32((1 << bits) - 1)
    return [int(w) or 1 for w in words]


def kid_hash(kid: int) -> int:
    return xxhash.xxh64_intdigest(struct.pack("<Q", kid), seed=_KID_HASH_SEED)


def fingerprint_hash(fp: int) -> int:
    return xxhash.xxh64_intdigest(struct.pack("<I", fp), seed=_ALT_HASH_SEED)


class CuckooFilter:
    def __init__(self, config: FilterConfig | None = None):
        self.config = config or FilterConfig()
        cfg = self.config
        self._mask = cfg.bucket_count - 1
        self._b = cfg.entries_per_bucket
        self.buckets: list[list[int]] = [[] for _ in range(cfg.bucket_count)]
        self.item_count = 0
        self._rng = random.Random(cfg.eviction_seed)
        if cfg.fingerprint_bits <= _ALT_TABLE_MAX_BITS:
            mask = self._mask
            self._alt = [fingerprint_hash(fp) & mask for fp in range(1 << cfg.fingerprint_bits)]
        else:
            self._alt = None

    def __len__(self) -> int:
        return self.item_count

    @property
    def load_factor(self) -> float:
        return self.item_count / (self.config.bucket_count * self._b)

    def _alt_offset(self, fp: int) -> int:
        if self._alt is not None:
            return self._alt[fp]
        return fingerprint_hash(fp) & self._mask

    def alt_index(self, i: int, fp: int) -> int:
        return i ^ self._alt_offset(fp)

    def index_pair(self, h1: int, fp: int) -> tuple[int, int]:
        i1 = h1 & self._mask
        return i1, i1 ^ self._alt_offset(fp)

    def insert(self, fp: int, h1: int) -> None:
        if not fp:
            raise ValueError("fingerprint 0 is reserved for empty slots")
        b = self._b
        i1 = h1 & self._mask
        bucket = self.buckets[i1]
        if len(bucket) < b:
            bucket.append(fp)
            self.item_count += 1
            return
        i2 = i1 ^ self._alt_offset(fp)
        bucket = self.buckets[i2]
        if len(bucket) < b:
            bucket.append(fp)
            self.item_count += 1
            return
        self._displace(fp, i1, i2)

    def _displace(self, fp: int, i1: int, i2: int) -> None:
        rng = self._rng
        i = i1 if rng.random() < 0.5 else i2
        swaps: list[tuple[int, int]] = []
        for _ in range(self.config.displacement_limit):
            bucket = self.buckets[i]
            slot = rng.randrange(len(bucket))
            fp, bucket[slot] = bucket[slot], fp
            swaps.append((i, slot))
            i = i ^ self._alt_offset(fp)
            bucket = self.buckets[i]
            if len(bucket) < self._b:
                bucket.append(fp)
                self.item_count += 1
                return
        # undo the eviction chain so the homeless fingerprint is the one we were given
        for i, slot in reversed(swaps):
            bucket = self.buckets[i]
            fp, bucket[slot] = bucket[slot], fp
        raise CuckooInsertError(
            f"displacement limit {self.config.displacement_limit} reached at load {self.load_factor:.3f}"
        )

    def query(self, fp: int, h1: int) -> bool:
        i1 = h1 & self._mask
        return fp in self.buckets[i1] or fp in self.buckets[i1 ^ self._alt_offset(fp)]

    def delete(self, fp: int, h1: int) -> bool:
        i1 = h1 & self._mask
        bucket = self.buckets[i1]
        if fp in bucket:
            bucket.remove(fp)
            self.item_count -= 1
            return True
        bucket = self.buckets[i1 ^ self._alt_offset(fp)]
        if fp in bucket:
            bucket.remove(fp)
            self.item_count -= 1
            return True
        return False

    def slot_array(self) -> np.ndarray:
        """(bucket_count, entries) array; each bucket sorted descending, zero padded."""
        cfg = self.config
        out = np.zeros((cfg.bucket_count, self._b), dtype=np.uint32)
        for i, bucket in enumerate(self.buckets):
            if bucket:
                out[i, : len(bucket)] = sorted(bucket, reverse=True)
        return out

    def header_bytes(self) -> bytes:
        cfg = self.config
        return struct.pack(
            "<4sIHHIQ",
            b"CKF1",
            cfg.bucket_count,
            cfg.entries_per_bucket,
            cfg.fingerprint_bits,
            cfg.displacement_limit,
            self.item_count,
        )

    def table_bytes(self) -> bytes:
        bits = self.config.fingerprint_bits
        flat = self.slot_array().reshape(-1)
        bitplanes = ((flat[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
        return np.packbits(bitplanes.reshape(-1), bitorder="little").tobytes()

    def serialize(self) -> bytes:
        return self.header_bytes() + self.table_bytes()

    @classmethod
    def deserialize(cls, blob: bytes, prf_key: bytes | None = None, eviction_seed: int = 0) -> "CuckooFilter":
        magic, n, b, bits, limit, count = struct.unpack_from("<4sIHHIQ", blob)
        if magic != b"CKF1":
            raise ValueError("not a serialized cuckoo filter")
        cfg = FilterConfig(n, b, bits, limit, eviction_seed=eviction_seed, prf_key=prf_key)
        flt = cls(cfg)
        raw = np.frombuffer(blob, dtype=np.uint8, offset=struct.calcsize("<4sIHHIQ"))
        planes = np.unpackbits(raw, bitorder="little")[: n * b * bits].reshape(n * b, bits)
        values = (planes.astype(np.uint64) << np.arange(bits, dtype=np.uint64)).sum(axis=1)
        slots = values.reshape(n, b)
        for i in np.flatnonzero(slots.any(axis=1)):
            flt.buckets[i] = [int(v) for v in slots[i] if v]
        flt.item_count = sum(len(bk) for bk in flt.buckets)
        if flt.item_count != count:
            raise ValueError("item count in header disagrees with bucket contents")
        return flt

    def digest(self) -> bytes:
        return hashlib.sha256(self.serialize()).digest()
