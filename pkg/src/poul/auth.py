"""Authenticated lineage from data slices to submodels.

Outside the enclave: ``data_store`` and ``model_link``, append-only record
files the host can read and rewrite at will. Inside: the cuckoo filter and the
key list. A data record is trusted only if its keyed MAC verifies *and* its
keyed fingerprint is in the filter; a submodel is trusted only if
``SHA-256(model || seed)`` matches, where the seed never leaves the enclave.
"""

from __future__ import annotations

import hashlib
import hmac
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .cuckoo import CuckooFilter, FilterConfig, fingerprint, kid_hash, prf_encryptor
from .data import DataPoint

KEY_ENTRY_SIZE = 52

TAG_LIVE = 0x01
TAG_DATA = 0x02
TAG_MODEL = 0x04
TAG_SEED = 0x08


class IntegrityError(Exception):
    """An out-of-enclave record failed an in-enclave check; the step halts."""


class ReplacingAttack(IntegrityError):
    pass


class DeletedOrForged(IntegrityError):
    pass


class DeletedData(IntegrityError):
    pass


class RollbackOrRelocationAttack(IntegrityError):
    pass


class InvalidatedSubmodel(IntegrityError):
    pass


class LineageError(ValueError):
    pass


@dataclass
class KeyEntry:
    kid: int
    shard: int
    slice_index: int
    live: bool = True
    data_link: int | None = None
    model_link: int | None = None
    seed: int | None = None

    _LAYOUT = struct.Struct("<QBQQQHH15x")

    def pack(self) -> bytes:
        """kid(8) tag(1) data(8) model(8) seed(8) shard(2) slice(2) reserved(15) = 52 bytes.

        The tag byte carries the live bit plus presence bits for the three
        nullable fields.
        """
        tag = (
            (TAG_LIVE if self.live else 0)
            | (TAG_DATA if self.data_link is not None else 0)
            | (TAG_MODEL if self.model_link is not None else 0)
            | (TAG_SEED if self.seed is not None else 0)
        )
        return self._LAYOUT.pack(
            self.kid,
            tag,
            self.data_link or 0,
            self.model_link or 0,
            self.seed or 0,
            self.shard,
            self.slice_index,
        )

    @classmethod
    def unpack(cls, blob: bytes) -> "KeyEntry":
        kid, tag, data, model, seed, shard, slice_index = cls._LAYOUT.unpack(blob)
        return cls(
            kid,
            shard,
            slice_index,
            live=bool(tag & TAG_LIVE),
            data_link=data if tag & TAG_DATA else None,
            model_link=model if tag & TAG_MODEL else None,
            seed=seed if tag & TAG_SEED else None,
        )


assert KeyEntry._LAYOUT.size == KEY_ENTRY_SIZE


class RecordStore:
    """Append-only file of ``kind(u8) | length(u32) | payload`` records.

    Deletion appends a tombstone naming the dead offset. ``overwrite`` is the
    raw write any host process can perform; the enclave must not rely on the
    store for integrity.
    """

    _HEAD = struct.Struct("<BI")
    LIVE, TOMBSTONE = 0, 1

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        if self.path is None:
            self._fh = io.BytesIO()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch(exist_ok=True)
            self._fh = open(self.path, "r+b")
        self.tombstones: set[int] = set()
        self._scan_tombstones()

    def _scan_tombstones(self) -> None:
        fh = self._fh
        end = fh.seek(0, os.SEEK_END)
        pos = 0
        while pos + self._HEAD.size <= end:
            fh.seek(pos)
            kind, length = self._HEAD.unpack(fh.read(self._HEAD.size))
            if kind == self.TOMBSTONE:
                (dead,) = struct.unpack("<Q", fh.read(8))
                self.tombstones.add(dead)
            pos += self._HEAD.size + length

    def _write(self, kind: int, payload: bytes) -> int:
        offset = self._fh.seek(0, os.SEEK_END)
        self._fh.write(self._HEAD.pack(kind, len(payload)) + payload)
        self._fh.flush()
        return offset

    def append(self, payload: bytes) -> int:
        return self._write(self.LIVE, payload)

    def tombstone(self, offset: int) -> None:
        self._write(self.TOMBSTONE, struct.pack("<Q", offset))
        self.tombstones.add(offset)

    def read(self, offset: int) -> bytes:
        fh = self._fh
        end = fh.seek(0, os.SEEK_END)
        if offset < 0 or offset + self._HEAD.size > end:
            raise ValueError(f"no record at offset {offset}")
        if offset in self.tombstones:
            raise ValueError(f"record at offset {offset} was deleted")
        fh.seek(offset)
        kind, length = self._HEAD.unpack(fh.read(self._HEAD.size))
        if kind != self.LIVE or offset + self._HEAD.size + length > end:
            raise ValueError(f"no live record at offset {offset}")
        return fh.read(length)

    def raw_record(self, offset: int) -> bytes:
        payload = self.read(offset)
        return self._HEAD.pack(self.LIVE, len(payload)) + payload

    def overwrite(self, offset: int, raw: bytes) -> None:
        self._fh.seek(offset)
        self._fh.write(raw)
        self._fh.flush()

    def flip_byte(self, offset: int, index: int) -> None:
        """Flip one payload byte in place (host-side tampering helper)."""
        pos = offset + self._HEAD.size + index
        self._fh.seek(pos)
        b = self._fh.read(1)
        self._fh.seek(pos)
        self._fh.write(bytes([b[0] ^ 0xFF]))
        self._fh.flush()

    @property
    def size_bytes(self) -> int:
        return self._fh.seek(0, os.SEEK_END)

    def close(self) -> None:
        if self.path is not None:
            self._fh.close()


_DATA_HEAD = struct.Struct("<Q32s")
_MODEL_HEAD = struct.Struct("<HI32s")


def model_digest(model_bytes: bytes, seed: int) -> bytes:
    """h_model = SHA-256(model || seed)."""
    return hashlib.sha256(model_bytes + struct.pack("<Q", seed)).digest()


@dataclass
class AuthState:
    """Everything that lives in enclave memory for the lineage layer."""

    filter: CuckooFilter
    n_shards: int
    n_slices: int
    multi_owner: bool = False
    config_bytes: bytes = b""
    # slices[j][i-1] is the ordered key list of slice i in shard j
    slices: list[list[list[KeyEntry]]] = field(default_factory=list)
    index: dict[int, tuple[int, int, int]] = field(default_factory=dict)
    # model_owner[j][i-1] = position in slice i holding the live model link, or None
    model_owner: list[list[int | None]] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        filter_config: FilterConfig,
        n_shards: int,
        n_slices: int,
        multi_owner: bool = False,
        config_bytes: bytes = b"",
    ) -> "AuthState":
        if n_shards < 1 or n_slices < 1:
            raise ValueError("need at least one shard and one slice")
        return cls(
            filter=CuckooFilter(filter_config),
            n_shards=n_shards,
            n_slices=n_slices,
            multi_owner=multi_owner,
            config_bytes=config_bytes,
            slices=[[[] for _ in range(n_slices)] for _ in range(n_shards)],
            model_owner=[[None] * n_slices for _ in range(n_shards)],
        )

    def entries(self):
        for shard in self.slices:
            for sl in shard:
                yield from sl

    def key_list_bytes(self) -> bytes:
        return b"".join(e.pack() for e in self.entries())

    def key_list_digest(self) -> bytes:
        h = hashlib.sha256(self.config_bytes)
        for e in self.entries():
            h.update(e.pack())
        return h.digest()


class AuthLayer:
    """In-enclave operations over :class:`AuthState` and the two host stores.

    ``ctx`` provides eid, the MAC, the PRF key and fresh seeds
    (an :class:`poul.enclave.EnclaveContext`).
    """

    def __init__(self, ctx, state: AuthState, data_store: RecordStore, model_store: RecordStore):
        self.ctx = ctx
        self.state = state
        self.data_store = data_store
        self.model_store = model_store
        self._bits = state.filter.config.fingerprint_bits
        self._prf = prf_encryptor(ctx.prf_key)
        self.fetches = 0

    # -- lookup ------------------------------------------------------------

    def entry(self, kid: int) -> KeyEntry:
        loc = self.state.index.get(kid)
        if loc is None:
            raise LineageError(f"unknown kid {kid:#018x}")
        j, i, pos = loc
        return self.state.slices[j][i - 1][pos]

    def location(self, kid: int) -> tuple[int, int, int]:
        loc = self.state.index.get(kid)
        if loc is None:
            raise LineageError(f"unknown kid {kid:#018x}")
        return loc

    def slice_owner(self, shard: int, slice_index: int) -> KeyEntry:
        """Last live entry of the slice; the last entry if none are live."""
        entries = self.state.slices[shard][slice_index - 1]
        if not entries:
            raise LineageError(f"slice {slice_index} of shard {shard} is empty")
        for e in reversed(entries):
            if e.live:
                return e
        return entries[-1]

    def live_kids(self, shard: int, upto_slice: int) -> list[int]:
        return [e.kid for sl in self.state.slices[shard][:upto_slice] for e in sl if e.live]

    def valid_slices(self, shard: int) -> list[bool]:
        return [pos is not None for pos in self.state.model_owner[shard]]

    def first_invalid_slice(self, shard: int) -> int | None:
        for i, ok in enumerate(self.valid_slices(shard), start=1):
            if not ok:
                return i
        return None

    # -- data --------------------------------------------------------------

    def _fp(self, kid: int, data: bytes, owner: bytes | None) -> int:
        return fingerprint(kid, data, self.ctx.eid, self.ctx.prf_key, self._bits, owner, self._prf)

    def append_data(self, kid: int, point: DataPoint, shard: int, slice_index: int) -> int:
        st = self.state
        if not (0 <= shard < st.n_shards and 1 <= slice_index <= st.n_slices):
            raise LineageError(f"placement ({shard}, {slice_index}) outside {st.n_shards}x{st.n_slices}")
        if kid in st.index:
            e = self.entry(kid)
            if e.live:
                raise LineageError(f"kid {kid:#018x} is already committed")
            raise LineageError(f"kid {kid:#018x} was deleted and cannot be recommitted")
        if st.model_owner[shard][slice_index - 1] is not None:
            raise LineageError("cannot add data to a slice whose submodel is already trained")
        data = point.to_bytes()
        st.filter.insert(self._fp(kid, data, point.owner), kid_hash(kid))
        dmac = self.ctx.mac_parts(struct.pack("<Q", kid), data)
        link = self.data_store.append(_DATA_HEAD.pack(kid, dmac) + data)
        entries = st.slices[shard][slice_index - 1]
        entries.append(KeyEntry(kid, shard, slice_index, live=True, data_link=link))
        st.index[kid] = (shard, slice_index, len(entries) - 1)
        return link

    def fetch_data_checked(self, kid: int) -> bytes:
        e = self.entry(kid)
        if not e.live or e.data_link is None:
            raise DeletedData(f"kid {kid:#018x} has been deleted")
        self.fetches += 1
        try:
            payload = self.data_store.read(e.data_link)
        except ValueError as exc:
            raise ReplacingAttack(f"data record for {kid:#018x} is unreadable") from exc
        if len(payload) < _DATA_HEAD.size:
            raise ReplacingAttack(f"data record for {kid:#018x} is truncated")
        rec_kid, dmac = _DATA_HEAD.unpack_from(payload)
        data = payload[_DATA_HEAD.size:]
        if not hmac.compare_digest(self.ctx.mac_parts(struct.pack("<Q", rec_kid), data), dmac):
            raise ReplacingAttack(f"MAC mismatch on data record for {kid:#018x}")
        (n_owner,) = struct.unpack_from("<H", data)
        owner = data[2:2 + n_owner] or None
        if not self.state.filter.query(self._fp(kid, data, owner), kid_hash(kid)):
            raise DeletedOrForged(f"data record for {kid:#018x} is not in the committed filter")
        # a validly MAC'd record of another point that slipped past the filter (a false positive)
        if rec_kid != kid:
            raise ReplacingAttack(f"record at the link of {kid:#018x} belongs to {rec_kid:#018x}")
        return data

    # -- submodels -----------------------------------------------------------

    def store_submodel(self, shard: int, slice_index: int, model_bytes: bytes, owning_kid: int) -> bytes:
        owner = self.slice_owner(shard, slice_index)
        if owner.kid != owning_kid:
            raise LineageError(f"kid {owning_kid:#018x} is not slice-final for slice {slice_index}")
        seed = self.ctx.fresh_seed()
        h_model = model_digest(model_bytes, seed)
        link = self.model_store.append(_MODEL_HEAD.pack(shard, slice_index, h_model) + model_bytes)
        owner.model_link = link
        owner.seed = seed
        _, _, pos = self.state.index[owning_kid]
        self.state.model_owner[shard][slice_index - 1] = pos
        return h_model

    def _model_owner_entry(self, shard: int, slice_index: int) -> KeyEntry | None:
        pos = self.state.model_owner[shard][slice_index - 1]
        return None if pos is None else self.state.slices[shard][slice_index - 1][pos]

    def restore_submodel_checked(self, kid: int) -> tuple[bytes, bytes]:
        """Return (model bytes, h_model) or halt."""
        e = self.entry(kid)
        if e.seed is None or e.model_link is None:
            raise InvalidatedSubmodel(f"no valid submodel linked to {kid:#018x}")
        try:
            payload = self.model_store.read(e.model_link)
        except ValueError as exc:
            raise RollbackOrRelocationAttack("submodel record unreadable") from exc
        if len(payload) < _MODEL_HEAD.size:
            raise RollbackOrRelocationAttack("submodel record truncated")
        shard, slice_index, stored = _MODEL_HEAD.unpack_from(payload)
        model_bytes = payload[_MODEL_HEAD.size:]
        h = model_digest(model_bytes, e.seed)
        if not hmac.compare_digest(h, stored) or (shard, slice_index) != (e.shard, e.slice_index):
            raise RollbackOrRelocationAttack(
                f"submodel for slice {e.slice_index} of shard {e.shard} does not match its seed"
            )
        return model_bytes, h

    def restore_slice_checked(self, shard: int, slice_index: int) -> tuple[bytes, bytes]:
        e = self._model_owner_entry(shard, slice_index)
        if e is None:
            raise InvalidatedSubmodel(f"slice {slice_index} of shard {shard} has no valid submodel")
        return self.restore_submodel_checked(e.kid)

    def delete_and_invalidate(self, kid: int) -> list[int]:
        e = self.entry(kid)
        if not e.live:
            raise LineageError(f"kid {kid:#018x} is already deleted")
        data = self.fetch_data_checked(kid)
        (n_owner,) = struct.unpack_from("<H", data)
        owner = data[2:2 + n_owner] or None
        if not self.state.filter.delete(self._fp(kid, data, owner), kid_hash(kid)):
            raise DeletedOrForged(f"fingerprint of {kid:#018x} missing from the filter")
        self.data_store.tombstone(e.data_link)
        e.live = False
        e.data_link = None
        shard, first = e.shard, e.slice_index
        affected = list(range(first, self.state.n_slices + 1))
        for i in affected:
            holder = self._model_owner_entry(shard, i)
            if holder is not None:
                self.model_store.tombstone(holder.model_link)
                holder.model_link = None
                holder.seed = None
                self.state.model_owner[shard][i - 1] = None
        e.model_link = None
        e.seed = None
        return affected

    # -- accounting ----------------------------------------------------------

    def key_list_size(self) -> int:
        return KEY_ENTRY_SIZE * sum(1 for _ in self.state.entries())
