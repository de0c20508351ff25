"""SHA-256 Merkle hash tree used as the comparison baseline for the filter.

Leaves are padded to a power of two with a null hash. Nodes live in a flat
heap-ordered list: node k has children 2k and 2k+1, leaves start at ``size``.
``internal_hashes`` counts node recomputations (leaf hashing is not counted).
"""

from __future__ import annotations

import hashlib

NULL_HASH = bytes(32)

_sha256 = hashlib.sha256


def leaf_hash(value: bytes) -> bytes:
    return _sha256(value).digest()


def _ceil_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (n - 1).bit_length()


class MerkleTree:
    def __init__(self, leaves: list[bytes]):
        if not leaves:
            raise ValueError("a Merkle tree needs at least one leaf")
        self.leaf_count = len(leaves)
        self.size = _ceil_pow2(len(leaves))
        self.depth = self.size.bit_length() - 1
        self.internal_hashes = 0
        nodes = [NULL_HASH] * (2 * self.size)
        nodes[self.size:self.size + len(leaves)] = [leaf_hash(v) for v in leaves]
        for k in range(self.size - 1, 0, -1):
            nodes[k] = _sha256(nodes[2 * k] + nodes[2 * k + 1]).digest()
        self.internal_hashes += self.size - 1
        self.nodes = nodes

    @classmethod
    def build(cls, leaves: list[bytes]) -> "MerkleTree":
        return cls(leaves)

    @property
    def root(self) -> bytes:
        return self.nodes[1] if self.size > 1 else self.nodes[self.size]

    def _check(self, i: int) -> None:
        if not 0 <= i < self.leaf_count:
            raise IndexError(f"leaf {i} out of range [0, {self.leaf_count})")

    def set_leaf_hash(self, i: int, node: bytes) -> bytes:
        self._check(i)
        nodes = self.nodes
        k = self.size + i
        nodes[k] = node
        k >>= 1
        while k:
            nodes[k] = _sha256(nodes[2 * k] + nodes[2 * k + 1]).digest()
            k >>= 1
        self.internal_hashes += self.depth
        return self.root

    def update_leaf(self, i: int, value: bytes) -> bytes:
        return self.set_leaf_hash(i, leaf_hash(value))

    def delete_leaf(self, i: int) -> bytes:
        return self.set_leaf_hash(i, NULL_HASH)

    def prove_membership(self, i: int) -> list[bytes]:
        """Sibling hashes from the leaf level up to (not including) the root."""
        self._check(i)
        nodes = self.nodes
        k = self.size + i
        path = []
        while k > 1:
            path.append(nodes[k ^ 1])
            k >>= 1
        return path

    def leaf_node(self, i: int) -> bytes:
        self._check(i)
        return self.nodes[self.size + i]


def verify_path(root: bytes, leaf_node: bytes, index: int, path: list[bytes]) -> bool:
    h = leaf_node
    for sibling in path:
        h = _sha256(sibling + h).digest() if index & 1 else _sha256(h + sibling).digest()
        index >>= 1
    return h == root
