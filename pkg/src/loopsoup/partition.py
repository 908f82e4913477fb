"""Set partitions of ``0..n-1`` and a small union-find.

A :class:`Partition` is stored as its canonical restricted-growth string:
``labels[x]`` is the index of x's block, blocks numbered in order of their
smallest element.  Two partitions are equal iff their label tuples are.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np


class UnionFind:
    """Union by size with path halving."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.components = n

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.components -= 1
        return True

    def labels(self) -> list[int]:
        return [self.find(x) for x in range(len(self.parent))]


def _canonical(labels: Sequence[int]) -> tuple[int, ...]:
    remap: dict[int, int] = {}
    out = []
    for lab in labels:
        if lab not in remap:
            remap[lab] = len(remap)
        out.append(remap[lab])
    return tuple(out)


@dataclass(frozen=True)
class Partition:
    labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", _canonical(self.labels))

    @classmethod
    def from_blocks(cls, blocks: Iterable[Iterable[int]], n: int | None = None) -> "Partition":
        """Build from explicit blocks; raises ValueError on overlap, gaps or empty blocks."""
        blocks = [list(b) for b in blocks]
        if any(len(b) == 0 for b in blocks):
            raise ValueError("blocks must be nonempty")
        elems = [x for b in blocks for x in b]
        if n is None:
            n = max(elems) + 1 if elems else 0
        if len(elems) != len(set(elems)):
            raise ValueError("blocks overlap")
        if sorted(elems) != list(range(n)):
            raise ValueError(f"blocks do not cover 0..{n - 1} exactly")
        labels = [0] * n
        for i, b in enumerate(blocks):
            for x in b:
                labels[x] = i
        return cls(tuple(labels))

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(tuple(range(n)))

    @classmethod
    def whole(cls, n: int) -> "Partition":
        return cls((0,) * n)

    @classmethod
    def from_edges(cls, n: int, pairs: Iterable[tuple[int, int]]) -> "Partition":
        uf = UnionFind(n)
        for a, b in pairs:
            uf.union(int(a), int(b))
        return cls(tuple(uf.labels()))

    @property
    def n(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return max(self.labels) + 1 if self.labels else 0

    @property
    def blocks(self) -> list[tuple[int, ...]]:
        out: list[list[int]] = [[] for _ in range(len(self))]
        for x, lab in enumerate(self.labels):
            out[lab].append(x)
        return [tuple(b) for b in out]

    def block_of(self, x: int) -> tuple[int, ...]:
        lab = self.labels[x]
        return tuple(y for y, l in enumerate(self.labels) if l == lab)

    def block_sizes(self) -> list[int]:
        return list(np.bincount(self.labels, minlength=len(self)))

    def is_finer(self, other: "Partition") -> bool:
        """``self`` ⪯ ``other``: every block of self lies inside a block of other.  O(n)."""
        if self.n != other.n:
            raise ValueError("partitions of different sets")
        image: dict[int, int] = {}
        for a, b in zip(self.labels, other.labels):
            if image.setdefault(a, b) != b:
                return False
        return True

    def __le__(self, other: "Partition") -> bool:
        return self.is_finer(other)

    def join(self, other: "Partition") -> "Partition":
        """Finest partition coarser than both."""
        uf = UnionFind(self.n)
        for part in (self, other):
            first: dict[int, int] = {}
            for x, lab in enumerate(part.labels):
                if lab in first:
                    uf.union(first[lab], x)
                else:
                    first[lab] = x
        return Partition(tuple(uf.labels()))

    def merge(self, J: Iterable[int]) -> "Partition":
        """Merge the blocks whose indices are in ``J`` (the partition written π^{⊕J})."""
        J = set(J)
        target = min(J)
        return Partition(tuple(target if lab in J else lab for lab in self.labels))

    def restrict(self, A: Iterable[int]) -> "Partition":
        """Partition of ``sorted(A)`` (re-indexed 0..|A|-1) induced by self."""
        A = sorted(set(A))
        return Partition(tuple(self.labels[x] for x in A))

    def cross_edges(self, edges: np.ndarray) -> np.ndarray:
        """Boolean mask of edges whose endpoints lie in different blocks."""
        lab = np.asarray(self.labels)
        edges = np.asarray(edges).reshape(-1, 2)
        return lab[edges[:, 0]] != lab[edges[:, 1]]

    def to_json(self) -> list[list[int]]:
        return [list(b) for b in self.blocks]

    def __repr__(self) -> str:
        return "Partition(" + "|".join(",".join(map(str, b)) for b in self.blocks) + ")"


def restricted_growth_strings(n: int) -> Iterator[tuple[int, ...]]:
    """All set partitions of ``n`` elements as RGS, in lexicographic order."""
    if n == 0:
        yield ()
        return
    a = [0] * n

    def rec(i: int, mx: int):
        if i == n:
            yield tuple(a)
            return
        for v in range(mx + 2):
            a[i] = v
            yield from rec(i + 1, max(mx, v))

    yield from rec(1, 0)


def all_partitions(n: int) -> Iterator[Partition]:
    for rgs in restricted_growth_strings(n):
        yield Partition(rgs)


def set_partitions(items: Sequence) -> Iterator[list[list]]:
    """Set partitions of an arbitrary sequence, as lists of blocks."""
    items = list(items)
    for rgs in restricted_growth_strings(len(items)):
        k = max(rgs) + 1 if rgs else 0
        blocks: list[list] = [[] for _ in range(k)]
        for it, lab in zip(items, rgs):
            blocks[lab].append(it)
        yield blocks


def bell_number(n: int) -> int:
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]
