"""Discrete loops and the loop measure.

A based loop is a tuple ``(x_1, ..., x_n)`` with ``n >= 2`` whose cyclically
consecutive entries are adjacent.  Its weight is ``(1/n) P[x1,x2] ... P[xn,x1]``.
A discrete loop is the rotation class of a based loop; it is represented
here by its lexicographically least rotation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from .errors import BudgetExceeded, NonAdjacentStep, NotPrimitive, NumericalMismatch, SingularSystem, TooLarge
from .graph import WeightedGraph, logdet_green, perron_upper_bound
from .partition import set_partitions


def least_rotation(seq: Sequence[int]) -> int:
    """Offset of the lexicographically least rotation (Booth's algorithm)."""
    s = list(seq) * 2
    n2 = len(s)
    f = [-1] * n2
    k = 0
    for j in range(1, n2):
        sj = s[j]
        i = f[j - k - 1]
        while i != -1 and sj != s[k + i + 1]:
            if sj < s[k + i + 1]:
                k = j - i - 1
            i = f[i]
        if sj != s[k + i + 1]:
            if sj < s[k]:
                k = j
            f[j - k] = -1
        else:
            f[j - k] = i + 1
    return k


def canonical_rotation(seq: Sequence[int]) -> tuple[int, ...]:
    seq = tuple(int(x) for x in seq)
    k = least_rotation(seq)
    return seq[k:] + seq[:k]


def smallest_period(seq: Sequence[int]) -> int:
    """Smallest p dividing len(seq) such that seq is p-periodic (prefix function)."""
    n = len(seq)
    pi = [0] * n
    for i in range(1, n):
        k = pi[i - 1]
        while k and seq[i] != seq[k]:
            k = pi[k - 1]
        if seq[i] == seq[k]:
            k += 1
        pi[i] = k
    p = n - pi[-1] if n else 0
    return p if p and n % p == 0 else n


@dataclass(frozen=True)
class DiscreteLoop:
    """Rotation class of a based loop, stored as its least rotation."""

    rep: tuple[int, ...]

    def __post_init__(self):
        if len(self.rep) < 2:
            raise ValueError("loops have length >= 2")
        object.__setattr__(self, "rep", canonical_rotation(self.rep))

    @property
    def length(self) -> int:
        return len(self.rep)

    @property
    def period(self) -> int:
        return smallest_period(self.rep)

    @property
    def multiplicity(self) -> int:
        return len(self.rep) // self.period

    @property
    def is_primitive(self) -> bool:
        return self.multiplicity == 1

    def rotations(self) -> list[tuple[int, ...]]:
        """The ``period`` distinct based loops in this class."""
        r = self.rep
        return [r[i:] + r[:i] for i in range(self.period)]

    def support(self) -> frozenset[int]:
        return frozenset(self.rep)

    def __len__(self) -> int:
        return len(self.rep)


def primitive_root(loop: DiscreteLoop) -> tuple[DiscreteLoop, int]:
    """``(eta, m)`` with ``loop`` equal to the m-th power of the primitive loop eta."""
    p = loop.period
    return DiscreteLoop(loop.rep[:p]), len(loop.rep) // p


def _step_product(g: WeightedGraph, seq: Sequence[int]) -> float:
    seq = np.asarray(seq, dtype=np.int64)
    nxt = np.roll(seq, -1)
    if np.any(g.edge_ids(seq, nxt) < 0):
        bad = int(np.argmax(g.edge_ids(seq, nxt) < 0))
        raise NonAdjacentStep(f"step {int(seq[bad])} -> {int(nxt[bad])} is not an edge")
    P = g.P_sparse
    vals = np.asarray(P[seq, nxt]).ravel()
    # exact product in a fixed order so every rotation gives the same multiset of factors
    return math.prod(sorted(vals.tolist()))


def based_weight(g: WeightedGraph, loop: Sequence[int]) -> float:
    """``(1/n) * P[x1,x2] * ... * P[xn,x1]`` for a based loop of length n >= 2."""
    if len(loop) < 2:
        raise ValueError("loops have length >= 2")
    return _step_product(g, loop) / len(loop)


def discrete_weight(g: WeightedGraph, loop: DiscreteLoop) -> float:
    """Loop-measure mass of a rotation class: ``(1/m) * prod of P-steps``, m the multiplicity."""
    return _step_product(g, loop.rep) / loop.multiplicity


def validate_loop(g: WeightedGraph, loop: Sequence[int]) -> None:
    _step_product(g, loop)


def crossing_counts(loop: DiscreteLoop | Sequence[int]) -> tuple[dict[int, int], dict[tuple[int, int], int]]:
    """Visits per vertex and jumps per undirected edge over the full representative."""
    seq = loop.rep if isinstance(loop, DiscreteLoop) else tuple(loop)
    nv: dict[int, int] = {}
    ne: dict[tuple[int, int], int] = {}
    n = len(seq)
    for i, x in enumerate(seq):
        nv[x] = nv.get(x, 0) + 1
        y = seq[(i + 1) % n]
        e = (min(x, y), max(x, y))
        ne[e] = ne.get(e, 0) + 1
    return nv, ne


def primitive_inclusion_prob(g: WeightedGraph, eta: DiscreteLoop, alpha: float) -> float:
    """Probability that some power of the primitive loop ``eta`` is in the soup at intensity alpha."""
    if not eta.is_primitive:
        raise NotPrimitive(f"{eta.rep} is the {eta.multiplicity}-th power of a shorter loop")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    mu = discrete_weight(g, eta)
    return -math.expm1(alpha * math.log1p(-mu))


def total_mass(g: WeightedGraph, F=None, rtol: float = 1e-10) -> float:
    """Loop-measure mass of all loops inside F (default: whole graph).

    Evaluated as ``-log det(I - P|_F)`` and as ``log(det G^(F) * prod lam_F)``;
    the two must agree within ``rtol`` relative.
    """
    idx = np.arange(g.n) if F is None else np.unique(np.asarray(list(F), dtype=np.int64))
    if idx.size == 0:
        raise ValueError("F must be nonempty")
    PF = np.asarray(g.P)[np.ix_(idx, idx)]
    sign, ld = np.linalg.slogdet(np.eye(len(idx)) - PF)
    if sign <= 0:
        raise SingularSystem("I - P restricted to F is singular")
    via_P = -ld
    via_G = logdet_green(g, idx) + float(np.sum(np.log(g.lam[idx])))
    if abs(via_P - via_G) > rtol * max(abs(via_P), abs(via_G)) + 1e-14:
        raise NumericalMismatch(f"loop mass evaluations disagree: {via_P!r} vs {via_G!r}")
    return via_G


@dataclass(frozen=True)
class EnumeratedMass:
    value: float
    tail_bound: float
    max_length: int


def enumerate_mass(g: WeightedGraph, F=None, max_length: int = 8, budget: int = 10**8) -> EnumeratedMass:
    """Brute-force sum of based-loop weights over all closed walks in F of length <= max_length.

    Walks are enumerated explicitly (one array entry per walk prefix), so the
    result does not use matrix powers.  Also returns a rigorous bound on the
    neglected mass of longer loops.
    """
    idx = np.arange(g.n) if F is None else np.unique(np.asarray(list(F), dtype=np.int64))
    PF = np.asarray(g.P)[np.ix_(idx, idx)]
    k = len(idx)
    dmax = int((PF > 0).sum(axis=1).max()) if k else 0
    est = sum(k * dmax**L for L in range(1, max_length + 1)) if max_length >= 1 else 0
    if est > budget:
        raise BudgetExceeded(f"about {est:.3g} walk prefixes exceed the budget {budget:.3g}")

    nbrs = [np.flatnonzero(PF[x]) for x in range(k)]
    total = 0.0
    if max_length >= 2 and k:
        start = np.arange(k)
        cur = np.arange(k)
        w = np.ones(k)
        for L in range(1, max_length + 1):
            # extend every prefix by one step
            counts = np.array([len(nbrs[c]) for c in range(k)])[cur]
            rep = np.repeat(np.arange(len(cur)), counts)
            nxt = np.concatenate([nbrs[c] for c in cur]) if len(cur) else np.zeros(0, int)
            w = w[rep] * PF[cur[rep], nxt]
            start = start[rep]
            cur = nxt
            if L >= 2:
                closed = cur == start
                total += float(np.sum(w[closed])) / L
    rho = perron_upper_bound(PF)
    L1 = max_length + 1
    tail = k * rho**L1 / (L1 * (1 - rho)) if rho < 1 else math.inf
    return EnumeratedMass(total, tail, max_length)


def enumerate_based_loops(g: WeightedGraph, max_length: int, F=None) -> Iterator[tuple[int, ...]]:
    """Every based loop of length 2..max_length with steps along edges (inside F if given)."""
    allowed = set(range(g.n)) if F is None else set(int(x) for x in F)
    P = g.P_sparse.tocsr()
    nbrs = {x: [int(y) for y in P.indices[P.indptr[x]:P.indptr[x + 1]] if int(y) in allowed] for x in allowed}

    def walk(path):
        L = len(path)
        if L >= 2 and path[0] in nbrs[path[-1]]:
            yield tuple(path)
        if L < max_length:
            for y in nbrs[path[-1]]:
                path.append(y)
                yield from walk(path)
                path.pop()

    for x in sorted(allowed):
        yield from walk([x])


def enumerate_discrete_loops(g: WeightedGraph, max_length: int, F=None) -> set[DiscreteLoop]:
    return {DiscreteLoop(b) for b in enumerate_based_loops(g, max_length, F)}


# -- alpha-permanent with zero diagonal ---------------------------------------

MAX_PERMANENT_SIZE = 10


def _cycle_weights(A, r: int) -> dict[int, object]:
    """Sum over directed Hamiltonian cycles of each subset (bitmask, size >= 2).

    Cycles are rooted at the smallest element s0 of the subset; ``dp[mask][v]``
    sums the paths that leave s0, visit exactly ``mask`` and stop at v.
    """
    cyc: dict[int, object] = {}
    for s0 in range(r):
        base = 1 << s0
        dp: dict[int, dict[int, object]] = {base: {s0: 1}}
        # masks over s0 and larger elements, processed in increasing popcount order
        others = list(range(s0 + 1, r))
        for size in range(1, len(others) + 1):
            for combo in itertools.combinations(others, size):
                mask = base
                for v in combo:
                    mask |= 1 << v
                row: dict[int, object] = {}
                closing = 0
                for v in combo:
                    acc = 0
                    for u, val in dp[mask ^ (1 << v)].items():
                        acc = acc + val * A[u][v]
                    row[v] = acc
                    closing = closing + acc * A[v][s0]
                dp[mask] = row
                cyc[mask] = closing
    return cyc


def alpha_permanent_zero_diag(A, alpha, check: bool | None = None):
    """Sum over fixed-point-free permutations s of ``alpha**cycles(s) * prod A[i, s(i)]``.

    Evaluated by a dynamic programme over cycle covers of subsets (exact with
    Fraction inputs).  With ``check`` (default for r <= 7) the partition-form
    expression is evaluated too and the two must agree.
    """
    A = [list(row) for row in (A.tolist() if isinstance(A, np.ndarray) else A)]
    r = len(A)
    if any(len(row) != r for row in A):
        raise ValueError("matrix must be square")
    if r < 2:
        raise ValueError("need r >= 2")
    if r > MAX_PERMANENT_SIZE:
        raise TooLarge(f"r = {r} exceeds the factorial guard {MAX_PERMANENT_SIZE}")
    cyc = _cycle_weights(A, r)
    full = (1 << r) - 1
    h: dict[int, object] = {0: 1}
    for S in range(1, full + 1):
        low = S & -S
        rest = S ^ low
        total = 0
        sub = rest
        while True:
            C = sub | low
            if C != low and C in cyc:
                total = total + alpha * cyc[C] * h[S ^ C]
            if sub == 0:
                break
            sub = (sub - 1) & rest
        h[S] = total
    value = h[full]
    if check is None:
        check = r <= 7
    if check:
        other = alpha_permanent_partition_form(A, alpha)
        exact = all(isinstance(x, (int, Fraction)) for row in A for x in row) and isinstance(alpha, (int, Fraction))
        if exact:
            if value != other:
                raise NumericalMismatch(f"permanent forms disagree: {value} vs {other}")
        elif abs(value - other) > 1e-12 * max(1.0, abs(value)):
            raise NumericalMismatch(f"permanent forms disagree: {value} vs {other}")
    return value


def alpha_permanent_partition_form(A, alpha):
    """Sum over partitions into blocks of size >= 2 of ``alpha**k`` times, per block,
    ``(1/|b|) * sum over orderings of the block of the cyclic product``."""
    A = [list(row) for row in (A.tolist() if isinstance(A, np.ndarray) else A)]
    r = len(A)
    exact = all(isinstance(x, (int, Fraction)) for row in A for x in row) and isinstance(alpha, (int, Fraction))
    block_cache: dict[tuple[int, ...], object] = {}

    def block_value(b: tuple[int, ...]):
        if b not in block_cache:
            s = 0
            for order in itertools.permutations(b):
                prod = 1
                for i in range(len(order)):
                    prod = prod * A[order[i]][order[(i + 1) % len(order)]]
                s = s + prod
            block_cache[b] = Fraction(s, len(b)) if exact else s / len(b)
        return block_cache[b]

    total = 0
    for blocks in set_partitions(range(r)):
        if any(len(b) < 2 for b in blocks):
            continue
        term = alpha ** len(blocks)
        for b in blocks:
            term = term * block_value(tuple(b))
        total = total + term
    return total
