"""Loop clusters on the complete graph K_n with killing kappa = n * eps.

The cluster process is realised by the packet construction: at the events
of a Poisson clock with rate beta_eps, a packet of R >= 2 uniform points is
thrown (R logarithmic-series distributed) and every block hit by the packet
is merged.  Times are in the intensity (alpha) clock.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from decimal import Decimal, localcontext
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import BadIntervalPartition, UnstableSum
from .partition import Partition, UnionFind
from .sampler import chunk_rng

log = logging.getLogger(__name__)

NU_TAIL = 1e-15


@dataclass(frozen=True, eq=False)
class PacketLaw:
    """``nu({k}) = k**-1 (eps+1)**-k / beta_eps`` for k >= 2, tabulated until the tail is below 1e-15."""

    eps: float
    beta: float
    probs: np.ndarray  # probs[i] = nu({i + 2})
    cdf: np.ndarray
    tail: float  # mass beyond the table

    @classmethod
    def make(cls, eps: float) -> "PacketLaw":
        if not eps > 0:
            raise ValueError("eps must be > 0")
        a = 1.0 / (1.0 + eps)
        beta = math.log1p(1.0 / eps) - a
        probs = []
        k = 2
        p = a * a / 2.0 / beta
        tail = 1.0
        while True:
            probs.append(p)
            # tail beyond k: sum_{j>k} a^j/(j beta) <= p * a * k/(k+1) / (1 - a)
            tail = p * a * k / ((k + 1) * (1 - a))
            if tail < NU_TAIL:
                break
            p = p * a * k / (k + 1)
            k += 1
        probs = np.asarray(probs)
        cdf = np.cumsum(probs)
        probs.setflags(write=False)
        cdf.setflags(write=False)
        return cls(eps, beta, probs, cdf, tail)

    @property
    def mean(self) -> float:
        """``E R = (1/beta) * (a/(1-a) - a)`` with ``a = 1/(eps+1)``."""
        a = 1.0 / (1.0 + self.eps)
        return (a / (1 - a) - a) / self.beta

    def pmf(self, k: int) -> float:
        if k < 2:
            return 0.0
        a = 1.0 / (1.0 + self.eps)
        return math.exp(k * math.log(a) - math.log(k)) / self.beta


def sample_packet_sizes(law: PacketLaw, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw packet sizes by inversion on the table; beyond it, by the sequential ratio recursion."""
    u = rng.random(size)
    out = 2 + np.searchsorted(law.cdf, u, side="right")
    beyond = np.flatnonzero(out >= 2 + len(law.cdf))
    a = 1.0 / (1.0 + law.eps)
    for i in beyond:
        k = 1 + len(law.cdf)
        acc = float(law.cdf[-1])
        p = float(law.probs[-1])
        while acc < u[i]:
            p = p * a * k / (k + 1)
            k += 1
            acc += p
            if p == 0.0:
                break
        out[i] = k
    return out


def sample_packet_size(law: PacketLaw, rng: np.random.Generator) -> int:
    return int(sample_packet_sizes(law, rng, 1)[0])


def chain_step(uf: UnionFind, law: PacketLaw, rng: np.random.Generator, n_points: int | None = None) -> np.ndarray:
    """One packet: draw R uniform vertices with replacement and merge the blocks they hit.

    Returns the points drawn.  ``uf`` is modified in place.
    """
    R = sample_packet_size(law, rng) if n_points is None else n_points
    pts = rng.integers(0, len(uf.parent), size=R)
    first = int(pts[0])
    for x in pts[1:]:
        uf.union(first, int(x))
    return pts


def semigroup_finer(n: int, eps: float, t: float, sizes: Sequence[int]) -> float:
    """``P(Pi_t finer than pi) = (eps/(eps+1))**t * prod (1 - |B|/(n(1+eps)))**-t``."""
    val = t * math.log(eps / (eps + 1))
    val -= t * sum(math.log1p(-s / (n * (1 + eps))) for s in sizes)
    return math.exp(val)


def semigroup_finer_continuum(eps: float, t: float, lengths: Sequence[float]) -> float:
    """Interval analogue: block masses are Lebesgue measures summing to 1."""
    val = t * math.log(eps / (eps + 1))
    val -= t * sum(math.log1p(-b / (1 + eps)) for b in lengths)
    return math.exp(val)


def packet_transition_rate(n: int, eps: float, sizes: Sequence[int], tol: float = 1e-16) -> float:
    """Merge rate of the blocks with the given sizes, by summing the packet series directly.

    ``sum_k 1/(k n^k (1+eps)^k) * sum over k-tuples covering every block of prod |B_i|``;
    the covering sum is built by a dynamic programme over the set of blocks hit.
    """
    L = len(sizes)
    full = (1 << L) - 1
    dp = np.zeros(full + 1)
    dp[0] = 1.0
    scale = 1.0 / (n * (1 + eps))
    total = 0.0
    k = 0
    while True:
        k += 1
        new = np.zeros_like(dp)
        for mask in np.flatnonzero(dp):
            for u in range(L):
                new[mask | (1 << u)] += dp[mask] * sizes[u] * scale
        dp = new
        if k >= L:
            term = dp[full] / k
            total += term
            if term < tol * total and dp.sum() < 1.0:
                break
        if k > 100000:
            break
    return total


# -- trajectories -------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Event times and the partition after each event (first entry: time 0)."""

    times: tuple[float, ...]
    partitions: tuple[Partition, ...]

    def at(self, t: float) -> Partition:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.partitions[max(i, 0)]


def run_coalescent(n: int, eps: float, t_max: float, seed: int, initial: Partition | None = None) -> Trajectory:
    """Packet chain on n vertices observed in the intensity clock up to ``t_max``."""
    if n < 2:
        raise ValueError("n must be >= 2")
    law = PacketLaw.make(eps)
    rng = chunk_rng(seed, 0)
    uf = UnionFind(n)
    if initial is not None:
        for b in initial.blocks:
            for x in b[1:]:
                uf.union(b[0], x)
    times, parts = [0.0], [Partition(tuple(uf.labels()))]
    t = 0.0
    while True:
        t += rng.exponential(1.0 / law.beta)
        if t > t_max:
            break
        before = uf.components
        chain_step(uf, law, rng)
        if uf.components != before:
            times.append(t)
            parts.append(Partition(tuple(uf.labels())))
    return Trajectory(tuple(times), tuple(parts))


def first_jump_counts(n: int, eps: float, initial: Partition, jumps: int, seed: int) -> dict[frozenset, int]:
    """Embedded jump chain out of ``initial``: how often each set of blocks (by index) merges first.

    Packets that land inside one block are no-ops and are skipped.
    """
    law = PacketLaw.make(eps)
    rng = chunk_rng(seed, 0)
    plab = np.asarray(initial.labels)
    counts: dict[frozenset, int] = {}
    done = 0
    while done < jumps:
        sizes = sample_packet_sizes(law, rng, 4096)
        for size in sizes:
            hit = frozenset(plab[rng.integers(0, n, size=int(size))].tolist())
            if len(hit) > 1:
                counts[hit] = counts.get(hit, 0) + 1
                done += 1
                if done == jumps:
                    break
    return counts


def finer_frequency(n: int, eps: float, t: float, pi: Partition, replicas: int, seed: int, initial: Partition | None = None) -> float:
    """Monte Carlo estimate of ``P(Pi_t finer than pi)`` from independent chains."""
    if initial is not None and not initial.is_finer(pi):
        return 0.0
    law = PacketLaw.make(eps)
    rng = chunk_rng(seed, 0)
    plab = np.asarray(pi.labels)
    events = rng.poisson(law.beta * t, size=replicas)
    hits = 0
    for r in range(replicas):
        ok = True
        # the chain stays finer than pi iff every packet lands inside one block of pi
        for size in sample_packet_sizes(law, rng, int(events[r])):
            b = plab[rng.integers(0, n, size=int(size))]
            if np.any(b != b[0]):
                ok = False
        hits += ok
    return hits / replicas


def check_intervals(lengths: Sequence[float]) -> np.ndarray:
    arr = np.asarray(lengths, dtype=float)
    if arr.ndim != 1 or arr.size == 0 or np.any(~(arr > 0)) or abs(arr.sum() - 1) > 1e-12:
        raise BadIntervalPartition("interval lengths must be positive and sum to 1")
    return arr


def run_continuum_coalescent(lengths: Sequence[float], eps: float, t_max: float, seed: int) -> Trajectory:
    """Interval version: blocks are unions of the initial intervals of [0, 1]."""
    arr = check_intervals(lengths)
    edges = np.cumsum(arr)[:-1]
    law = PacketLaw.make(eps)
    rng = chunk_rng(seed, 0)
    uf = UnionFind(len(arr))
    times, parts = [0.0], [Partition(tuple(uf.labels()))]
    t = 0.0
    while True:
        t += rng.exponential(1.0 / law.beta)
        if t > t_max:
            break
        R = sample_packet_size(law, rng)
        idx = np.searchsorted(edges, rng.random(R), side="right")
        before = uf.components
        for j in idx[1:]:
            uf.union(int(idx[0]), int(j))
        if uf.components != before:
            times.append(t)
            parts.append(Partition(tuple(uf.labels())))
    return Trajectory(tuple(times), tuple(parts))


def continuum_finer_frequency(lengths: Sequence[float], eps: float, t: float, block_labels: Sequence[int], replicas: int, seed: int) -> float:
    """Monte Carlo ``P(Pi_t finer than pi)`` where pi groups the initial intervals by ``block_labels``."""
    arr = check_intervals(lengths)
    edges = np.cumsum(arr)[:-1]
    lab = np.asarray(block_labels)
    law = PacketLaw.make(eps)
    rng = chunk_rng(seed, 0)
    events = rng.poisson(law.beta * t, size=replicas)
    hits = 0
    for r in range(replicas):
        ok = True
        for size in sample_packet_sizes(law, rng, int(events[r])):
            b = lab[np.searchsorted(edges, rng.random(int(size)), side="right")]
            if np.any(b != b[0]):
                ok = False
        hits += ok
    return hits / replicas


# -- isolated vertices --------------------------------------------------------


@dataclass(frozen=True)
class IsolatedLaw:
    prob: float
    factorial_moments: tuple[float, ...]  # E(S)_k for k = 1..6
    residual: float  # rounding-error estimate of the alternating sum


def _log_factorial_moment(n: int, eps: float, alpha: float, k: int) -> float:
    """``log E(S)_k = log(n!/(n-k)!) - alpha k log(1 - 1/(n(1+eps))) - alpha log(1 + k/(n eps))``."""
    return (
        math.lgamma(n + 1)
        - math.lgamma(n - k + 1)
        - alpha * k * math.log1p(-1.0 / (n * (1 + eps)))
        - alpha * math.log1p(k / (n * eps))
    )


def _isolated_terms(n: int, eps: float, alpha: float, r: int) -> list[Decimal]:
    """Signed terms ``(-1)^j C(n; r, j) (1 - 1/(n(1+eps)))^{-alpha m} (1 + m/(n eps))^{-alpha}``, m = r + j."""
    a, e = Decimal(alpha), Decimal(eps)
    N = Decimal(n)
    step = -a * (1 - 1 / (N * (1 + e))).ln()
    big = 0.0
    out = []
    for j in range(0, n - r + 1):
        m = r + j
        coef = math.comb(n, r) * math.comb(n - r, j)
        t = coef * (step * m - a * (1 + Decimal(m) / (N * e)).ln()).exp()
        out.append(t if j % 2 == 0 else -t)
        ft = float(t)
        big = max(big, ft)
        if n > 300 and j > 2 and ft < big * 1e-30:
            break
    return out


def isolated_exact(n: int, kappa: float, alpha: float, r: int) -> IsolatedLaw:
    """Probability of exactly r isolated vertices on K_n at intensity alpha.

    The inclusion-exclusion terms cancel heavily once alpha is large, so the
    sum is carried out in decimal arithmetic with enough digits to absorb the
    largest term.  Beyond n = 300 the series is cut once its terms are
    negligible.  ``UnstableSum`` is raised if the rounding residual still
    exceeds 1e-6.
    """
    if not 0 <= r <= n:
        raise ValueError("need 0 <= r <= n")
    eps = kappa / n
    moments = tuple(math.exp(_log_factorial_moment(n, eps, alpha, k)) if k <= n else 0.0 for k in range(1, 7))
    if alpha == 0:
        return IsolatedLaw(1.0 if r == n else 0.0, moments, 0.0)
    # size of the largest term, to choose the working precision
    top = max(_log_factorial_moment(n, eps, alpha, r + j) - math.lgamma(r + 1) - math.lgamma(j + 1) for j in range(n - r + 1))
    digits = 30 + max(0, int(top / math.log(10)) + 1)
    with localcontext() as ctx:
        ctx.prec = digits
        terms = _isolated_terms(n, eps, alpha, r)
        value = float(sum(terms))
        residual = float(sum(abs(t) for t in terms) * Decimal(10) ** (5 - digits))
    if residual > 1e-6:
        raise UnstableSum(f"cancellation residual {residual:.2e} exceeds 1e-6")
    if value < -1e-8 or value > 1 + 1e-8:
        log.warning("isolated-vertex probability %.3e clamped to [0, 1]", value)
    return IsolatedLaw(min(max(value, 0.0), 1.0), moments, residual)


def isolated_distribution(n: int, kappa: float, alpha: float, r_max: int | None = None) -> np.ndarray:
    r_max = n if r_max is None else min(r_max, n)
    return np.array([isolated_exact(n, kappa, alpha, r).prob for r in range(r_max + 1)])


def alpha_at(n: int, eps: float, a: float) -> float:
    """``alpha_n(a) = eps (1+eps) n (log n + a)``."""
    return eps * (1 + eps) * n * (math.log(n) + a)


# -- cover and coalescence times ----------------------------------------------


@dataclass(frozen=True)
class TimesSample:
    n: int
    eps: float
    seed: int
    T: np.ndarray  # cover times (alpha clock)
    tau: np.ndarray  # coalescence times
    n_events: np.ndarray
    snapshots: dict  # a -> (singletons, non-singleton block count) arrays at alpha_n(a)

    @property
    def scale(self) -> float:
        return self.n * self.eps * (1 + self.eps)

    @property
    def T_norm(self) -> np.ndarray:
        return self.T / self.scale - math.log(self.n)

    @property
    def tau_norm(self) -> np.ndarray:
        return self.tau / self.scale - math.log(self.n)


def gumbel_cdf(x):
    return np.exp(-np.exp(-np.asarray(x, dtype=float)))


def ks_gumbel(sample: np.ndarray) -> float:
    return float(stats.kstest(sample, gumbel_cdf).statistic)


def _one_replica(n: int, law: PacketLaw, rng: np.random.Generator, checkpoints: Sequence[float]):
    parent = list(range(n))
    size = [1] * n
    singletons = n
    blocks = n
    t = 0.0
    T = math.nan
    events = 0
    snaps = []
    cps = sorted(checkpoints)
    ci = 0
    nbig_blocks = 0  # blocks of size >= 2
    batch = 4096
    while blocks > 1:
        gaps = rng.exponential(1.0 / law.beta, size=batch)
        Rs = sample_packet_sizes(law, rng, batch)
        pts_all = rng.integers(0, n, size=int(Rs.sum()))
        pos = 0
        for gap, R in zip(gaps, Rs):
            t += gap
            while ci < len(cps) and cps[ci] < t:
                snaps.append((singletons, nbig_blocks))
                ci += 1
            events += 1
            pts = pts_all[pos : pos + R]
            pos += R
            # find root of the first point
            a = int(pts[0])
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            for x in pts[1:]:
                b = int(x)
                while parent[b] != b:
                    parent[b] = parent[parent[b]]
                    b = parent[b]
                if a == b:
                    continue
                sa, sb = size[a], size[b]
                singletons -= (sa == 1) + (sb == 1)
                nbig_blocks += 1 - (sa >= 2) - (sb >= 2)
                if sa < sb:
                    a, b = b, a
                parent[b] = a
                size[a] = sa + sb
                blocks -= 1
            if singletons == 0 and T != T:
                T = t
            if blocks == 1:
                break
    while ci < len(cps):
        snaps.append((singletons, nbig_blocks))
        ci += 1
    return T, t, events, snaps


def cover_and_coalescence_times(n: int, eps: float, replicas: int, seed: int, snapshot_a: Sequence[float] = ()) -> TimesSample:
    """Cover time T_n and coalescence time tau_n of independent packet chains started from singletons.

    ``snapshot_a`` lists values of a at which the state (number of singletons,
    number of blocks of size >= 2) is recorded, at alpha = alpha_n(a).
    """
    if n < 3:
        raise ValueError("n must be >= 3")
    law = PacketLaw.make(eps)
    cps = [alpha_at(n, eps, a) for a in snapshot_a]
    T = np.empty(replicas)
    tau = np.empty(replicas)
    ev = np.empty(replicas, dtype=np.int64)
    snaps = {a: (np.empty(replicas, np.int64), np.empty(replicas, np.int64)) for a in snapshot_a}
    order = np.argsort(cps) if cps else np.zeros(0, int)
    for r in range(replicas):
        rng = chunk_rng(seed, r)
        T[r], tau[r], ev[r], s = _one_replica(n, law, rng, cps)
        for pos, k in enumerate(order):
            a = list(snapshot_a)[k]
            snaps[a][0][r], snaps[a][1][r] = s[pos]
    return TimesSample(n, eps, seed, T, tau, ev, snaps)


def giant_plus_isolated_limit(a: float, k: int) -> float:
    """Limit probability of one block of size >= 2 plus exactly k isolated points at alpha_n(a)."""
    lam = math.exp(-a)
    return math.exp(-lam) * lam**k / math.factorial(k)
