"""Exact Monte Carlo sampling of the Poisson loop ensemble on a finite graph.

Loops are drawn in three stages: the length n with probability proportional
to ``tr(P^n)/n``, the base point x proportional to ``(P^n)_{xx}``, then the
path as a Markov bridge from x back to x in n steps.  Loops longer than the
plan's ``max_length`` are dropped; their total mass is bounded by the plan.

Every loop carries two marks drawn uniformly: ``alpha_mark`` in (0, alpha)
is its arrival time, so filtering on it yields the soup at any smaller
intensity, and ``thin_mark`` in (0, 1) drives the killing-thinning coupling.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import BudgetExceeded, NoKilling, NonUniformKilling, PlanMismatch
from .graph import WeightedGraph, spectral_radius_bound
from .loops import DiscreteLoop
from .partition import Partition, UnionFind

log = logging.getLogger(__name__)

CHUNK_REPLICAS = 8192
DEFAULT_EPS_TAIL = 1e-9


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LOOPSOUP_THREADS", "1")))
    except ValueError:
        return 1


# -- plan ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SamplerPlan:
    """Length and base-point laws for loops up to ``max_length``."""

    graph: WeightedGraph
    eps_tail: float
    max_length: int
    rho_bound: float
    total_mass: float
    truncated_mass: float  # sum of tr(P^n)/n for 2 <= n <= max_length
    tail_bound: float  # certified bound on the dropped mass
    length_cdf: np.ndarray  # over lengths 2..max_length
    start_cdf: np.ndarray  # row n-2: cumulative base-point law for length n

    def tv_bound(self, alpha: float) -> float:
        """Total-variation distance between the truncated and the exact soup law."""
        return -math.expm1(-alpha * self.tail_bound)


def build_plan(g: WeightedGraph, eps_tail: float = DEFAULT_EPS_TAIL, max_length: int = 20000) -> SamplerPlan:
    """Choose the smallest truncation length whose certified tail is at most ``eps_tail * total mass``."""
    if not (0 < eps_tail < 1):
        raise ValueError("eps_tail must lie in (0, 1)")
    rho = spectral_radius_bound(g)
    if rho >= 1 - 1e-12:
        raise NoKilling(f"spectral radius bound {rho:.15f} is not below 1")
    # P is similar to the symmetric S = lam^-1/2 C lam^-1/2, so traces and diagonals of P^n come from eig(S)
    s = 1.0 / np.sqrt(g.lam)
    S = s[:, None] * g.C * s[None, :]
    d, V = np.linalg.eigh(S)
    W = V * V
    mass = -float(np.sum(np.log1p(-d)))

    absd = np.abs(d)
    partial = 0.0
    diags, weights = [], []
    L = 1
    tail = math.inf
    rounding = 64 * np.finfo(float).eps * (mass + g.n)
    while True:
        L += 1
        if L > max_length:
            raise BudgetExceeded(f"tail {tail:.3e} still above {eps_tail * mass:.3e} at length {max_length}")
        pw = d**L
        diag = W @ pw
        noise = 1e-12 * (W @ absd**L)
        diag = np.where(diag > noise, diag, 0.0)
        tr = float(diag.sum())
        diags.append(diag)
        weights.append(tr / L)
        partial += tr / L
        exact_rest = max(mass - partial, 0.0) + rounding * L
        certified = g.n * rho ** (L + 1) / ((L + 1) * (1 - rho))
        tail = min(exact_rest, certified)
        if tail <= eps_tail * mass:
            break

    w = np.asarray(weights)
    D = np.asarray(diags)
    rows = D.sum(axis=1, keepdims=True)
    start_cdf = np.cumsum(np.divide(D, rows, out=np.zeros_like(D), where=rows > 0), axis=1)
    for a in (w, start_cdf):
        a.setflags(write=False)
    return SamplerPlan(
        graph=g,
        eps_tail=eps_tail,
        max_length=L,
        rho_bound=rho,
        total_mass=mass,
        truncated_mass=float(w.sum()),
        tail_bound=tail,
        length_cdf=_frozen_cdf(w),
        start_cdf=start_cdf,
    )


def _frozen_cdf(w: np.ndarray) -> np.ndarray:
    c = np.cumsum(w / w.sum())
    c[-1] = 1.0
    c.setflags(write=False)
    return c


def _check_plan(g: WeightedGraph, plan: SamplerPlan) -> None:
    if plan.graph is not g and plan.graph != g:
        raise PlanMismatch("plan was built for a different graph")


# -- batches of soups ---------------------------------------------------------


@dataclass(eq=False)
class LoopBatch:
    """Loops of many independent soups, stored flat.

    Loop i belongs to soup ``replica[i]``; its based representative is
    ``vertices[offsets[i]:offsets[i+1]]``.
    """

    n_replicas: int
    alpha: float
    replica: np.ndarray
    offsets: np.ndarray
    vertices: np.ndarray
    alpha_mark: np.ndarray
    thin_mark: np.ndarray

    @property
    def n_loops(self) -> int:
        return len(self.replica)

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def loop(self, i: int) -> tuple[int, ...]:
        return tuple(int(x) for x in self.vertices[self.offsets[i] : self.offsets[i + 1]])

    def loop_counts(self) -> np.ndarray:
        return np.bincount(self.replica, minlength=self.n_replicas)

    def select(self, keep: np.ndarray, alpha: float | None = None) -> "LoopBatch":
        """Sub-batch of the loops where ``keep`` is True (same replicas)."""
        keep = np.asarray(keep, dtype=bool)
        lens = self.lengths[keep]
        offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
        vmask = np.repeat(keep, self.lengths)
        return LoopBatch(
            self.n_replicas,
            self.alpha if alpha is None else alpha,
            self.replica[keep],
            offsets,
            self.vertices[vmask],
            self.alpha_mark[keep],
            self.thin_mark[keep],
        )

    def up_to(self, alpha: float) -> "LoopBatch":
        """The soups at intensity ``alpha`` (loops with arrival mark <= alpha)."""
        if alpha > self.alpha:
            raise ValueError("cannot extend a batch beyond its intensity")
        return self.select(self.alpha_mark <= alpha, alpha)

    def step_edge_ids(self, g: WeightedGraph) -> np.ndarray:
        """Edge index of every step, including the closing step of each loop."""
        v = self.vertices
        nxt_idx = np.arange(1, len(v) + 1)
        if self.n_loops:
            nxt_idx[self.offsets[1:] - 1] = self.offsets[:-1]
        return g.edge_ids(v, v[nxt_idx])

    def open_edges(self, g: WeightedGraph) -> np.ndarray:
        """Boolean (replicas, edges) matrix: edge crossed by at least one loop."""
        out = np.zeros((self.n_replicas, g.m), dtype=bool)
        if self.n_loops:
            eids = self.step_edge_ids(g)
            out[np.repeat(self.replica, self.lengths), eids] = True
        return out

    def soup(self, r: int, seed=None) -> "LoopSoup":
        idx = np.flatnonzero(self.replica == r)
        return LoopSoup(
            alpha=self.alpha,
            loops=tuple(DiscreteLoop(self.loop(i)) for i in idx),
            alpha_marks=tuple(float(a) for a in self.alpha_mark[idx]),
            thin_marks=tuple(float(t) for t in self.thin_mark[idx]),
            seed=seed,
        )

    @staticmethod
    def concat(parts: Sequence["LoopBatch"]) -> "LoopBatch":
        if not parts:
            raise ValueError("nothing to concatenate")
        reps, offsets = [], [np.zeros(1, dtype=np.int64)]
        base_r, base_v = 0, 0
        for b in parts:
            reps.append(b.replica + base_r)
            offsets.append(b.offsets[1:] + base_v)
            base_r += b.n_replicas
            base_v += int(b.offsets[-1])
        return LoopBatch(
            base_r,
            parts[0].alpha,
            np.concatenate(reps),
            np.concatenate(offsets),
            np.concatenate([b.vertices for b in parts]),
            np.concatenate([b.alpha_mark for b in parts]),
            np.concatenate([b.thin_mark for b in parts]),
        )


def _bridge_paths(g: WeightedGraph, x: int, lengths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample closed paths from x of the given lengths; returns a (k, max_len) array padded with -1."""
    nbr, prob = g.neighbor_table
    Lmax = int(lengths.max())
    # cols[k] is proportional to P^k e_x; each column is rescaled, only ratios within a column matter
    P = g.P_sparse
    cols = np.empty((Lmax, g.n))
    c = np.zeros(g.n)
    c[x] = 1.0
    cols[0] = c
    for k in range(1, Lmax):
        c = P @ c
        top = c.max()
        if top > 0:
            c = c / top
        cols[k] = c
    k_loops = len(lengths)
    out = np.full((k_loops, Lmax), -1, dtype=np.int64)
    out[:, 0] = x
    cur = np.full(k_loops, x, dtype=np.int64)
    for j in range(1, Lmax):
        active = np.flatnonzero(lengths > j)
        if active.size == 0:
            break
        z = cur[active]
        remaining = lengths[active] - j  # steps left after this one
        nb = nbr[z]
        w = prob[z] * cols[remaining[:, None], np.where(nb >= 0, nb, 0)]
        w[nb < 0] = 0.0
        cw = np.cumsum(w, axis=1)
        tot = cw[:, -1]
        if np.any(tot <= 0):
            raise FloatingPointError("bridge weights vanished; the plan lengths are inconsistent with the graph")
        u = rng.random(active.size) * tot
        choice = (cw < u[:, None]).sum(axis=1)
        choice = np.minimum(choice, nb.shape[1] - 1)
        nxt = nb[np.arange(active.size), choice]
        out[active, j] = nxt
        cur[active] = nxt
    return out


def _sample_chunk(g: WeightedGraph, plan: SamplerPlan, alpha: float, replicas: int, rng: np.random.Generator) -> LoopBatch:
    counts = rng.poisson(alpha * plan.truncated_mass, size=replicas) if alpha > 0 else np.zeros(replicas, np.int64)
    total = int(counts.sum())
    replica = np.repeat(np.arange(replicas), counts)
    lengths = 2 + np.searchsorted(plan.length_cdf, rng.random(total), side="right")
    lengths = np.minimum(lengths, plan.max_length)
    starts = np.empty(total, dtype=np.int64)
    for L in np.unique(lengths):
        sel = np.flatnonzero(lengths == L)
        cdf = plan.start_cdf[L - 2]
        starts[sel] = np.minimum(np.searchsorted(cdf, rng.random(sel.size), side="right"), g.n - 1)
    alpha_mark = alpha * rng.random(total)
    thin_mark = rng.random(total)

    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    vertices = np.empty(int(offsets[-1]), dtype=np.int64)
    for x in np.unique(starts):
        sel = np.flatnonzero(starts == x)
        paths = _bridge_paths(g, int(x), lengths[sel], rng)
        cols = np.arange(paths.shape[1])
        inside = cols[None, :] < lengths[sel][:, None]
        vertices[(offsets[sel][:, None] + cols[None, :])[inside]] = paths[inside]
    return LoopBatch(replicas, alpha, replica, offsets, vertices, alpha_mark, thin_mark)


def chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    """Counter-based stream for replica chunk ``chunk``; independent of how many chunks exist."""
    ss = np.random.SeedSequence(seed, spawn_key=(chunk,))
    return np.random.Generator(np.random.Philox(ss))


def _chunk_sizes(replicas: int) -> list[int]:
    return [min(CHUNK_REPLICAS, replicas - s) for s in range(0, replicas, CHUNK_REPLICAS)]


def sample_batches(g: WeightedGraph, plan: SamplerPlan, alpha: float, replicas: int, seed: int) -> Iterator[LoopBatch]:
    """The replicas of :func:`sample_batch`, one chunk at a time (bounded memory)."""
    _check_plan(g, plan)
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if replicas < 0:
        raise ValueError("replicas must be >= 0")
    sizes = _chunk_sizes(replicas)
    nthreads = min(_threads(), len(sizes))
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as ex:
            # a bounded window keeps memory flat while chunks run in parallel
            for start in range(0, len(sizes), nthreads):
                idx = range(start, min(start + nthreads, len(sizes)))
                yield from ex.map(lambda i: _sample_chunk(g, plan, alpha, sizes[i], chunk_rng(seed, i)), idx)
    else:
        for i, size in enumerate(sizes):
            yield _sample_chunk(g, plan, alpha, size, chunk_rng(seed, i))


def sample_batch(g: WeightedGraph, plan: SamplerPlan, alpha: float, replicas: int, seed: int) -> LoopBatch:
    """``replicas`` independent soups at intensity alpha, reproducible from ``seed``.

    Replicas are generated in chunks of ``CHUNK_REPLICAS``, chunk i from its own
    counter-based stream, so the result does not depend on the thread count.
    """
    parts = list(sample_batches(g, plan, alpha, replicas, seed))
    if not parts:
        return _sample_chunk(g, plan, alpha, 0, chunk_rng(seed, 0))
    return LoopBatch.concat(parts)


# -- single soups -------------------------------------------------------------


@dataclass(frozen=True)
class LoopSoup:
    """One realisation of the loop ensemble at intensity ``alpha``."""

    alpha: float
    loops: tuple[DiscreteLoop, ...]
    alpha_marks: tuple[float, ...] = ()
    thin_marks: tuple[float, ...] = ()
    seed: int | None = None

    def __post_init__(self):
        if not self.alpha_marks:
            object.__setattr__(self, "alpha_marks", tuple(0.0 for _ in self.loops))
        if not self.thin_marks:
            object.__setattr__(self, "thin_marks", tuple(0.0 for _ in self.loops))

    def __len__(self) -> int:
        return len(self.loops)

    def open_edges(self, g: WeightedGraph) -> np.ndarray:
        """Boolean mask over ``g.edges`` of the edges crossed by some loop."""
        out = np.zeros(g.m, dtype=bool)
        for lp in self.loops:
            seq = np.asarray(lp.rep)
            out[g.edge_ids(seq, np.roll(seq, -1))] = True
        return out

    def up_to(self, alpha: float) -> "LoopSoup":
        keep = [i for i, a in enumerate(self.alpha_marks) if a <= alpha]
        return LoopSoup(
            alpha,
            tuple(self.loops[i] for i in keep),
            tuple(self.alpha_marks[i] for i in keep),
            tuple(self.thin_marks[i] for i in keep),
            self.seed,
        )


def sample_soup(g: WeightedGraph, plan: SamplerPlan, alpha: float, seed: int) -> LoopSoup:
    return sample_batch(g, plan, alpha, 1, seed).soup(0, seed)


def clusters(g: WeightedGraph, soup: LoopSoup) -> Partition:
    """Connected components of the graph of open edges."""
    uf = UnionFind(g.n)
    for lp in soup.loops:
        first = lp.rep[0]
        for x in lp.rep[1:]:
            uf.union(first, x)
    return Partition(tuple(uf.labels()))


def neighborhood_clusters(n: int, soup: LoopSoup) -> Partition:
    """Clusters as fixed points of the loop-neighbourhood map A -> A plus every loop meeting A."""
    supports = [lp.support() for lp in soup.loops]
    labels = [-1] * n
    for x in range(n):
        if labels[x] >= 0:
            continue
        A = {x}
        while True:
            B = set(A)
            for s in supports:
                if s & A:
                    B |= s
            if B == A:
                break
            A = B
        for y in A:
            labels[y] = x
    return Partition(tuple(labels))


def neighborhood(soup: LoopSoup, A: Iterable[int]) -> set[int]:
    """One application of the loop-neighbourhood map."""
    A = set(A)
    out = set(A)
    for lp in soup.loops:
        s = lp.support()
        if s & A:
            out |= s
    return out


def batch_cluster_labels(g: WeightedGraph, open_edges: np.ndarray) -> np.ndarray:
    """Cluster labels for every replica at once: (replicas, n) array, label = smallest vertex in the cluster."""
    R = open_edges.shape[0]
    rr, ee = np.nonzero(open_edges)
    u = rr * g.n + g.edges[ee, 0]
    v = rr * g.n + g.edges[ee, 1]
    N = R * g.n
    A = sp.coo_matrix((np.ones(len(u), dtype=np.int8), (u, v)), shape=(N, N)).tocsr()
    _, comp = connected_components(A, directed=False)
    comp = comp.reshape(R, g.n)
    # relabel each component by its smallest vertex
    smallest = np.full(comp.max() + 1 if comp.size else 0, g.n, dtype=np.int64)
    np.minimum.at(smallest, comp.ravel(), np.tile(np.arange(g.n), R))
    return smallest[comp]


def finer_than(labels: np.ndarray, pi: Partition) -> np.ndarray:
    """Per replica: is the cluster partition finer than pi?  (No cluster meets two blocks.)"""
    plab = np.asarray(pi.labels)
    # finer iff every vertex has the same pi-label as its cluster's representative
    return np.all(plab[labels] == plab[None, :], axis=1)


# -- thinning in the killing measure ------------------------------------------


def _retention_log(g_from: WeightedGraph, g_to: WeightedGraph) -> np.ndarray:
    if not g_from.same_structure(g_to):
        raise ValueError("thinning needs the same vertices, edges and conductances")
    shift = np.asarray(g_to.kappa) - np.asarray(g_from.kappa)
    if np.ptp(shift) > 1e-12 * max(1.0, float(np.max(np.abs(shift)))):
        raise NonUniformKilling("killing levels must differ by a constant")
    if shift[0] < 0:
        raise ValueError("thinning only increases the killing")
    return np.log(g_from.lam) - np.log(g_to.lam)


def thin_batch(batch: LoopBatch, g_from: WeightedGraph, g_to: WeightedGraph) -> LoopBatch:
    """Keep each loop with probability ``prod_i lam_from(x_i)/lam_to(x_i)`` using its thin mark."""
    r = _retention_log(g_from, g_to)
    if batch.n_loops == 0:
        return batch.select(np.zeros(0, bool))
    per_vertex = r[batch.vertices]
    logkeep = np.add.reduceat(per_vertex, batch.offsets[:-1]) if len(per_vertex) else np.zeros(0)
    return batch.select(np.log(batch.thin_mark) < logkeep)


def thin_soup(soup: LoopSoup, g_from: WeightedGraph, g_to: WeightedGraph) -> LoopSoup:
    """Soup at the larger killing ``g_to`` obtained by erasing loops of ``soup`` (sampled on ``g_from``)."""
    r = _retention_log(g_from, g_to)
    keep = [i for i, lp in enumerate(soup.loops) if math.log(soup.thin_marks[i]) < float(r[list(lp.rep)].sum())]
    return LoopSoup(
        soup.alpha,
        tuple(soup.loops[i] for i in keep),
        tuple(soup.alpha_marks[i] for i in keep),
        tuple(soup.thin_marks[i] for i in keep),
        soup.seed,
    )


# -- coalescent trajectories --------------------------------------------------


def coalescent_trajectory(g: WeightedGraph, plan: SamplerPlan, alpha_grid: Sequence[float], seed: int) -> list[tuple[float, Partition]]:
    """Cluster partitions along an increasing intensity grid, all read off one soup."""
    grid = [float(a) for a in alpha_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])) or (grid and grid[0] < 0):
        raise ValueError("alpha_grid must be increasing and nonnegative")
    if not grid:
        return []
    soup = sample_soup(g, plan, grid[-1], seed)
    return [(a, clusters(g, soup.up_to(a))) for a in grid]


def batch_trajectory_finer(g: WeightedGraph, batch: LoopBatch, alpha_grid: Sequence[float], pi: Partition) -> np.ndarray:
    """Per grid point, the fraction of replicas whose clusters are finer than pi."""
    out = []
    for a in alpha_grid:
        lab = batch_cluster_labels(g, batch.up_to(a).open_edges(g))
        out.append(float(np.mean(finer_than(lab, pi))))
    return np.asarray(out)


# -- soup dumps ---------------------------------------------------------------


def dump_soup_jsonl(soup: LoopSoup, path) -> None:
    with open(path, "w") as fh:
        for lp, a in zip(soup.loops, soup.alpha_marks):
            fh.write(json.dumps({"alpha_mark": a, "loop": list(lp.rep)}) + "\n")


def load_soup_jsonl(path, alpha: float | None = None) -> LoopSoup:
    loops, marks = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                loops.append(DiscreteLoop(tuple(rec["loop"])))
                marks.append(float(rec["alpha_mark"]))
    if alpha is None:
        alpha = max(marks, default=0.0)
    return LoopSoup(alpha, tuple(loops), tuple(marks), tuple(1.0 for _ in loops))
