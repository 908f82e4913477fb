"""Finite weighted graphs with a killing measure.

A graph is given by symmetric conductances on its edges and a nonnegative
killing weight per vertex.  Everything downstream (loop weights, Green's
functions, cluster probabilities, samplers) is derived from the three
objects built here: the vertex weights ``lam``, the sub-stochastic
transition matrix ``P`` and the Green's function ``(lam*I - C)^-1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import (
    AllKillingZeroWithoutOverride,
    DisconnectedGraph,
    ExcessiveH,
    GraphError,
    NoKilling,
    NonPositiveConductance,
    SingularSystem,
)

# Above this size dense matrices are not materialised implicitly.
DENSE_LIMIT = 6000


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Undirected graph on vertices ``0..n-1`` with conductances and killing.

    Build instances through :func:`build_graph`, which validates the
    invariants (positive conductances, connectivity, some killing).
    """

    n: int
    edges: np.ndarray  # (m, 2) int, u < v, sorted
    conductance: np.ndarray  # (m,)
    kappa: np.ndarray  # (n,)
    name: str = field(default="", compare=False)

    @cached_property
    def conductance_matrix(self) -> sp.csr_matrix:
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        vals = np.concatenate([self.conductance, self.conductance])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    @cached_property
    def lam(self) -> np.ndarray:
        deg = np.asarray(self.conductance_matrix.sum(axis=1)).ravel()
        return _frozen(deg + self.kappa)

    @cached_property
    def P_sparse(self) -> sp.csr_matrix:
        return sp.diags(1.0 / self.lam) @ self.conductance_matrix

    @cached_property
    def C(self) -> np.ndarray:
        """Dense conductance matrix."""
        self._check_dense()
        return _frozen(self.conductance_matrix.toarray())

    @cached_property
    def P(self) -> np.ndarray:
        """Dense transition matrix ``P[x, y] = C[x, y] / lam[x]``."""
        self._check_dense()
        return _frozen(self.P_sparse.toarray())

    @cached_property
    def M(self) -> np.ndarray:
        """Dense ``lam*I - C``, the inverse of the Green's function."""
        return _frozen(np.diag(self.lam) - self.C)

    @property
    def m(self) -> int:
        return len(self.edges)

    @cached_property
    def edge_keys(self) -> np.ndarray:
        """Sorted keys ``u*n + v`` (u < v) used to map vertex pairs to edge ids."""
        return _frozen(self.edges[:, 0].astype(np.int64) * self.n + self.edges[:, 1])

    def edge_ids(self, u, v) -> np.ndarray:
        """Edge index of each pair (vectorised); -1 where the pair is not an edge."""
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        a, b = np.minimum(u, v), np.maximum(u, v)
        keys = a * self.n + b
        if self.m == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.edge_keys, keys), self.m - 1)
        return np.where(self.edge_keys[pos] == keys, pos, -1)

    def has_edge(self, u: int, v: int) -> bool:
        return bool(self.edge_ids(u, v) >= 0)

    @cached_property
    def neighbor_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded neighbour lists ``(nbr, prob)`` of shape (n, max_degree).

        Padding entries have neighbour 0 and probability 0.
        """
        P = self.P_sparse.tocsr()
        deg = np.diff(P.indptr)
        width = max(int(deg.max()) if self.n else 0, 1)
        nbr = np.zeros((self.n, width), dtype=np.int64)
        prob = np.zeros((self.n, width))
        for x in range(self.n):
            lo, hi = P.indptr[x], P.indptr[x + 1]
            nbr[x, : hi - lo] = P.indices[lo:hi]
            prob[x, : hi - lo] = P.data[lo:hi]
        return _frozen(nbr), _frozen(prob)

    @cached_property
    def degree(self) -> np.ndarray:
        return _frozen(np.diff(self.conductance_matrix.indptr))

    def _check_dense(self) -> None:
        if self.n > DENSE_LIMIT:
            raise MemoryError(f"graph with {self.n} vertices is too large for dense matrices")

    def with_kappa(self, kappa) -> "WeightedGraph":
        kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (self.n,))
        return build_graph(self.edge_list(), kappa, name=self.name)

    def edge_list(self) -> list[tuple[int, int, float]]:
        return [(int(u), int(v), float(c)) for (u, v), c in zip(self.edges, self.conductance)]

    def same_structure(self, other: "WeightedGraph") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.conductance, other.conductance)
        )

    def __eq__(self, other):
        if not isinstance(other, WeightedGraph):
            return NotImplemented
        return self.same_structure(other) and np.array_equal(self.kappa, other.kappa)

    def __hash__(self):
        return hash((self.n, self.edges.tobytes(), self.conductance.tobytes(), self.kappa.tobytes()))

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<WeightedGraph{label} n={self.n} m={self.m}>"


def build_graph(
    edges: Iterable[Sequence[float]],
    killing,
    *,
    n: int | None = None,
    allow_zero_killing: bool = False,
    name: str = "",
) -> WeightedGraph:
    """Validate ``(u, v, conductance)`` triples and killing weights into a graph.

    ``killing`` is either a scalar (uniform) or a per-vertex sequence.  With
    ``allow_zero_killing`` an all-zero killing measure is accepted only if the
    transition matrix still has spectral radius below one.
    """
    triples = [tuple(e) for e in edges]
    kap = np.asarray(killing, dtype=float)
    if n is None:
        if kap.ndim == 1:
            n = len(kap)
        else:
            n = 1 + max((max(int(t[0]), int(t[1])) for t in triples), default=0)
    kap = np.broadcast_to(kap, (n,)).astype(float)
    if np.any(~np.isfinite(kap)) or np.any(kap < 0):
        raise GraphError("killing weights must be finite and >= 0")

    seen = set()
    us, vs, cs = [], [], []
    for i, t in enumerate(triples):
        if len(t) == 2:
            u, v, c = t[0], t[1], 1.0
        else:
            u, v, c = t
        if int(u) != u or int(v) != v:
            raise GraphError(f"edges[{i}]: vertex indices must be integers")
        u, v, c = int(u), int(v), float(c)
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"edges[{i}]: vertex index out of range 0..{n - 1}")
        if u == v:
            raise GraphError(f"edges[{i}]: self-loop at vertex {u}")
        if not (c > 0) or not math.isfinite(c):
            raise NonPositiveConductance(f"edges[{i}]: conductance {c} is not > 0")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise GraphError(f"edges[{i}]: duplicate edge {key}")
        seen.add(key)
        us.append(key[0])
        vs.append(key[1])
        cs.append(c)

    e = np.column_stack([np.asarray(us, dtype=np.int64), np.asarray(vs, dtype=np.int64)]).reshape(-1, 2)
    c = np.asarray(cs, dtype=float)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, c = e[order], c[order]

    g = WeightedGraph(n=n, edges=_frozen(e), conductance=_frozen(c), kappa=_frozen(kap), name=name)

    if n > 1:
        ncomp, _ = connected_components(g.conductance_matrix, directed=False)
        if ncomp > 1:
            raise DisconnectedGraph(f"graph has {ncomp} connected components")
    if np.any(g.lam <= 0):
        raise GraphError("every vertex needs lam_x > 0")
    if not np.any(kap > 0):
        if not allow_zero_killing:
            raise AllKillingZeroWithoutOverride("all killing weights are zero")
        if spectral_radius_bound(g) >= 1 - 1e-12:
            raise NoKilling("transition matrix has spectral radius 1")
    return g


def perron_upper_bound(A, iterations: int = 50) -> float:
    """Certified upper bound on the spectral radius of a nonnegative matrix.

    Power iteration produces a positive vector v; the Collatz-Wielandt ratio
    max_x (Av)_x / v_x bounds the Perron root from above.  Gershgorin (the
    largest row sum) is the fallback.
    """
    k = A.shape[0]
    if k == 0:
        return 0.0
    gersh = float(np.asarray(A.sum(axis=1)).ravel().max())
    v = np.ones(k)
    # (A + I)/2 is aperiodic with the same Perron vector.
    for _ in range(iterations):
        w = 0.5 * (A @ v + v)
        v = w / w.max()
    if np.all(v > 0):
        return min(gersh, float(np.max((A @ v) / v)))
    return gersh


def spectral_radius_bound(g: WeightedGraph, iterations: int = 50) -> float:
    """Certified upper bound on the spectral radius of ``P``."""
    return perron_upper_bound(g.P_sparse, iterations)


def transition_matrix(g: WeightedGraph) -> np.ndarray:
    """Dense sub-stochastic transition matrix of ``g``."""
    return g.P


@dataclass(frozen=True)
class GreenFunction:
    """Green's function restricted to ``subset`` together with its log-determinant."""

    subset: tuple[int, ...]
    matrix: np.ndarray
    logdet: float

    @property
    def det(self) -> float:
        return math.exp(self.logdet)


def _subset_indices(g: WeightedGraph, F) -> np.ndarray:
    if F is None:
        return np.arange(g.n)
    idx = np.unique(np.asarray(list(F), dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= g.n):
        raise IndexError("subset contains a vertex out of range")
    return idx


def logdet_green(g: WeightedGraph, F=None) -> float:
    """``log det G^(F)`` via a Cholesky factor of ``(lam*I - C)|_F``.  Empty F gives 0."""
    idx = _subset_indices(g, F)
    if idx.size == 0:
        return 0.0
    A = g.M[np.ix_(idx, idx)]
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"(lam I - C) restricted to {idx.tolist()} is not positive definite") from exc
    return -2.0 * float(np.sum(np.log(np.diag(L))))


def green(g: WeightedGraph, F=None) -> GreenFunction:
    """Green's function ``((lam*I - C)|_F)^-1``; the whole vertex set when ``F`` is None."""
    idx = _subset_indices(g, F)
    if idx.size == 0:
        raise ValueError("subset F must be nonempty")
    A = g.M[np.ix_(idx, idx)]
    try:
        cf = scipy.linalg.cho_factor(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"(lam I - C) restricted to {idx.tolist()} is singular") from exc
    Ginv = scipy.linalg.cho_solve(cf, np.eye(len(idx)))
    Ginv = 0.5 * (Ginv + Ginv.T)
    logdet = -2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    Ginv.setflags(write=False)
    return GreenFunction(tuple(int(i) for i in idx), Ginv, logdet)


def green_diagonal_entry(g: WeightedGraph, x: int) -> float:
    """``G[x, x]`` by one sparse solve; works for graphs too large for dense algebra."""
    import scipy.sparse.linalg as spla

    M = (sp.diags(g.lam) - g.conductance_matrix).tocsc()
    rhs = np.zeros(g.n)
    rhs[x] = 1.0
    col = spla.spsolve(M, rhs)
    return float(col[x])


@dataclass(frozen=True)
class ExitKernel:
    """Exit distribution ``H[x, y]``: chain from x in ``inside`` first leaves at y in ``outside``."""

    inside: tuple[int, ...]
    outside: tuple[int, ...]
    matrix: np.ndarray

    def at(self, x: int, y: int) -> float:
        return float(self.matrix[self.inside.index(x), self.outside.index(y)])

    @property
    def killed(self) -> np.ndarray:
        """Probability of being killed before leaving, per starting vertex."""
        return 1.0 - self.matrix.sum(axis=1)


def exit_kernel(g: WeightedGraph, D) -> ExitKernel:
    """Poisson kernel of the proper subset ``D``: solves ``(I - P_DD) H = P_DDc``."""
    idx = _subset_indices(g, D)
    if idx.size == 0 or idx.size == g.n:
        raise ValueError("D must be a nonempty proper subset")
    out = np.setdiff1d(np.arange(g.n), idx)
    P = g.P
    A = np.eye(len(idx)) - P[np.ix_(idx, idx)]
    B = P[np.ix_(idx, out)]
    try:
        H = scipy.linalg.solve(A, B)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SingularSystem("I - P restricted to D is singular") from exc
    H = np.clip(H, 0.0, None)
    H.setflags(write=False)
    return ExitKernel(tuple(int(i) for i in idx), tuple(int(i) for i in out), H)


def h_transform(g: WeightedGraph, h) -> WeightedGraph:
    """Doob h-transform: ``C'[x,y] = h(x) h(y) C[x,y]``, ``kappa'(x) = h(x) [(I-P)h](x) lam(x)``.

    ``h`` must be positive and excessive, ``(P - I) h <= 0``, up to
    ``1e-12 * max(h)``.  The transformed chain has ``P'[x,y] = h(y)/h(x) P[x,y]``.
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (g.n,) or np.any(h <= 0):
        raise ValueError("h must be a positive vector with one entry per vertex")
    excess = g.P_sparse @ h - h
    tol = 1e-12 * float(h.max())
    if np.any(excess > tol):
        x = int(np.argmax(excess))
        raise ExcessiveH(f"(P - I)h = {excess[x]:.3e} > 0 at vertex {x}")
    u, v = g.edges[:, 0], g.edges[:, 1]
    cond = h[u] * h[v] * g.conductance
    kap = np.clip(-excess, 0.0, None) * h * g.lam
    return build_graph(
        [(int(a), int(b), float(c)) for a, b, c in zip(u, v, cond)],
        kap,
        n=g.n,
        allow_zero_killing=True,
        name=g.name,
    )


def complete_graph(n: int, kappa: float, conductance: float = 1.0) -> WeightedGraph:
    edges = [(i, j, conductance) for i in range(n) for j in range(i + 1, n)]
    return build_graph(edges, kappa, n=n, name=f"K{n}")


def path_graph(n: int, kappa, conductance: float = 1.0) -> WeightedGraph:
    edges = [(i, i + 1, conductance) for i in range(n - 1)]
    return build_graph(edges, kappa, n=n, name=f"P{n}")


def cycle_graph(n: int, kappa, conductance: float = 1.0) -> WeightedGraph:
    edges = [(i, (i + 1) % n, conductance) for i in range(n)]
    return build_graph(edges, kappa, n=n, name=f"C{n}")


def random_graph(rng: np.random.Generator, n: int, p_edge: float = 0.5, kappa_range=(0.1, 2.0)) -> WeightedGraph:
    """Connected random graph with random conductances and strictly positive killing."""
    edges = {}
    perm = rng.permutation(n)
    for i in range(1, n):  # random spanning tree keeps it connected
        j = int(rng.integers(0, i))
        a, b = int(perm[i]), int(perm[j])
        edges[(min(a, b), max(a, b))] = float(rng.uniform(0.2, 2.0))
    for a in range(n):
        for b in range(a + 1, n):
            if (a, b) not in edges and rng.random() < p_edge:
                edges[(a, b)] = float(rng.uniform(0.2, 2.0))
    kap = rng.uniform(*kappa_range, size=n)
    return build_graph([(a, b, c) for (a, b), c in edges.items()], kap, n=n, name=f"random{n}")


# -- JSON graph files -------------------------------------------------------


def graph_from_dict(doc: dict) -> WeightedGraph:
    """Parse ``{"n": int, "edges": [{"u", "v", "c"}], "kappa": [...]}``."""
    if not isinstance(doc, dict):
        raise GraphError("graph document must be a JSON object")
    for key in ("n", "edges", "kappa"):
        if key not in doc:
            raise GraphError(f"missing key {key!r}")
    n = doc["n"]
    if not isinstance(n, int) or n < 1:
        raise GraphError(f"n: expected a positive integer, got {n!r}")
    kappa = doc["kappa"]
    if not isinstance(kappa, list) or len(kappa) != n:
        raise GraphError(f"kappa: expected a list of {n} numbers")
    triples = []
    for i, e in enumerate(doc["edges"]):
        if not isinstance(e, dict) or not {"u", "v", "c"} <= set(e):
            raise GraphError(f"edges[{i}]: expected an object with keys u, v, c")
        triples.append((e["u"], e["v"], e["c"]))
    return build_graph(triples, kappa, n=n, name=str(doc.get("name", "")))


def graph_to_dict(g: WeightedGraph) -> dict:
    doc = {
        "n": g.n,
        "edges": [{"u": u, "v": v, "c": c} for u, v, c in g.edge_list()],
        "kappa": [float(k) for k in g.kappa],
    }
    if g.name:
        doc["name"] = g.name
    return doc


def load_graph(path) -> WeightedGraph:
    with open(Path(path)) as fh:
        return graph_from_dict(json.load(fh))


def save_graph(g: WeightedGraph, path) -> None:
    with open(Path(path), "w") as fh:
        json.dump(graph_to_dict(g), fh, indent=1)
