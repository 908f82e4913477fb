"""Closed-form cluster probabilities from Green's-function determinants.

All alpha-th powers are formed as ``exp(alpha * difference of log-determinants)``;
determinants of Green's functions underflow long before their ratios do.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EdgeInsideBlock,
    GraphError,
    JTooSmall,
    NumericalMismatch,
    OutOfRange,
    SingularSystem,
    TooLargeForExactSum,
)
from .graph import WeightedGraph, exit_kernel, green, green_diagonal_entry, logdet_green
from .loops import total_mass
from .partition import Partition, set_partitions

log = logging.getLogger(__name__)

MAX_EXACT_SUM_VERTICES = 12
CLAMP_WARN = 1e-9


class _LogDetCache:
    """Memoised ``log det G^(F)`` keyed by frozenset(F)."""

    def __init__(self, g: WeightedGraph):
        self.g = g
        self._cache: dict[frozenset, float] = {}

    def __call__(self, F: Iterable[int]) -> float:
        key = frozenset(int(x) for x in F)
        if key not in self._cache:
            self._cache[key] = logdet_green(self.g, sorted(key)) if key else 0.0
        return self._cache[key]


def _check_alpha(alpha: float) -> None:
    if not alpha >= 0:
        raise ValueError("alpha must be >= 0")


def _clamp_probability(p: float, what: str) -> float:
    if p < 0.0 or p > 1.0:
        excess = -p if p < 0 else p - 1.0
        if excess > CLAMP_WARN:
            log.warning("%s = %.3e lies outside [0, 1] by %.3e; clamped", what, p, excess)
        p = min(max(p, 0.0), 1.0)
    return p


def log_prob_finer(g: WeightedGraph, pi: Partition, alpha: float, pi0: Partition | None = None, *, _ld=None) -> float:
    """``log P_pi0(C_alpha finer than pi)``; ``-inf`` if pi0 is not finer than pi."""
    _check_alpha(alpha)
    if pi.n != g.n:
        raise ValueError("partition and graph have different vertex counts")
    if pi0 is not None and not pi0.is_finer(pi):
        return -math.inf
    ld = _ld or _LogDetCache(g)
    diff = sum(ld(b) for b in pi.blocks) - ld(range(g.n))
    return alpha * diff


def prob_finer(g: WeightedGraph, pi: Partition, alpha: float, pi0: Partition | None = None) -> float:
    """Probability that every loop at intensity alpha stays inside one block of pi."""
    return math.exp(log_prob_finer(g, pi, alpha, pi0))


def prob_equal(g: WeightedGraph, pi: Partition, alpha: float, pi0: Partition | None = None) -> float:
    """``P_pi0(C_alpha = pi)`` by Moebius inversion over the refinements of pi.

    The alternating sum factorizes over the blocks of pi, so each block is
    expanded separately over the partitions of its pi0-atoms.
    """
    _check_alpha(alpha)
    if g.n > MAX_EXACT_SUM_VERTICES:
        raise TooLargeForExactSum(f"|X| = {g.n} exceeds {MAX_EXACT_SUM_VERTICES}")
    if pi0 is None:
        pi0 = Partition.singletons(g.n)
    if not pi0.is_finer(pi):
        return 0.0
    ld = _LogDetCache(g)
    atoms_of = {}
    for atom in pi0.blocks:
        atoms_of.setdefault(pi.labels[atom[0]], []).append(atom)
    value = math.exp(log_prob_finer(g, pi, alpha, _ld=ld))
    for lab, block in enumerate(pi.blocks):
        atoms = atoms_of[lab]
        ref = ld(block)
        s = 0.0
        for sigma in set_partitions(atoms):
            k = len(sigma)
            merged = sum(ld(itertools.chain.from_iterable(b)) for b in sigma)
            s += (-1) ** (k - 1) * math.factorial(k - 1) * math.exp(alpha * (merged - ref))
        value *= s
    return _clamp_probability(value, "prob_equal")


def transition_rate(g: WeightedGraph, pi: Partition, J: Sequence[int]) -> float:
    """Rate at which the blocks indexed by J (in ``pi.blocks`` order) merge into one."""
    J = sorted(set(int(j) for j in J))
    if len(J) < 2:
        raise JTooSmall("J needs at least two block indices")
    blocks = pi.blocks
    if J[-1] >= len(blocks) or J[0] < 0:
        raise IndexError("block index out of range")
    ld = _LogDetCache(g)
    rate = 0.0
    for size in range(len(J)):
        for I in itertools.combinations(J, size):
            keep = [u for u in J if u not in I]
            rate += (-1) ** size * ld(itertools.chain.from_iterable(blocks[u] for u in keep))
    # the rate is a loop mass; only rounding can push it below zero
    return max(rate, 0.0)


def transition_rate_complete(n: int, kappa: float, sizes: Sequence[int]) -> float:
    """Closed-form merge rate on K_n (unit conductances, uniform killing kappa) for blocks of the given sizes."""
    sizes = list(sizes)
    if len(sizes) < 2:
        raise JTooSmall("J needs at least two blocks")
    rate = 0.0
    idx = range(len(sizes))
    for size in range(len(sizes)):
        for I in itertools.combinations(idx, size):
            tot = sum(sizes[u] for u in idx if u not in I)
            rate += (-1) ** (size + 1) * math.log1p(-tot / (n + kappa))
    return rate


def complete_logdet_green(n: int, kappa: float, size: int) -> float:
    """``log det G^(F)`` on K_n for any F of the given size."""
    if size == 0:
        return 0.0
    return -((size - 1) * math.log(n + kappa) + math.log(n + kappa - size))


# -- exit-distribution form ---------------------------------------------------


@dataclass(frozen=True)
class ExitBoundaryMatrix:
    """Matrix indexed by the union of inner block boundaries.

    ``boundary[i]`` is a vertex, ``block[i]`` the index of its block.
    """

    boundary: tuple[int, ...]
    block: tuple[int, ...]
    matrix: np.ndarray


def exit_boundary_matrix(g: WeightedGraph, pi: Partition) -> ExitBoundaryMatrix:
    labels = np.asarray(pi.labels)
    cross = pi.cross_edges(g.edges)
    ends = np.unique(g.edges[cross].ravel()) if cross.any() else np.zeros(0, dtype=np.int64)
    boundary = tuple(int(x) for x in ends)
    pos = {x: i for i, x in enumerate(boundary)}
    Hm = np.eye(len(boundary))
    for lab, block in enumerate(pi.blocks):
        inner = [x for x in block if x in pos]
        if not inner:
            continue
        ker = exit_kernel(g, block)
        rows = [ker.inside.index(x) for x in inner]
        for j, y in enumerate(ker.outside):
            if y in pos:
                col = ker.matrix[rows, j]
                for x, v in zip(inner, col):
                    Hm[pos[x], pos[y]] = -v
    Hm.setflags(write=False)
    return ExitBoundaryMatrix(boundary, tuple(int(labels[x]) for x in boundary), Hm)


def prob_finer_exit(g: WeightedGraph, pi: Partition, alpha: float, check: bool = True) -> float:
    """``det(H^(pi))**alpha``; with ``check`` it must agree with :func:`prob_finer` within 1e-10."""
    _check_alpha(alpha)
    ebm = exit_boundary_matrix(g, pi)
    if len(ebm.boundary) == 0:
        value = 1.0
    else:
        sign, ld = np.linalg.slogdet(ebm.matrix)
        if sign <= 0:
            raise SingularSystem("exit boundary matrix has nonpositive determinant")
        value = math.exp(alpha * ld)
    if check:
        other = prob_finer(g, pi, alpha)
        if abs(value - other) > 1e-10:
            raise NumericalMismatch(f"exit form {value!r} differs from determinant form {other!r}")
    return value


# -- closed edges -------------------------------------------------------------


def _edge_indices(g: WeightedGraph, E) -> np.ndarray:
    E = np.asarray(list(E), dtype=np.int64).reshape(-1, 2)
    ids = g.edge_ids(E[:, 0], E[:, 1])
    if np.any(ids < 0):
        bad = E[int(np.argmax(ids < 0))]
        raise GraphError(f"({int(bad[0])}, {int(bad[1])}) is not an edge")
    return np.unique(ids)


def logdet_green_closed(g: WeightedGraph, E) -> float:
    """``log det G_E``: conductances of E set to zero, killing raised so lam is unchanged."""
    ids = _edge_indices(g, E)
    M = np.array(g.M, dtype=float)
    u, v = g.edges[ids, 0], g.edges[ids, 1]
    M[u, v] = 0.0
    M[v, u] = 0.0
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("modified operator is not positive definite") from exc
    return -2.0 * float(np.sum(np.log(np.diag(L))))


def prob_edges_closed(g: WeightedGraph, E, alpha: float) -> float:
    """Probability that no loop at intensity alpha crosses any edge of E."""
    _check_alpha(alpha)
    E = list(E)
    if not E:
        return 1.0
    return math.exp(alpha * (logdet_green_closed(g, E) - logdet_green(g)))


def prob_finer_given_closed(g: WeightedGraph, pi: Partition, E, alpha: float) -> float:
    """``P(C_alpha finer than pi | E closed)`` for edges E joining distinct blocks of pi."""
    _check_alpha(alpha)
    E = [tuple(e) for e in E]
    for u, v in E:
        if pi.labels[u] == pi.labels[v]:
            raise EdgeInsideBlock(f"edge ({u}, {v}) lies inside one block")
    ld = _LogDetCache(g)
    lde = logdet_green_closed(g, E) if E else ld(range(g.n))
    return math.exp(alpha * (sum(ld(b) for b in pi.blocks) - lde))


# -- restriction to a subset --------------------------------------------------


@dataclass(frozen=True)
class RestrictionCheck:
    lhs: float
    rhs: float
    diff: float
    factor_mass: float
    factor_green: float
    factor_jacobi: float


def restriction_factorization_check(g: WeightedGraph, U, D, alpha: float) -> RestrictionCheck:
    """Both sides of ``P(C finer than {U, U^c}) = P(C^(D) finer than {U, D-U}) * P(no loop visits U and D^c)``.

    The second factor is evaluated from loop masses, from Green's-function
    ratios and from the Jacobi form; the three must agree within 1e-10.
    """
    _check_alpha(alpha)
    X = set(range(g.n))
    U, D = set(int(x) for x in U), set(int(x) for x in D)
    if not U or not U <= D or D == X:
        raise ValueError("need nonempty U inside D, with D a proper subset")
    Uc, DmU, Dc = X - U, D - U, X - D
    ld = _LogDetCache(g)

    lhs = math.exp(alpha * (ld(U) + ld(Uc) - ld(X)))
    first = math.exp(alpha * (ld(U) + ld(DmU) - ld(D)))

    def mass(F):
        return total_mass(g, sorted(F)) if len(F) else 0.0

    f_mass = math.exp(-alpha * (mass(X) - mass(Uc) - mass(D) + mass(DmU)))
    f_green = math.exp(alpha * (ld(Uc) + ld(D) - ld(X) - ld(DmU)))
    G = green(g).matrix

    def ldsub(F):
        idx = sorted(F)
        sign, v = np.linalg.slogdet(G[np.ix_(idx, idx)])
        if sign <= 0:
            raise SingularSystem("principal minor of G is not positive")
        return v

    f_jac = math.exp(-alpha * (ldsub(U) + ldsub(Dc) - ldsub(U | Dc)))
    spread = max(f_mass, f_green, f_jac) - min(f_mass, f_green, f_jac)
    if spread > 1e-10:
        raise NumericalMismatch(f"second-factor evaluations disagree by {spread:.3e}")
    rhs = first * f_green
    return RestrictionCheck(lhs, rhs, abs(lhs - rhs), f_mass, f_green, f_jac)


# -- occupation field ---------------------------------------------------------


def occupation_gf(g: WeightedGraph, F, s, alpha: float) -> float:
    """``E[prod_x s_x ** N_x]`` with N_x the visits to x by loops inside F at intensity alpha.

    ``s`` is a scalar or one value per vertex of ``sorted(F)``, in (0, 1].  The
    boundary value 0 is accepted as the limit giving the probability of no visit.
    """
    _check_alpha(alpha)
    G = green(g, F)
    idx = np.asarray(G.subset)
    s = np.broadcast_to(np.asarray(s, dtype=float), idx.shape)
    if np.any(~(s >= 0)) or np.any(s > 1):
        raise OutOfRange("s must lie in (0, 1]")
    A = np.diag(s) + (g.lam[idx] * (1 - s))[:, None] * G.matrix
    sign, ld = np.linalg.slogdet(A)
    if sign <= 0:
        raise SingularSystem("generating-function determinant is not positive")
    return math.exp(-alpha * ld)


def prob_unvisited(g: WeightedGraph, x: int, alpha: float) -> float:
    """``P(no loop at intensity alpha visits x) = (lam_x G_xx) ** -alpha``."""
    _check_alpha(alpha)
    gxx = green_diagonal_entry(g, x)
    return math.exp(-alpha * math.log(g.lam[x] * gxx))


def complete_occupation_det(n: int, kappa: float, size: int, s: float) -> float:
    """``det(s I + lam (1 - s) G^(F))`` on K_n for |F| = size, lam = n - 1 + kappa."""
    lam1 = n + kappa
    return (1 - (1 - s) / lam1) ** (size - 1) * (1 + (1 - s) * (size - 1) / (lam1 - size))


def rank_one_det(a: float, b: float, n: int) -> float:
    """``det(b J_n + (a - b) I_n) = (a - b)**(n-1) * (a + (n-1) b)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return (a - b) ** (n - 1) * (a + (n - 1) * b)


# -- complete graph moments ---------------------------------------------------


def complete_moments(n: int, kappa: float, alpha: float, upto: int | None = None) -> np.ndarray:
    """``m_j = (1 - j/(n + kappa)) ** -alpha`` for j = 0..upto (moments of exp(Z/(n+kappa)), Z ~ Gamma(alpha))."""
    upto = n if upto is None else upto
    j = np.arange(upto + 1)
    return np.exp(-alpha * np.log1p(-j / (n + kappa)))


def cumulants_from_moments(m: Sequence[float]) -> np.ndarray:
    """Cumulants c_1..c_N from raw moments m_0..m_N (m_0 = 1)."""
    N = len(m) - 1
    c = np.zeros(N + 1)
    for k in range(1, N + 1):
        c[k] = m[k] - sum(math.comb(k - 1, i - 1) * c[i] * m[k - i] for i in range(1, k))
    return c


def prob_connected_complete(n: int, kappa: float, alpha: float) -> float:
    """``P(C_alpha = {X})`` on K_n as c_n / m_n."""
    m = complete_moments(n, kappa, alpha)
    return float(cumulants_from_moments(m)[n] / m[n])


def prob_finer_complete(n: int, kappa: float, alpha: float, sizes: Sequence[int]) -> float:
    """``prod_i m_{|B_i|} / m_n`` for a partition of K_n with the given block sizes."""
    m = complete_moments(n, kappa, alpha)
    return float(np.prod([m[s] for s in sizes]) / m[n])
