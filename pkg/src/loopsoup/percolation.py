"""Loop percolation on boxes and tori of Z^d.

Boxes with free boundary carry the restriction of the soup on Z^d: each
vertex keeps ``lam = 2d + kappa`` by receiving the conductance of its missing
neighbours as extra killing.  Comparisons across killing levels and
intensities use one master sample (thinning and arrival marks), so the
orderings they produce hold replica by replica.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .errors import NoSignChange
from .exact import prob_finer
from .graph import WeightedGraph, build_graph, green_diagonal_entry
from .partition import Partition
from .sampler import LoopBatch, batch_cluster_labels, build_plan, chunk_rng, sample_batch, thin_batch
from .stats import binomial_ci, bonferroni, pooled_chisquare

# Critical bond-percolation parameters used by the sufficient condition.
# Only d = 2 has an exact value (1/2); other dimensions must be configured.
DEFAULT_PC = {2: 0.5}


@dataclass(frozen=True)
class LatticeBox:
    d: int
    L: int
    bc: str
    kappa: float
    graph: WeightedGraph = field(repr=False)
    origin: int
    boundary: np.ndarray = field(repr=False)  # vertices where the origin's cluster counts as escaping

    def coords(self, v) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(v), (self.L,) * self.d), axis=-1)

    def with_kappa(self, kappa: float) -> "LatticeBox":
        return lattice_box(self.d, self.L, kappa, self.bc)


def lattice_box(d: int, L: int, kappa: float, bc: str = "free") -> LatticeBox:
    """Box {0..L-1}^d with nearest-neighbour (+-e_i) unit conductances.

    ``free``: missing neighbours become killing, so the box carries the
    restriction of the soup on Z^d; the escape set is the outer face.
    ``torus``: periodic edges (needs L >= 3); the escape set is the shell at
    sup-distance L // 2 from the origin.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if bc not in ("free", "torus"):
        raise ValueError("bc must be 'free' or 'torus'")
    if L < (3 if bc == "torus" else 2):
        raise ValueError("box side too small")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    shape = (L,) * d
    idx = np.arange(L**d).reshape(shape)
    edges = []
    for axis in range(d):
        if bc == "torus":
            nb = np.roll(idx, -1, axis=axis)
            edges.append(np.column_stack([idx.ravel(), nb.ravel()]))
        else:
            a = np.take(idx, np.arange(L - 1), axis=axis)
            b = np.take(idx, np.arange(1, L), axis=axis)
            edges.append(np.column_stack([a.ravel(), b.ravel()]))
    e = np.concatenate(edges)
    deg = np.bincount(e.ravel(), minlength=L**d)
    kap = kappa + (2 * d - deg)
    g = build_graph(e.tolist(), kap, n=L**d, name=f"{bc}{L}^{d}")
    origin = int(np.ravel_multi_index((L // 2,) * d, shape))
    c = np.stack(np.unravel_index(np.arange(L**d), shape), axis=-1)
    if bc == "free":
        boundary = np.nonzero(np.any((c == 0) | (c == L - 1), axis=1))[0]
    else:
        diff = np.abs(c - L // 2)
        dist = np.max(np.minimum(diff, L - diff), axis=1)
        boundary = np.nonzero(dist == L // 2)[0]
    return LatticeBox(d, L, bc, float(kappa), g, origin, boundary)


def origin_escapes(box: LatticeBox, labels: np.ndarray) -> np.ndarray:
    """Per replica: does the origin's cluster meet the escape set?"""
    return np.any(labels[:, box.boundary] == labels[:, [box.origin]], axis=1)


# -- theta estimates ----------------------------------------------------------


@dataclass(frozen=True)
class ThetaRow:
    L: int
    theta_hat: float
    ci_lo: float
    ci_hi: float
    hits: int
    replicas: int


@dataclass(frozen=True)
class PercolationEstimate:
    d: int
    bc: str
    alpha: float
    kappa: float
    rows: tuple[ThetaRow, ...]
    p_c: float | None
    level: float

    def csv_rows(self) -> list[dict]:
        return [
            dict(d=self.d, L=r.L, bc=self.bc, alpha=self.alpha, kappa=self.kappa, theta_hat=r.theta_hat, ci_lo=r.ci_lo, ci_hi=r.ci_hi, replicas=r.replicas)
            for r in self.rows
        ]


def estimate_theta(
    d: int,
    L_ladder: Sequence[int],
    bc: str,
    alpha: float,
    kappa: float,
    replicas: int,
    seed: int,
    level: float = 0.95,
    p_c: float | None = None,
) -> PercolationEstimate:
    """Fraction of soups in which the origin's cluster reaches the escape set, per box side."""
    if d < 2:
        raise ValueError("d must be >= 2")
    if any(L < 4 for L in L_ladder):
        raise ValueError("box sides must be >= 4")
    rows = []
    for i, L in enumerate(L_ladder):
        box = lattice_box(d, L, kappa, bc)
        hits = 0
        if alpha > 0:
            plan = build_plan(box.graph)
            batch = sample_batch(box.graph, plan, alpha, replicas, _sub_seed(seed, i))
            hits = int(origin_escapes(box, batch_cluster_labels(box.graph, batch.open_edges(box.graph))).sum())
        lo, hi = binomial_ci(hits, replicas, level)
        rows.append(ThetaRow(L, hits / replicas, lo, hi, hits, replicas))
    return PercolationEstimate(d, bc, float(alpha), float(kappa), tuple(rows), p_c if p_c is not None else DEFAULT_PC.get(d), level)


def _sub_seed(seed: int, i: int) -> int:
    return int(chunk_rng(seed, 1_000_000 + i).integers(2**63))


# -- coupled soups ------------------------------------------------------------


@dataclass
class CoupledSoups:
    """One master sample at (alpha_max, kappa_min), read off at any (alpha, kappa) above it."""

    box: LatticeBox
    batch: LoopBatch
    alpha_max: float
    kappa_min: float

    @classmethod
    def sample(cls, box: LatticeBox, alpha_max: float, replicas: int, seed: int) -> "CoupledSoups":
        plan = build_plan(box.graph)
        return cls(box, sample_batch(box.graph, plan, alpha_max, replicas, seed), float(alpha_max), box.kappa)

    def at(self, alpha: float, kappa: float) -> LoopBatch:
        if alpha > self.alpha_max or kappa < self.kappa_min:
            raise ValueError("coupling only reaches smaller alpha and larger kappa")
        b = self.batch.up_to(alpha) if alpha < self.alpha_max else self.batch
        if kappa > self.kappa_min:
            b = thin_batch(b, self.box.graph, self.box.graph.with_kappa(self.box.graph.kappa + (kappa - self.kappa_min)))
        return b

    def open_edges(self, alpha: float, kappa: float) -> np.ndarray:
        return self.at(alpha, kappa).open_edges(self.box.graph)

    def escapes(self, alpha: float, kappa: float) -> np.ndarray:
        g = self.box.graph
        return origin_escapes(self.box, batch_cluster_labels(g, self.open_edges(alpha, kappa)))


def nested_open_edges(coupled: CoupledSoups, alpha: float, kappas: Sequence[float]) -> bool:
    """True when every replica's open-edge set shrinks along the increasing kappa sequence."""
    ks = sorted(kappas)
    prev = None
    for k in ks:
        cur = coupled.open_edges(alpha, k)
        if prev is not None and np.any(cur & ~prev):
            return False
        prev = cur
    return True


# -- Bernoulli bridges ---------------------------------------------------------


def two_loop_parameters(g: WeightedGraph, alpha: float) -> np.ndarray:
    """``s_e = 1 - (1 - P_xy P_yx)**alpha`` per edge."""
    u, v = g.edges[:, 0], g.edges[:, 1]
    c = g.conductance
    pp = c * c / (g.lam[u] * g.lam[v])
    return -np.expm1(alpha * np.log1p(-pp))


@dataclass(frozen=True)
class TwoLoopSample:
    s: np.ndarray
    bernoulli_open: np.ndarray  # (R, m) independent edges
    two_loop_open: np.ndarray  # (R, m) edges crossed by a power of a length-2 loop
    bernoulli_labels: np.ndarray
    two_loop_labels: np.ndarray


def two_vertex_loops(batch: LoopBatch) -> np.ndarray:
    """Mask of loops ``(xy)^k``: powers of a primitive loop of length 2."""
    if batch.n_loops == 0:
        return np.zeros(0, dtype=bool)
    start = batch.offsets[:-1]
    owner = np.repeat(np.arange(batch.n_loops), batch.lengths)
    v = batch.vertices
    on_pair = (v == v[start][owner]) | (v == v[start + 1][owner])
    return np.logical_and.reduceat(on_pair, start)


def two_loop_bernoulli(g: WeightedGraph, alpha: float, replicas: int, seed: int) -> TwoLoopSample:
    """Independent Bernoulli(s_e) edges next to the edges covered by the ``(xy)^k`` loops of a sampled soup."""
    s = two_loop_parameters(g, alpha)
    rng = chunk_rng(seed, 2**31)
    bern = rng.random((replicas, g.m)) < s[None, :]
    if alpha > 0:
        batch = sample_batch(g, build_plan(g), alpha, replicas, seed)
        two = batch.select(two_vertex_loops(batch)).open_edges(g)
    else:
        two = np.zeros((replicas, g.m), dtype=bool)
    return TwoLoopSample(s, bern, two, batch_cluster_labels(g, bern), batch_cluster_labels(g, two))


def cluster_sizes(labels: np.ndarray) -> np.ndarray:
    """Sizes of all clusters, pooled over replicas."""
    R, n = labels.shape
    keys = (np.arange(R)[:, None] * n + labels).ravel()
    counts = np.bincount(keys, minlength=R * n)
    return counts[counts > 0]


@dataclass(frozen=True)
class LawComparison:
    edge_pvalue: float  # Bonferroni over per-edge two-proportion tests
    size_ks_pvalue: float  # KS on the size of vertex 0's cluster
    size_chi2_pvalue: float  # homogeneity of the pooled cluster-size histograms


def compare_two_loop_laws(sample: TwoLoopSample) -> LawComparison:
    a, b = sample.bernoulli_open, sample.two_loop_open
    R = a.shape[0]
    pe = []
    for j in range(a.shape[1]):
        ka, kb = int(a[:, j].sum()), int(b[:, j].sum())
        t = sps.chi2_contingency(np.array([[ka, R - ka], [kb, R - kb]]), correction=False).pvalue if 0 < ka + kb < 2 * R else 1.0
        pe.append(t)
    size0_a = (sample.bernoulli_labels == sample.bernoulli_labels[:, [0]]).sum(axis=1)
    size0_b = (sample.two_loop_labels == sample.two_loop_labels[:, [0]]).sum(axis=1)
    ks = sps.ks_2samp(size0_a, size0_b).pvalue
    n = sample.bernoulli_labels.shape[1]
    ha = np.bincount(cluster_sizes(sample.bernoulli_labels), minlength=n + 1)[1:]
    hb = np.bincount(cluster_sizes(sample.two_loop_labels), minlength=n + 1)[1:]
    keep = (ha + hb) > 0
    chi = sps.chi2_contingency(np.vstack([ha[keep], hb[keep]]), correction=False).pvalue if keep.sum() > 1 else 1.0
    return LawComparison(bonferroni(pe), float(ks), float(chi))


def edge_product_law_test(open_edges: np.ndarray, s: np.ndarray):
    """Chi-square of the joint edge-indicator histogram against the product of Bernoulli(s_e)."""
    R, m = open_edges.shape
    if m > 16:
        raise ValueError("joint histogram needs m <= 16")
    codes = open_edges.astype(np.int64) @ (1 << np.arange(m))
    observed = np.bincount(codes, minlength=1 << m)
    bits = (np.arange(1 << m)[:, None] >> np.arange(m)) & 1
    expected = R * np.prod(np.where(bits == 1, s[None, :], 1 - s[None, :]), axis=1)
    return pooled_chisquare(observed, expected)


# -- sufficient condition and limits -------------------------------------------


@dataclass(frozen=True)
class SufficientCondition:
    holds: bool
    margin: float


def _resolve_pc(d: int, p_c: float | None) -> float:
    if p_c is None:
        if d not in DEFAULT_PC:
            raise ValueError(f"no default critical parameter for d={d}; supply p_c")
        p_c = DEFAULT_PC[d]
    if not 0 < p_c < 1:
        raise ValueError("p_c must lie in (0, 1)")
    return p_c


def percolation_sufficient_condition(d: int, alpha: float, kappa: float, p_c: float | None = None) -> SufficientCondition:
    """Percolation holds if ``(1 - (2d+kappa)^-2)**alpha < 1 - p_c``; margin is the gap."""
    p_c = _resolve_pc(d, p_c)
    lhs = math.exp(alpha * math.log1p(-1.0 / (2 * d + kappa) ** 2))
    margin = (1 - p_c) - lhs
    return SufficientCondition(margin > 0, margin)


def critical_alpha(d: int, kappa: float, p_c: float | None = None) -> float:
    """Intensity where the sufficient condition starts to hold."""
    p_c = _resolve_pc(d, p_c)
    return math.log1p(-p_c) / math.log1p(-1.0 / (2 * d + kappa) ** 2)


def sufficient_kappa(d: int, alpha: float, p_c: float | None = None) -> float:
    """Largest kappa satisfying the sufficient condition at this alpha (negative if none)."""
    p_c = _resolve_pc(d, p_c)
    x = -math.expm1(math.log1p(-p_c) / alpha)
    return 1 / math.sqrt(x) - 2 * d


@dataclass(frozen=True)
class LimitErrorRow:
    kappa: float
    alpha: float
    exact: float
    limit: float
    error: float


def bernoulli_limit_check(g: WeightedGraph, pi: Partition, u: float, kappa_ladder: Sequence[float]) -> list[LimitErrorRow]:
    """Exact ``P(C_alpha <= pi)`` at ``alpha = u kappa^2`` against ``exp(-u |cross edges|)``."""
    if u <= 0:
        raise ValueError("u must be > 0")
    if np.ptp(g.conductance) > 0 or np.ptp(g.kappa) > 0:
        raise ValueError("needs uniform conductances and uniform killing")
    cut = int(pi.cross_edges(g.edges).sum())
    limit = math.exp(-u * cut)
    rows = []
    for k in kappa_ladder:
        a = u * k * k
        p = prob_finer(g.with_kappa(np.full(g.n, float(k))), pi, a)
        rows.append(LimitErrorRow(float(k), a, p, limit, abs(p - limit)))
    return rows


# -- threshold scan ---------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdBracket:
    alpha: float
    L: int
    theta_cut: float
    kappa_lo: float  # theta_hat >= cut here
    kappa_hi: float  # theta_hat < cut here
    theta_lo: float
    theta_hi: float
    steps: int
    ci_stopped: bool
    replicas: int
    caveat: str = "finite box: the escape event over-estimates theta, so the bracket over-estimates the infinite-volume threshold"


def _theta_at(coupled: CoupledSoups, alpha: float, kappa: float) -> float:
    return float(coupled.escapes(alpha, kappa).mean())


def kappa_threshold_scan(
    d: int,
    alpha: float,
    L_ladder: Sequence[int],
    theta_cut: float,
    seed: int,
    replicas: int = 1000,
    kappa_range: tuple[float, float] = (0.01, 10.0),
    rel_width: float = 0.02,
    max_steps: int = 30,
    level: float = 0.95,
    coupled: CoupledSoups | None = None,
) -> ThresholdBracket:
    """Bisect in log-kappa for the crossing of ``theta_hat`` through ``theta_cut`` on the largest box.

    All kappa levels are thinnings of one master sample, so theta_hat is a
    nonincreasing step function of kappa.  Bisection stops at relative width
    ``rel_width`` or as soon as the confidence interval at the midpoint
    contains ``theta_cut``; the bracket then keeps that midpoint inside.
    """
    if not 0 < theta_cut < 0.5:
        raise ValueError("theta_cut must lie in (0, 0.5)")
    L = max(L_ladder)
    lo, hi = kappa_range
    if coupled is None:
        coupled = CoupledSoups.sample(lattice_box(d, L, lo, "free"), alpha, replicas, seed)
    R = coupled.batch.n_replicas
    t_lo, t_hi = _theta_at(coupled, alpha, lo), _theta_at(coupled, alpha, hi)
    if not (t_lo >= theta_cut > t_hi):
        raise NoSignChange(f"theta_hat is {t_lo:.3f} at kappa={lo} and {t_hi:.3f} at kappa={hi}")
    steps = 0
    stopped = False
    while hi / lo > 1 + rel_width and steps < max_steps:
        mid = math.sqrt(lo * hi)
        t = _theta_at(coupled, alpha, mid)
        steps += 1
        ci = binomial_ci(round(t * R), R, level)
        if ci[0] <= theta_cut <= ci[1]:
            # the side of mid is not resolved at this replica count
            stopped = True
            break
        if t >= theta_cut:
            lo, t_lo = mid, t
        else:
            hi, t_hi = mid, t
    return ThresholdBracket(float(alpha), L, theta_cut, lo, hi, t_lo, t_hi, steps, stopped, R)


# -- kappa -> 0 in the plane ---------------------------------------------------


@dataclass(frozen=True)
class EdgeOpenRow:
    kappa: float
    lam_green: float  # lam_x G_xx at the centre
    p_visit: float  # P(N_x^{(alpha/n)} > 0)
    bound: float


def edge_open_kappa_to_zero(alpha: float, kappa_ladder: Sequence[float], L: int, n: int = 8, d: int = 2) -> list[EdgeOpenRow]:
    """Lower bound ``1 - (1 - P(N_x^{(alpha/n)} > 0)/4)**n`` on P(edge open) at the box centre."""
    if d != 2:
        raise ValueError("only d = 2")
    rows = []
    for k in kappa_ladder:
        box = lattice_box(d, L, k, "free")
        lg = float(box.graph.lam[box.origin]) * green_diagonal_entry(box.graph, box.origin)
        p = -math.expm1(-(alpha / n) * math.log(lg))
        rows.append(EdgeOpenRow(float(k), lg, p, 1 - (1 - p / 4) ** n))
    return rows
