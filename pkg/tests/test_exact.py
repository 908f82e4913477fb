import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopsoup.errors import EdgeInsideBlock, JTooSmall, OutOfRange
from loopsoup.exact import (
    complete_occupation_det,
    cumulants_from_moments,
    complete_moments,
    exit_boundary_matrix,
    occupation_gf,
    prob_connected_complete,
    prob_edges_closed,
    prob_equal,
    prob_finer,
    prob_finer_complete,
    prob_finer_exit,
    prob_finer_given_closed,
    prob_unvisited,
    rank_one_det,
    restriction_factorization_check,
    transition_rate,
    transition_rate_complete,
)
from loopsoup.graph import build_graph, complete_graph, green, path_graph, random_graph
from loopsoup.loops import total_mass
from loopsoup.partition import Partition, all_partitions
from loopsoup.sampler import batch_cluster_labels, build_plan, finer_than, sample_batch
from loopsoup.stats import z_score

K4 = complete_graph(4, 1.0)
EDGE = build_graph([(0, 1, 1.0)], 1.0)
PAIRS = Partition.from_blocks([[0, 1], [2, 3]])


def dense_logdet(g, F):
    F = sorted(F)
    M = np.diag(g.lam) - g.C
    return -np.linalg.slogdet(M[np.ix_(F, F)])[1]


@pytest.fixture(scope="module")
def k4_batch():
    return sample_batch(K4, build_plan(K4), 1.0, 100_000, seed=7)


# -- prob_finer -----------------------------------------------------------------


def test_prob_finer_k4_pairs():
    assert prob_finer(K4, PAIRS, 1.0) == pytest.approx(5 / 9, rel=1e-13)
    oracle = math.exp(2 * math.log(1 / 15) - math.log(1 / 125))
    assert prob_finer(K4, PAIRS, 1.0) == pytest.approx(oracle, rel=1e-13)


def test_prob_finer_trivial_cases():
    assert prob_finer(K4, Partition.whole(4), 1.7) == 1.0
    assert prob_finer(K4, PAIRS, 0.0) == 1.0
    assert prob_finer(K4, Partition.singletons(4), 1.0, pi0=PAIRS) == 0.0


def test_prob_finer_mc(k4_batch):
    lab = batch_cluster_labels(K4, k4_batch.open_edges(K4))
    k = int(finer_than(lab, PAIRS).sum())
    assert abs(z_score(k, 100_000, 5 / 9)) < 3


def test_monotone_in_alpha(rng):
    g = random_graph(rng, 6)
    for pi in itertools.islice(all_partitions(6), 1, 60):
        vals = [prob_finer(g, pi, a) for a in np.linspace(0, 4, 9)]
        if pi != Partition.whole(6):
            assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


# -- prob_equal -----------------------------------------------------------------


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_normalization(n, rng):
    g = random_graph(rng, n)
    for a in (0.3, 1.0, 2.5):
        total = math.fsum(prob_equal(g, pi, a) for pi in all_partitions(n))
        assert total == pytest.approx(1.0, abs=1e-9)


def test_normalization_from_coarser_start(rng):
    g = random_graph(rng, 5)
    pi0 = Partition.from_blocks([[0, 3], [1], [2, 4]])
    total = math.fsum(prob_equal(g, pi, 1.3, pi0) for pi in all_partitions(5))
    assert total == pytest.approx(1.0, abs=1e-9)
    assert prob_equal(g, Partition.singletons(5), 1.3, pi0) == 0.0


@pytest.mark.parametrize("n", range(2, 9))
def test_connected_complete_cumulants(n):
    for a in (0.5, 1.0, 3.0):
        g = complete_graph(n, 1.0)
        assert prob_equal(g, Partition.whole(n), a) == pytest.approx(prob_connected_complete(n, 1.0, a), abs=1e-9)


def test_cumulants_from_normal_moments():
    mu, s2 = 0.4, 0.9
    normal_m = [1, mu, mu**2 + s2, mu**3 + 3 * mu * s2, mu**4 + 6 * mu**2 * s2 + 3 * s2**2]
    kap = cumulants_from_moments(normal_m)
    assert kap[1:] == pytest.approx([mu, s2, 0, 0], abs=1e-12)


def test_prob_equal_mc(k4_batch):
    lab = batch_cluster_labels(K4, k4_batch.open_edges(K4))
    for pi in all_partitions(4):
        plab = np.asarray(pi.labels)
        same = np.all((plab[:, None] == plab[None, :])[None] == (lab[:, :, None] == lab[:, None, :]), axis=(1, 2))
        assert abs(z_score(int(same.sum()), 100_000, prob_equal(K4, pi, 1.0))) < 4


# -- transition rates -----------------------------------------------------------


def test_rate_two_vertex():
    assert transition_rate(EDGE, Partition.singletons(2), [0, 1]) == pytest.approx(math.log(4 / 3), rel=1e-13)
    with pytest.raises(JTooSmall):
        transition_rate(EDGE, Partition.singletons(2), [0])


@pytest.mark.parametrize("n", range(3, 9))
def test_rate_complete_closed_form(n):
    g = complete_graph(n, 0.7)
    pi = Partition.from_blocks([[0, 1], [2]] + ([list(range(3, n))] if n > 3 else []))
    for size in range(2, len(pi) + 1):
        for J in itertools.combinations(range(len(pi)), size):
            sizes = [len(pi.blocks[j]) for j in J]
            assert transition_rate(g, pi, J) == pytest.approx(transition_rate_complete(n, 0.7, sizes), abs=1e-10)


def test_rate_additivity(rng):
    for _ in range(5):
        g = random_graph(rng, 6)
        pi = Partition(tuple(int(x) for x in rng.integers(0, 3, size=6)))
        k = len(pi)
        if k < 2:
            continue
        total = math.fsum(transition_rate(g, pi, J) for s in range(2, k + 1) for J in itertools.combinations(range(k), s))
        expect = total_mass(g) - math.fsum(total_mass(g, b) for b in pi.blocks)
        assert total == pytest.approx(expect, abs=1e-10)


# -- exit-distribution form -------------------------------------------------------


def test_exit_form_examples():
    assert prob_finer_exit(K4, Partition.whole(4), 1.0) == 1.0
    assert exit_boundary_matrix(K4, Partition.whole(4)).boundary == ()
    assert prob_finer_exit(K4, PAIRS, 1.0) == pytest.approx(5 / 9, abs=1e-12)
    g = path_graph(6, 1.0)
    pi = Partition.from_blocks([[0, 1, 2], [3, 4, 5]])
    assert abs(prob_finer_exit(g, pi, 2.0, check=False) - prob_finer(g, pi, 2.0)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_dual_formula_random(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(2, 8)))
    for _ in range(5):
        pi = Partition(tuple(int(x) for x in rng.integers(0, 3, size=g.n)))
        a = float(rng.uniform(0.1, 3))
        assert abs(prob_finer_exit(g, pi, a, check=False) - prob_finer(g, pi, a)) < 1e-10


# -- closed edges ---------------------------------------------------------------


def test_edges_closed_examples():
    assert prob_edges_closed(K4, [], 1.0) == 1.0
    assert prob_edges_closed(EDGE, [(0, 1)], 1.0) == pytest.approx(0.75, rel=1e-13)
    assert prob_edges_closed(EDGE, [(0, 1)], 1.0) == pytest.approx(math.exp(-total_mass(EDGE)), rel=1e-13)


def test_edges_closed_mc(k4_batch):
    open_ = k4_batch.open_edges(K4)
    E = [(0, 1), (2, 3)]
    ids = K4.edge_ids(np.array([0, 2]), np.array([1, 3]))
    k = int((~open_[:, ids]).all(axis=1).sum())
    assert abs(z_score(k, 100_000, prob_edges_closed(K4, E, 1.0))) < 3


def test_given_closed_examples(k4_batch):
    assert prob_finer_given_closed(K4, PAIRS, [(0, 2)], 0.0) == 1.0
    with pytest.raises(EdgeInsideBlock):
        prob_finer_given_closed(K4, PAIRS, [(0, 1)], 1.0)
    p = prob_finer_given_closed(K4, PAIRS, [(1, 2)], 1.0)
    open_ = k4_batch.open_edges(K4)
    closed = ~open_[:, int(K4.edge_ids(np.array([1]), np.array([2]))[0])]
    lab = batch_cluster_labels(K4, open_)
    fin = finer_than(lab, PAIRS)
    assert abs(z_score(int(fin[closed].sum()), int(closed.sum()), p)) < 3


def test_given_closed_positive_association(rng):
    for _ in range(20):
        g = random_graph(rng, 5, p_edge=0.8)
        pi = Partition(tuple(int(x) for x in rng.integers(0, 2, size=5)))
        cross = [tuple(int(v) for v in e) for e in g.edges[pi.cross_edges(g.edges)]]
        if not cross:
            continue
        assert prob_finer_given_closed(g, pi, cross, 1.0) >= prob_finer(g, pi, 1.0) - 1e-12


# -- restriction --------------------------------------------------------------------


def test_restriction_k5():
    rc = restriction_factorization_check(complete_graph(5, 1.0), {0}, {0, 1, 2}, 1.0)
    assert rc.diff < 1e-10
    assert rc.factor_jacobi == pytest.approx(rc.factor_green, abs=1e-10)


def test_restriction_degenerate_nesting():
    rc = restriction_factorization_check(complete_graph(5, 1.0), {0, 1}, {0, 1}, 1.3)
    assert rc.diff < 1e-12


def test_restriction_random(rng):
    for _ in range(20):
        g = random_graph(rng, 6)
        rc = restriction_factorization_check(g, {0, 1}, {0, 1, 2, 3}, float(rng.uniform(0.2, 2)))
        assert rc.diff < 1e-10
        assert abs(rc.factor_mass - rc.factor_jacobi) < 1e-10


# -- occupation field -----------------------------------------------------------


def test_occupation_gf_basics():
    assert occupation_gf(K4, range(4), 1.0, 1.2) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(OutOfRange):
        occupation_gf(K4, range(4), 1.5, 1.0)


def test_prob_unvisited_singleton_limit():
    G = green(K4).matrix
    for a in (0.5, 1.0, 2.0):
        assert prob_unvisited(K4, 0, a) == pytest.approx((K4.lam[0] * G[0, 0]) ** -a, rel=1e-13)
        # s -> 0 at x only, s = 1 elsewhere
        s = np.array([0.0, 1, 1, 1])
        assert occupation_gf(K4, range(4), s, a) == pytest.approx(prob_unvisited(K4, 0, a), rel=1e-12)


def test_occupation_unvisited_mc(k4_batch):
    visited = np.zeros(100_000, dtype=bool)
    hit = np.repeat(k4_batch.replica, k4_batch.lengths)[k4_batch.vertices == 0]
    visited[hit] = True
    assert abs(z_score(int((~visited).sum()), 100_000, prob_unvisited(K4, 0, 1.0))) < 3


@pytest.mark.parametrize("n", range(2, 9))
def test_occupation_complete_closed_form(n):
    g = complete_graph(n, 1.0)
    for size in range(1, n + 1):
        for s in (0.1, 0.5, 0.9):
            val = occupation_gf(g, range(size), s, 1.0)
            assert val == pytest.approx(complete_occupation_det(n, 1.0, size, s) ** -1, rel=1e-12)


# -- rank-one determinant -------------------------------------------------------


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 7))
def test_rank_one_det_matches_dense(a, b, n):
    M = b * np.ones((n, n)) + (a - b) * np.eye(n)
    assert rank_one_det(a, b, n) == pytest.approx(np.linalg.det(M), abs=1e-9 * max(1.0, abs(a) + n * abs(b)) ** n)


def test_rank_one_det_examples():
    assert rank_one_det(2, 1, 3) == 4
    assert rank_one_det(3, 0, 4) == 81
    assert rank_one_det(5, 2, 1) == 5
    with pytest.raises(ValueError):
        rank_one_det(1, 1, 0)


def test_prob_finer_complete_matches_generic():
    g = complete_graph(6, 0.5)
    pi = Partition.from_blocks([[0, 1, 2], [3, 4], [5]])
    assert prob_finer(g, pi, 1.4) == pytest.approx(prob_finer_complete(6, 0.5, 1.4, [3, 2, 1]), rel=1e-12)


def test_harris_positive_association():
    g = complete_graph(6, 1.0)
    batch = sample_batch(g, build_plan(g), 0.6, 50_000, seed=3)
    lab = batch_cluster_labels(g, batch.open_edges(g))
    rng = np.random.default_rng(9)
    for _ in range(10):
        A = rng.choice(6, size=2, replace=False)
        B = rng.choice(6, size=2, replace=False)
        ca = lab[:, A[0]] == lab[:, A[1]]
        cb = lab[:, B[0]] == lab[:, B[1]]
        pa, pb, pab = ca.mean(), cb.mean(), (ca & cb).mean()
        assert pab >= pa * pb - 3 * math.sqrt(pab * (1 - pab) / 50_000)
