import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopsoup.errors import (
    AllKillingZeroWithoutOverride,
    DisconnectedGraph,
    ExcessiveH,
    GraphError,
    NoKilling,
    NonPositiveConductance,
)
from loopsoup.graph import (
    build_graph,
    complete_graph,
    cycle_graph,
    exit_kernel,
    graph_from_dict,
    green,
    green_diagonal_entry,
    h_transform,
    load_graph,
    logdet_green,
    path_graph,
    perron_upper_bound,
    random_graph,
    save_graph,
    spectral_radius_bound,
    transition_matrix,
)
from loopsoup.loops import based_weight, enumerate_based_loops
from loopsoup.renewal import half_line_exit, rho


def test_k4_lambda():
    g = complete_graph(4, 1.0)
    assert np.all(g.lam == 4.0)


def test_two_vertex_lambda():
    g = build_graph([(0, 1, 1.0)], [1.0, 1.0])
    assert g.lam.tolist() == [2.0, 2.0]


def test_disconnected_rejected():
    with pytest.raises(DisconnectedGraph):
        build_graph([(0, 1, 1.0), (2, 3, 1.0)], 1.0, n=4)


@pytest.mark.parametrize("c", [0.0, -1.0, math.inf])
def test_nonpositive_conductance(c):
    with pytest.raises(NonPositiveConductance):
        build_graph([(0, 1, c)], 1.0)


def test_zero_killing_needs_override():
    with pytest.raises(AllKillingZeroWithoutOverride):
        build_graph([(0, 1, 1.0)], 0.0)
    # with the override the spectral radius is checked: a lone edge has rho = 1
    with pytest.raises(NoKilling):
        build_graph([(0, 1, 1.0)], 0.0, allow_zero_killing=True)


@pytest.mark.parametrize(
    "edges",
    [[(0, 0, 1.0)], [(0, 1, 1.0), (1, 0, 2.0)], [(0, 5, 1.0)], [(0.5, 1, 1.0)]],
)
def test_structural_errors(edges):
    with pytest.raises(GraphError):
        build_graph(edges, 1.0, n=2)


def test_transition_matrix_k4():
    P = transition_matrix(complete_graph(4, 1.0))
    off = ~np.eye(4, dtype=bool)
    assert np.allclose(P[off], 0.25) and np.all(np.diag(P) == 0)


def test_transition_matrix_two_vertex():
    P = transition_matrix(build_graph([(0, 1, 1.0)], 1.0))
    assert P[0, 1] == P[1, 0] == 0.5


def test_row_sums_are_deficient(rng):
    for _ in range(10):
        g = random_graph(rng, 6)
        rows = g.P.sum(axis=1)
        assert np.allclose(rows, (g.lam - g.kappa) / g.lam)
        assert np.all(np.diag(g.P) == 0)


def test_green_k4_subsets():
    g = complete_graph(4, 1.0)
    assert green(g, [0, 1]).det == pytest.approx(1 / 15, rel=1e-12)
    assert green(g).det == pytest.approx(1 / 125, rel=1e-12)
    assert green(g, [2]).matrix[0, 0] == pytest.approx(0.25)
    # dense inversion oracle
    assert np.allclose(green(g).matrix, np.linalg.inv(np.diag(g.lam) - g.C))


def test_green_complete_closed_form():
    for n, kappa in [(4, 1.0), (6, 0.5), (7, 3.0)]:
        g = complete_graph(n, kappa)
        s = n + kappa
        for k in range(1, n + 1):
            expected = -((k - 1) * math.log(s) + math.log(s - k))
            assert logdet_green(g, range(k)) == pytest.approx(expected, abs=1e-12)


def test_green_diagonal_entry_sparse(rng):
    g = random_graph(rng, 9)
    G = green(g).matrix
    for x in range(g.n):
        assert green_diagonal_entry(g, x) == pytest.approx(G[x, x], rel=1e-10)


def test_logdet_empty_subset():
    assert logdet_green(complete_graph(3, 1.0), []) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 7))
def test_green_positive_definite(seed, n):
    g = random_graph(np.random.default_rng(seed), n)
    G = green(g).matrix
    assert np.allclose(G, G.T)
    assert np.all(np.linalg.eigvalsh(G) > 0)
    sub = np.random.default_rng(seed + 1).choice(n, size=max(1, n // 2), replace=False)
    assert green(g, sub).det > 0


def test_exit_kernel_singleton_is_one_step():
    g = complete_graph(5, 0.7)
    H = exit_kernel(g, [2])
    for j, y in enumerate(H.outside):
        assert H.matrix[0, j] == pytest.approx(g.P[2, y])


def test_exit_kernel_rows_and_killing_by_simulation(rng):
    g = random_graph(rng, 5)
    D = [0, 1, 2]
    H = exit_kernel(g, D)
    assert np.all(H.matrix >= 0) and np.all(H.matrix.sum(axis=1) <= 1 + 1e-12)
    # simulate the chain from vertex 0 until it exits D or dies
    P = g.P
    kill = 1 - P.sum(axis=1)
    trials = 40000
    outcomes = np.zeros(g.n + 1)
    for _ in range(trials):
        x = 0
        while x in D:
            x = rng.choice(g.n + 1, p=np.append(P[x], kill[x]))
            if x == g.n:
                break
        outcomes[x] += 1
    freq = outcomes / trials
    exact = np.zeros(g.n + 1)
    for j, y in enumerate(H.outside):
        exact[y] = H.matrix[0, j]
    exact[g.n] = H.killed[0]
    sigma = np.sqrt(exact * (1 - exact) / trials) + 1e-12
    assert np.all(np.abs(freq - exact) <= 4 * sigma + 1e-12)


def test_exit_kernel_half_line_matches_exponential():
    for kappa in (0.5, 2.0):
        M = 40
        H = half_line_exit(kappa, M)
        k = np.arange(1, M + 1)
        err = np.abs(H - np.exp(-rho(kappa) * k))
        assert np.all(err <= np.exp(-rho(kappa) * (M - k)) + 1e-14)


def test_h_transform_identity():
    g = complete_graph(4, 1.0)
    assert h_transform(g, np.ones(4)) == g


def test_h_transform_conjugation_k4():
    g = complete_graph(4, 1.0)
    h = np.array([2.0, 1.0, 1.0, 1.0])  # (P - I)h is exactly 0 at the light vertices
    g2 = h_transform(g, h)
    assert np.allclose(g2.P, g.P * h[None, :] / h[:, None], atol=1e-15)


def test_h_transform_rejects_non_excessive():
    with pytest.raises(ExcessiveH):
        h_transform(complete_graph(4, 1.0), np.array([5.0, 1.0, 1.0, 1.0]))


def test_h_transform_preserves_loop_weights(rng):
    for _ in range(5):
        g = random_graph(rng, 5)
        G = green(g).matrix
        h = G[:, 0] / G[0, 0]  # harmonic except at 0, so excessive
        g2 = h_transform(g, h)
        assert np.allclose(g2.P * h[:, None], g.P * h[None, :], atol=1e-14)
        for loop in enumerate_based_loops(g, 5):
            assert based_weight(g2, loop) == pytest.approx(based_weight(g, loop), rel=1e-12)


def test_perron_bound_is_an_upper_bound(rng):
    for _ in range(20):
        g = random_graph(rng, 8)
        r = max(abs(np.linalg.eigvals(g.P)))
        b = spectral_radius_bound(g)
        assert r <= b + 1e-12 and b < 1
    assert perron_upper_bound(np.zeros((0, 0))) == 0.0


def test_graph_json_roundtrip(tmp_path):
    g = cycle_graph(5, [0.1, 0.2, 0.3, 0.4, 0.5])
    p = tmp_path / "g.json"
    save_graph(g, p)
    assert load_graph(p) == g
    doc = json.loads(p.read_text())
    assert set(doc) >= {"n", "edges", "kappa"}


@pytest.mark.parametrize(
    "doc, where",
    [
        ({"edges": [], "kappa": [1]}, "n"),
        ({"n": 2, "edges": [{"u": 0, "v": 1}], "kappa": [1, 1]}, "edges[0]"),
        ({"n": 2, "edges": [{"u": 0, "v": 1, "c": 1}], "kappa": [1]}, "kappa"),
        ({"n": 2, "edges": [{"u": 0, "v": 3, "c": 1}], "kappa": [1, 1]}, "edges[0]"),
    ],
)
def test_graph_loader_reports_location(doc, where):
    with pytest.raises(GraphError) as exc:
        graph_from_dict(doc)
    assert where in str(exc.value)


def test_path_graph_edges_in_order():
    g = path_graph(5, 1.0)
    assert g.edges.tolist() == [[0, 1], [1, 2], [2, 3], [3, 4]]
