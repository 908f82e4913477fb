"""Cross-checks between independent routes to the same quantities.

Each check returns a :class:`Check`; :func:`run_checks` runs them in order
and :func:`require` raises on the first failure.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .complete import semigroup_finer
from .errors import LoopSoupError, VerificationFailed
from .exact import prob_connected_complete, prob_equal, prob_finer, prob_finer_complete, prob_finer_exit
from .graph import WeightedGraph, build_graph, complete_graph, logdet_green, path_graph
from .loops import alpha_permanent_partition_form, alpha_permanent_zero_diag, enumerate_mass, total_mass, validate_loop
from .partition import Partition, all_partitions
from .renewal import conditional_closed_prob, gap_law, reconvolve
from .sampler import LoopSoup, batch_cluster_labels, build_plan, finer_than, sample_batch
from .stats import z_score


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    value: float  # worst observed discrepancy
    limit: float
    detail: str = ""


def fixtures() -> dict[str, WeightedGraph]:
    """The bundled small graphs: K_4, the 4-vertex path and a single edge, all with kappa = 1."""
    return {
        "K4": complete_graph(4, 1.0),
        "P4": path_graph(4, 1.0),
        "edge": build_graph([(0, 1, 1.0)], 1.0, n=2, name="edge"),
    }


def check_mass_identity(tol: float) -> Check:
    worst = 0.0
    bracket_ok = True
    for g in fixtures().values():
        sign, ld = np.linalg.slogdet(np.eye(g.n) - g.P)
        rhs = logdet_green(g) + float(np.sum(np.log(g.lam)))
        worst = max(worst, float(abs(-ld - rhs)))
        em = enumerate_mass(g, max_length=8)
        tm = total_mass(g)
        bracket_ok &= em.value <= tm + tol and tm <= em.value + em.tail_bound + tol
    return Check("mass_identity", worst < tol and bracket_ok, worst, tol, "" if bracket_ok else "enumeration does not bracket the mass")


def check_dual_semigroup(tol: float) -> Check:
    worst = 0.0
    for g in fixtures().values():
        for pi in all_partitions(g.n):
            for a in (0.5, 1.0, 2.0):
                worst = max(worst, abs(prob_finer(g, pi, a) - prob_finer_exit(g, pi, a, check=False)))
    return Check("dual_semigroup", worst < tol, worst, tol)


def check_normalization(tol: float) -> Check:
    worst = 0.0
    for g in fixtures().values():
        for a in (0.5, 1.0, 2.0):
            s = math.fsum(prob_equal(g, pi, a) for pi in all_partitions(g.n))
            worst = max(worst, abs(s - 1))
    for n in range(2, 7):
        g = complete_graph(n, 1.0)
        worst = max(worst, abs(prob_equal(g, Partition.whole(n), 1.0) - prob_connected_complete(n, 1.0, 1.0)))
    return Check("normalization", worst < max(tol, 1e-9), worst, max(tol, 1e-9))


def check_packet_semigroup(tol: float) -> Check:
    worst = 0.0
    for n in (3, 4, 6):
        for eps in (0.5, 1.0, 2.0):
            for sizes in ([1] * n, [2] + [1] * (n - 2), [n - 1, 1]):
                for t in (0.3, 1.0, 2.5):
                    a = semigroup_finer(n, eps, t, sizes)
                    b = prob_finer_complete(n, n * eps, t, sizes)
                    worst = max(worst, abs(a - b))
    return Check("packet_semigroup", worst < tol, worst, tol)


def check_renewal(tol: float) -> Check:
    worst = 0.0
    for kappa in (0.5, 2.0):
        for a in (0.5, 1.0):
            law = gap_law(kappa, a, 200)
            q = conditional_closed_prob(kappa, a, np.arange(1, 201))
            worst = max(worst, float(np.max(np.abs(reconvolve(np.asarray(law.nu)) - q))))
    return Check("renewal_reconvolution", worst < max(tol, 1e-8), worst, max(tol, 1e-8))


def check_permanents(tol: float) -> Check:
    rng = np.random.default_rng(11)
    bad = 0
    for r in range(2, 6):
        A = [[Fraction(int(rng.integers(0, 5)), int(rng.integers(1, 4))) if i != j else Fraction(0) for j in range(r)] for i in range(r)]
        alpha = Fraction(int(rng.integers(1, 5)), 2)
        bad += alpha_permanent_zero_diag(A, alpha, check=False) != alpha_permanent_partition_form(A, alpha)
    return Check("alpha_permanent_forms", bad == 0, float(bad), 0.0)


def check_sampler(replicas: int, seed: int, z_max: float = 4.0) -> Check:
    g = fixtures()["K4"]
    batch = sample_batch(g, build_plan(g), 1.0, replicas, seed)
    labels = batch_cluster_labels(g, batch.open_edges(g))
    worst = 0.0
    for pi in all_partitions(g.n):
        k = int(finer_than(labels, pi).sum())
        worst = max(worst, abs(z_score(k, replicas, prob_finer(g, pi, 1.0))))
    return Check("sampler_vs_exact", worst <= z_max, worst, z_max, f"{replicas} soups on K4")


def check_soup_file(g: WeightedGraph, soup: LoopSoup) -> Check:
    """Every dumped loop must be a valid loop of ``g`` with an arrival mark in [0, alpha]."""
    bad = 0
    for lp, a in zip(soup.loops, soup.alpha_marks):
        try:
            validate_loop(g, lp.rep)
        except LoopSoupError:
            bad += 1
            continue
        bad += not (0 <= a <= soup.alpha)
    return Check("soup_file", bad == 0, float(bad), 0.0, f"{len(soup.loops)} loops")


def run_checks(tol: float = 1e-10, replicas: int = 20000, seed: int = 1) -> list[Check]:
    steps: list[Callable[[], Check]] = [
        lambda: check_mass_identity(tol),
        lambda: check_dual_semigroup(tol),
        lambda: check_normalization(tol),
        lambda: check_packet_semigroup(tol),
        lambda: check_renewal(tol),
        lambda: check_permanents(tol),
        lambda: check_sampler(replicas, seed),
    ]
    return [step() for step in steps]


def require(checks: list[Check]) -> None:
    for c in checks:
        if not c.passed:
            raise VerificationFailed(f"{c.name}: discrepancy {c.value:.3e} exceeds {c.limit:.3e} {c.detail}".rstrip())


def as_records(checks: list[Check]) -> list[dict]:
    return [asdict(c) for c in checks]
