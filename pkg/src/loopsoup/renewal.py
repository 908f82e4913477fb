"""Closed edges of the loop soup on Z as a renewal process.

On Z with unit conductances and uniform killing kappa, every quantity is
explicit in ``rho = log(1 + kappa/2 + sqrt(kappa + kappa^2/4))``: the walk's
exit probabilities are powers of ``exp(-rho)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate

from .errors import NegativeMass, QuadratureFailure
from .graph import WeightedGraph, exit_kernel, path_graph
from .sampler import build_plan, sample_batches

log = logging.getLogger(__name__)


def rho(kappa: float) -> float:
    if not kappa > 0:
        raise ValueError("kappa must be > 0")
    return math.log(1 + kappa / 2 + math.sqrt(kappa + kappa * kappa / 4))


def closed_edge_prob(kappa: float, alpha: float) -> float:
    """``(1 - exp(-2 rho))**alpha``: probability that a given edge is crossed by no loop."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return math.exp(alpha * math.log(-math.expm1(-2 * rho(kappa))))


def conditional_closed_prob(kappa: float, alpha: float, n):
    """``q(n) = ((1 - e^{-2 rho}) / (1 - e^{-2 rho (n+1)}))**alpha``: {n, n+1} closed given {0, 1} closed."""
    r = rho(kappa)
    n = np.asarray(n, dtype=float)
    val = np.exp(alpha * (np.log(-np.expm1(-2 * r)) - np.log(-np.expm1(-2 * r * (n + 1)))))
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True)
class GapLaw:
    """``nu[n-1]`` is the probability that the next closed edge is n steps further."""

    kappa: float
    alpha: float
    nu: np.ndarray
    deficit: float  # 1 - sum(nu): mass of gaps longer than the table
    clamped_residual: float  # largest negative entry removed by clamping

    @property
    def n_max(self) -> int:
        return len(self.nu)


def gap_law(kappa: float, alpha: float, n_max: int) -> GapLaw:
    """Recover the gap law from q by the renewal recursion ``nu(n) = q(n) - sum_{m<n} nu(m) q(n-m)``."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    q = conditional_closed_prob(kappa, alpha, np.arange(1, n_max + 1))
    q = np.atleast_1d(q)
    nu = np.zeros(n_max)
    for n in range(1, n_max + 1):
        conv = float(np.dot(nu[: n - 1], q[n - 2 :: -1])) if n > 1 else 0.0
        nu[n - 1] = q[n - 1] - conv
    worst = float(-nu.min()) if nu.min() < 0 else 0.0
    if worst > 1e-8:
        raise NegativeMass(f"recovered gap law has an entry of {-worst:.3e}")
    if worst > 0:
        log.info("clamped gap-law entries of size up to %.3e", worst)
    nu = np.clip(nu, 0.0, None)
    nu.setflags(write=False)
    return GapLaw(kappa, alpha, nu, float(1.0 - nu.sum()), worst)


def gap_law_to_deficit(kappa: float, alpha: float, deficit: float = 1e-3, n_start: int = 64) -> GapLaw:
    """Double the table until the missing mass drops below ``deficit``."""
    n = n_start
    while True:
        law = gap_law(kappa, alpha, n)
        if law.deficit < deficit or n > 1 << 16:
            return law
        n *= 2


def reconvolve(nu: np.ndarray) -> np.ndarray:
    """``q(n) = sum_k nu^{*k}(n)`` via ``q(n) = nu(n) + sum_{m<n} nu(m) q(n-m)``."""
    N = len(nu)
    q = np.zeros(N)
    for n in range(1, N + 1):
        q[n - 1] = nu[n - 1] + (float(np.dot(nu[: n - 1], q[n - 2 :: -1])) if n > 1 else 0.0)
    return q


# -- subordinator limit -------------------------------------------------------


def potential_density(u, kappa: float, alpha: float):
    r = 2 * math.sqrt(kappa)
    return (r / -np.expm1(-r * np.asarray(u, dtype=float))) ** alpha


def laplace_potential(kappa: float, alpha: float, s: float, tol: float = 1e-10) -> float:
    """``I(s) = int_0^inf (2 sqrt(kappa) / (1 - e^{-2 sqrt(kappa) u}))**alpha e^{-s u} du``.

    The u^-alpha singularity on [0, 1/sqrt(kappa)] is removed by u = v^{1/(1-alpha)}.
    """
    if not (0 < alpha < 1):
        raise ValueError("alpha must lie in (0, 1)")
    u0 = 1 / math.sqrt(kappa)
    p = 1 / (1 - alpha)

    def head(v):
        u = v**p
        return potential_density(u, kappa, alpha) * math.exp(-s * u) * p * v ** (p - 1) if v > 0 else p * (2 * math.sqrt(kappa) / (2 * math.sqrt(kappa))) ** alpha

    def body(u):
        return potential_density(u, kappa, alpha) * math.exp(-s * u)

    a, ea = integrate.quad(head, 0.0, u0 ** (1 / p), epsabs=tol, epsrel=tol, limit=200)
    b, eb = integrate.quad(body, u0, math.inf, epsabs=tol, epsrel=tol, limit=200)
    if not (math.isfinite(a) and math.isfinite(b)) or ea + eb > 100 * tol * max(1.0, a + b):
        raise QuadratureFailure(f"quadrature error estimate {ea + eb:.2e} too large")
    return a + b


def q_laplace(kappa: float, alpha: float, s: float, include_zero: bool = True, tail: float = 1e-15) -> float:
    """``sum_n q(n) e^{-s n}``, truncated where the remaining terms are below ``tail``.

    With ``include_zero`` the sum starts at n = 0 (q(0) = 1).
    """
    # q <= 1, so the remainder after N terms is at most e^{-s(N+1)}/(1 - e^{-s})
    N = int(math.ceil((-math.log(tail) - math.log(-math.expm1(-s))) / s)) + 1
    n = np.arange(0 if include_zero else 1, N + 1)
    terms = np.atleast_1d(conditional_closed_prob(kappa, alpha, n)) * np.exp(-s * n)
    return math.fsum(terms)


@dataclass(frozen=True)
class LimitRow:
    s: float
    eps: float
    limit: float
    scaled: float
    rel_error: float


def subordinator_limit_check(kappa: float, alpha: float, s_grid: Sequence[float], eps_grid: Sequence[float]) -> list[LimitRow]:
    """Compare ``eps^{(1-alpha)/2} qhat^{(kappa eps)}(s sqrt(eps))`` with its limit I(s)."""
    if not (0 < alpha < 1):
        raise ValueError("alpha must lie in (0, 1)")
    rows = []
    for s in s_grid:
        I = laplace_potential(kappa, alpha, s)
        for eps in eps_grid:
            scaled = eps ** ((1 - alpha) / 2) * q_laplace(kappa * eps, alpha, s * math.sqrt(eps))
            rows.append(LimitRow(float(s), float(eps), I, scaled, abs(scaled / I - 1)))
    return rows


# -- finite-segment Monte Carlo -----------------------------------------------


def segment_graph(M: int, kappa: float) -> WeightedGraph:
    """Path on -M..M (vertex i is site i - M) carrying the restriction of the soup on Z.

    The end vertices get the missing conductance as extra killing, so every
    vertex has lam = 2 + kappa, as on Z.
    """
    n = 2 * M + 1
    kap = np.full(n, float(kappa))
    kap[0] += 1.0
    kap[-1] += 1.0
    return path_graph(n, kap)


def half_line_exit(kappa: float, M: int) -> np.ndarray:
    """``H[k-1]``: probability that the walk from k reaches 0 before dying, on sites 0..M.

    Stepping past M counts as dying.  On the whole half-line the value is
    ``exp(-rho k)``; the truncation lowers it by less than ``exp(-rho (M - k))``.
    """
    kap = np.full(M + 1, float(kappa))
    kap[[0, -1]] += 1.0
    H = exit_kernel(path_graph(M + 1, kap), range(1, M + 1))
    return H.matrix[:, list(H.outside).index(0)].copy()


@dataclass(frozen=True)
class SegmentStats:
    """Closed-edge statistics from soups on the segment, per intensity."""

    M: int
    kappa: float
    alpha: float
    replicas: int
    center_closed: int  # replicas with edge {0, 1} closed
    cond_closed: dict  # n -> replicas with {0,1} and {n,n+1} closed
    edge_closed: np.ndarray  # per edge of the central half: closed count
    gap_counts: np.ndarray  # gap_counts[g-1]: gaps of length g to the right of edge {0,1}, first gap only
    boundary_bound: float


def segment_monte_carlo(
    M: int, kappa: float, alphas: Sequence[float], replicas: int, seed: int, n_values: Sequence[int] = (1, 2, 5), max_gap: int = 200
) -> dict[float, SegmentStats]:
    """Sample soups at max(alphas) on the segment and read off every smaller intensity via arrival marks."""
    g = segment_graph(M, kappa)
    plan = build_plan(g)
    amax = max(alphas)
    c = M  # site 0
    q = M // 2
    half = np.arange(c - q, c + q)  # edges {i, i+1} for sites in the central half
    acc = {
        a: dict(center=0, cond={n: 0 for n in n_values}, edges=np.zeros(len(half), np.int64), gaps=np.zeros(max_gap, np.int64))
        for a in alphas
    }
    for batch in sample_batches(g, plan, amax, replicas, seed):
        for a in alphas:
            sub = batch.up_to(a) if a < amax else batch
            open_ = sub.open_edges(g)  # edge i of a path joins i and i+1
            closed = ~open_
            st = acc[a]
            st["center"] += int(closed[:, c].sum())
            for n in n_values:
                st["cond"][n] += int((closed[:, c] & closed[:, c + n]).sum())
            st["edges"] += closed[:, half].sum(axis=0)
            # first gap to the right of the centre edge, given it is closed
            right = closed[:, c + 1 : c + 1 + max_gap]
            has = right.any(axis=1) & closed[:, c]
            first = np.argmax(right, axis=1) + 1
            st["gaps"] += np.bincount(first[has] - 1, minlength=max_gap)[:max_gap]
    r = rho(kappa)
    return {
        a: SegmentStats(M, kappa, a, replicas, st["center"], st["cond"], st["edges"], st["gaps"], math.exp(-r * M))
        for a, st in acc.items()
    }
