"""Small statistical helpers shared by the Monte Carlo checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


def binomial_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Clopper-Pearson interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n) if n > 0 else math.inf


def z_score(k: int, n: int, p: float) -> float:
    """Standardized deviation of k successes in n trials from the exact probability p."""
    s = binomial_sigma(p, n)
    if s == 0:
        return 0.0 if k == round(n * p) else math.inf
    return (k / n - p) / s


@dataclass(frozen=True)
class ChiSquare:
    statistic: float
    dof: int
    pvalue: float
    cells: int


def pooled_chisquare(observed, expected, min_expected: float = 5.0) -> ChiSquare:
    """Goodness-of-fit chi-square after pooling cells with small expectation.

    Cells are sorted by expectation and merged from the small end until each
    pooled cell reaches ``min_expected``.  ``expected`` must sum to the number
    of observations (the tail left out of a truncated law goes in a final cell).
    """
    obs = np.asarray(observed, dtype=float)
    exp = np.asarray(expected, dtype=float)
    order = np.argsort(exp)
    po, pe = [], []
    acc_o = acc_e = 0.0
    for i in order:
        acc_o += obs[i]
        acc_e += exp[i]
        if acc_e >= min_expected:
            po.append(acc_o)
            pe.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if pe:
            po[-1] += acc_o
            pe[-1] += acc_e
        else:
            po.append(acc_o)
            pe.append(acc_e)
    po, pe = np.array(po), np.array(pe)
    if len(pe) < 2:
        return ChiSquare(0.0, 0, 1.0, len(pe))
    stat = float(np.sum((po - pe) ** 2 / pe))
    dof = len(pe) - 1
    return ChiSquare(stat, dof, float(stats.chi2.sf(stat, dof)), len(pe))


def bonferroni(pvalues) -> float:
    p = np.asarray(pvalues, dtype=float)
    return float(min(1.0, p.min() * len(p))) if len(p) else 1.0


def two_proportion_pvalue(k1: int, n1: int, k2: int, n2: int) -> float:
    """Two-sided p-value of the pooled two-proportion z test."""
    p = (k1 + k2) / (n1 + n2)
    s = math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    if s == 0:
        return 1.0
    z = (k1 / n1 - k2 / n2) / s
    return float(2 * stats.norm.sf(abs(z)))


def homogeneity_pvalue(successes, trials) -> float:
    """Chi-square test that all groups share one success probability."""
    k = np.asarray(successes, dtype=float)
    n = np.asarray(trials, dtype=float)
    table = np.vstack([k, n - k])
    if np.any(table.sum(axis=1) == 0):
        return 1.0
    return float(stats.chi2_contingency(table, correction=False).pvalue)
