"""Paired nonparametric tests and multiple-testing procedures."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

#: Largest number of nonzero differences for which the exact null is enumerated.
EXACT_THRESHOLD = 25


class Tail(str, Enum):
    GREATER = "greater"
    TWO_SIDED = "two_sided"


@dataclass(frozen=True)
class TestResult:
    """Outcome of a signed-rank test.

    ``statistic`` is the positive-rank sum W+, ``n_effective`` the number of
    nonzero differences and ``effect_size`` the mean of all differences
    (zeros included).
    """

    __test__ = False  # not a pytest class

    statistic: float
    p_value: float
    n_effective: int
    effect_size: float


def _as_differences(diffs) -> np.ndarray:
    d = np.asarray(diffs, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("paired differences must be nonempty")
    if not np.all(np.isfinite(d)):
        raise ValueError("paired differences must be finite")
    return d


@lru_cache(maxsize=256)
def _exact_null_counts(doubled_ranks: tuple[int, ...]) -> np.ndarray:
    # counts[s] = number of sign assignments whose doubled W+ equals s
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    counts.setflags(write=False)
    return counts


def _exact_tails(ranks: np.ndarray, w_plus: float) -> tuple[float, float]:
    """Return (P(W+ >= w), P(W+ <= w)) under the conditional sign-flip null."""
    # midranks are multiples of 1/2, so doubled ranks are integers
    doubled = tuple(sorted(int(round(2 * r)) for r in ranks))
    counts = _exact_null_counts(doubled)
    w2 = int(round(2 * w_plus))
    n_assign = float(2 ** len(doubled))
    upper = counts[w2:].sum() / n_assign
    lower = counts[: w2 + 1].sum() / n_assign
    return float(upper), float(lower)


def _normal_tails(ranks: np.ndarray, w_plus: float) -> tuple[float, float]:
    n = ranks.size
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(float) ** 3 - tie_counts)) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        return 1.0, 1.0
    sd = math.sqrt(var)
    upper = float(ndtr(-(w_plus - mean - 0.5) / sd))
    lower = float(ndtr((w_plus - mean + 0.5) / sd))
    return upper, lower


def wilcoxon_signed_rank(diffs: Sequence[float] | np.ndarray, tail: Tail | str = Tail.GREATER) -> TestResult:
    """Wilcoxon matched-pairs signed-rank test on paired differences.

    Zero differences are dropped before ranking and tied magnitudes get
    midranks. With at most ``EXACT_THRESHOLD`` nonzero differences the p-value
    is exact (conditional on the observed ranks); beyond that a normal
    approximation with tie and continuity corrections is used.
    ``Tail.GREATER`` tests whether the median difference exceeds zero.
    """
    tail = Tail(tail)
    d = _as_differences(diffs)
    effect = float(d.mean())
    nz = d[d != 0]
    if nz.size == 0:
        return TestResult(statistic=0.0, p_value=1.0, n_effective=0, effect_size=effect)

    ranks = rankdata(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    if nz.size <= EXACT_THRESHOLD:
        upper, lower = _exact_tails(ranks, w_plus)
    else:
        upper, lower = _normal_tails(ranks, w_plus)

    if tail is Tail.GREATER:
        p = upper
    else:
        p = 2.0 * min(upper, lower)
    p = min(max(p, 0.0), 1.0)
    return TestResult(statistic=w_plus, p_value=p, n_effective=int(nz.size), effect_size=effect)


def benjamini_hochberg(p_values: Sequence[float], q: float) -> set[int]:
    """Benjamini-Hochberg step-up procedure.

    Returns the original indices of rejected hypotheses: the r smallest
    p-values, where r = max{i : P(i) <= i*q/k}. Tied p-values at the
    boundary are rejected together.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    p = np.asarray(p_values, dtype=float).ravel()
    k = p.size
    if k == 0:
        return set()
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    thresholds = np.arange(1, k + 1) * q / k
    passing = np.nonzero(p[order] <= thresholds)[0]
    if passing.size == 0:
        return set()
    cutoff = p[order][passing[-1]]
    return {int(i) for i in np.nonzero(p <= cutoff)[0]}
