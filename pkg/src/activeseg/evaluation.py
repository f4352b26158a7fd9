"""Segmentation evaluation: Dice overlap and the Mann-Whitney rank-sum test."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError

EXACT_GROUP_LIMIT = 8


def dice(pred: np.ndarray, truth: np.ndarray, label: int) -> float:
    """Dice overlap 2|A&B| / (|A|+|B|) for one label value.

    A label absent from both volumes scores 1.0: correctly predicting an
    absent class should not be penalized.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"label volumes differ in shape: {pred.shape} vs {truth.shape}")
    a = pred == label
    b = truth == label
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def mean_foreground_dice(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    """Mean Dice over the foreground labels 1..num_classes-1."""
    if num_classes < 2:
        raise DomainError("mean foreground Dice needs at least one foreground class")
    return float(np.mean([dice(pred, truth, c) for c in range(1, num_classes)]))


def per_class_dice(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> list[float]:
    return [dice(pred, truth, c) for c in range(1, num_classes)]


def _tie_averaged_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _u_statistic(group_a: np.ndarray, group_b: np.ndarray) -> float:
    combined = np.concatenate([group_a, group_b])
    ranks = _tie_averaged_ranks(combined)
    n_a = group_a.size
    rank_sum_a = float(ranks[:n_a].sum())
    return rank_sum_a - n_a * (n_a + 1) / 2.0


def _exact_p_two_sided(group_a: np.ndarray, group_b: np.ndarray, u_obs: float) -> float:
    """Exact permutation p-value via a rank-sum counting DP (tie aware).

    Ranks are doubled so tie-averaged ranks become integers; the DP counts,
    for every achievable doubled rank sum, how many size-n_a subsets of the
    pooled sample reach it.
    """
    n_a = group_a.size
    combined = np.concatenate([group_a, group_b])
    doubled = np.rint(2.0 * _tie_averaged_ranks(combined)).astype(int)
    max_sum = int(doubled.sum())
    counts = [[0] * (max_sum + 1) for _ in range(n_a + 1)]
    counts[0][0] = 1
    for r in doubled:
        for k in range(n_a, 0, -1):
            row_prev = counts[k - 1]
            row = counts[k]
            for s in range(max_sum - r, -1, -1):
                if row_prev[s]:
                    row[s + r] += row_prev[s]
    total = math.comb(combined.size, n_a)
    # doubled rank sum s maps to U = s/2 - n_a(n_a+1)/2; u_obs is a half-integer
    u_obs2 = int(round(2 * u_obs)) + n_a * (n_a + 1)
    at_most = sum(c for s, c in enumerate(counts[n_a]) if s <= u_obs2)
    at_least = sum(c for s, c in enumerate(counts[n_a]) if s >= u_obs2)
    p = 2.0 * min(at_most, at_least) / total
    return min(1.0, p)


def _normal_p_two_sided(group_a: np.ndarray, group_b: np.ndarray, u_obs: float) -> float:
    """Tie-corrected normal approximation with continuity correction."""
    n_a = group_a.size
    n_b = group_b.size
    n = n_a + n_b
    combined = np.concatenate([group_a, group_b])
    _, tie_counts = np.unique(combined, return_counts=True)
    tie_term = float(((tie_counts**3) - tie_counts).sum()) / (n * (n - 1))
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0.0:
        return 1.0
    mean = n_a * n_b / 2.0
    z = (abs(u_obs - mean) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def mann_whitney_u(
    group_a: Sequence[float], group_b: Sequence[float]
) -> tuple[float, float]:
    """Two-sided Mann-Whitney rank-sum test.

    Returns (U for group_a, two-sided p). Groups of at most
    ``EXACT_GROUP_LIMIT`` elements each use the exact tie-aware permutation
    distribution; larger groups use the tie-corrected normal approximation
    with continuity correction.
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DomainError("both groups must be non-empty")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DomainError("groups must contain finite values only")
    u_obs = _u_statistic(a, b)
    if a.size <= EXACT_GROUP_LIMIT and b.size <= EXACT_GROUP_LIMIT:
        p = _exact_p_two_sided(a, b, u_obs)
    else:
        p = _normal_p_two_sided(a, b, u_obs)
    return u_obs, p
