"""Wilcoxon signed-rank test for paired per-seed results."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from ..errors import DegenerateTestError

EXACT_MAX_N = 12


class WilcoxonResult(NamedTuple):
    statistic: float   # W+, the sum of ranks of positive differences
    p_value: float
    n: int             # non-zero differences used
    exact: bool


def _signed_ranks(paired) -> tuple[np.ndarray, np.ndarray]:
    pairs = np.asarray(paired, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("expected a sequence of (a, b) pairs")
    d = pairs[:, 0] - pairs[:, 1]
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateTestError("all paired differences are zero")
    return rankdata(np.abs(d)), d > 0


def exact_p_value(ranks: np.ndarray, w_plus: float) -> float:
    """Two-sided p by enumerating all 2^n sign assignments of the given ranks."""
    n = len(ranks)
    signs = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
    dist = signs @ ranks
    mean = ranks.sum() / 2.0
    # compare on a doubled integer scale so tied (half-integer) ranks stay exact
    dev = np.abs(np.round(2 * dist) - round(2 * mean))
    obs = abs(round(2 * w_plus) - round(2 * mean))
    return float(min(1.0, (dev >= obs).sum() / 2 ** n))


def wilcoxon_signed_rank(paired) -> WilcoxonResult:
    """Two-sided test of zero median difference over (a_i, b_i) pairs.

    Zero differences are dropped.  Exact for up to 12 non-zero differences,
    otherwise a normal approximation with tie and continuity corrections.
    """
    ranks, pos = _signed_ranks(paired)
    n = len(ranks)
    w_plus = float(ranks[pos].sum())
    if n <= EXACT_MAX_N:
        return WilcoxonResult(w_plus, exact_p_value(ranks, w_plus), n, True)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (counts ** 3 - counts).sum() / 48.0
    if var <= 0:
        raise DegenerateTestError("zero variance in the signed-rank statistic")
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return WilcoxonResult(w_plus, float(min(1.0, math.erfc(z / math.sqrt(2.0)))), n, False)
