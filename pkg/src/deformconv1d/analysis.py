"""Offset statistics, unrolled deformed-kernel maps, and attention-spread
metrics.

Attention maps are ``[heads, T_q, T_k]`` with row-stochastic rows. All
entropies use the natural log, so the globalness of a uniform map over 1772
keys is ln 1772 = 7.480. Metrics are computed per head; callers average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError

_ROW_SUM_TOL = 1e-5


def _check_attention(weights: np.ndarray) -> np.ndarray:
    a = np.asarray(weights, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"attention map must be [heads,T_q,T_k], "
                         f"got shape {a.shape}")
    if a.min() < 0:
        raise ShapeError("attention weights must be nonnegative")
    row_sums = a.sum(axis=-1)
    if np.abs(row_sums - 1.0).max() > _ROW_SUM_TOL:
        worst = float(np.abs(row_sums - 1.0).max())
        raise ShapeError(f"rows must sum to 1 within {_ROW_SUM_TOL}, "
                         f"worst deviation {worst:.3g}")
    return a


def _entropy(p: np.ndarray) -> np.ndarray:
    """Natural-log entropy along the last axis, with 0 * log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def globalness(weights: np.ndarray) -> np.ndarray:
    """Mean per-query attention entropy, one value per head; in (0, ln T_k]."""
    a = _check_attention(weights)
    return _entropy(a).mean(axis=-1)


def verticality(weights: np.ndarray) -> np.ndarray:
    """Negated entropy of the query-averaged attention, per head.

    In [-ln T_k, 0]; closer to 0 means mass concentrated on few key columns.
    """
    a = _check_attention(weights)
    return -_entropy(a.mean(axis=1))


def diagonality(weights: np.ndarray) -> np.ndarray:
    """Negated mean distance of attention mass from the normalized diagonal.

    Positions are normalized by (length - 1), so an identity map scores
    exactly 0 at any size; each query attending its farthest key approaches
    -0.75 as lengths grow.
    """
    a = _check_attention(weights)
    _, t_q, t_k = a.shape
    if t_q < 2 or t_k < 2:
        raise ShapeError("diagonality needs T_q >= 2 and T_k >= 2")
    q = np.arange(t_q, dtype=np.float64) / (t_q - 1)
    k = np.arange(t_k, dtype=np.float64) / (t_k - 1)
    dist = np.abs(k[None, :] - q[:, None])
    return -(a * dist).sum(axis=-1).mean(axis=-1)


def _farthest_key_diagonality(length: int) -> float:
    """Diagonality of the square map whose rows one-hot their farthest key."""
    u = np.arange(length, dtype=np.float64) / (length - 1)
    return float(-np.maximum(u, 1.0 - u).mean())


@dataclass(frozen=True)
class MetricBounds:
    globalness_upper: float
    verticality_lower: float
    diagonality_lower: float


def metric_bounds(lengths) -> MetricBounds:
    """Attainable metric extremes for a corpus of encoded sequence lengths."""
    ls = [int(t) for t in lengths]
    if not ls:
        raise ShapeError("metric bounds need at least one sequence length")
    if min(ls) < 2:
        raise ShapeError("sequence lengths must be >= 2")
    top = float(np.log(max(ls)))
    diag = min(_farthest_key_diagonality(t) for t in ls)
    return MetricBounds(globalness_upper=top, verticality_lower=-top,
                        diagonality_lower=diag)


@dataclass(frozen=True)
class OffsetStats:
    """Boxplot summary of an offset sample, in frames."""

    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outlier_count: int
    n: int

    def as_dict(self) -> dict:
        return {
            "q1": self.q1, "median": self.median, "q3": self.q3,
            "whisker_low": self.whisker_low, "whisker_high": self.whisker_high,
            "outlier_count": self.outlier_count, "n": self.n,
        }


def _order_statistic(sorted_data: np.ndarray, p: float) -> float:
    """Linear interpolation of sorted data at rank p * (n - 1)."""
    n = sorted_data.size
    rank = p * (n - 1)
    lo = int(np.floor(rank))
    frac = rank - lo
    if lo + 1 >= n:
        return float(sorted_data[lo])
    a, b = sorted_data[lo], sorted_data[lo + 1]
    return float(a + frac * (b - a))


def offset_boxplot(samples) -> OffsetStats:
    """Quartiles at rank p*(n-1) with linear interpolation; whiskers are the
    extreme data points within 1.5 IQR of the quartiles."""
    data = np.asarray(samples, dtype=np.float64).reshape(-1)
    if data.size == 0:
        raise ShapeError("offset boxplot needs at least one sample")
    ordered = np.sort(data)
    q1 = _order_statistic(ordered, 0.25)
    median = _order_statistic(ordered, 0.5)
    q3 = _order_statistic(ordered, 0.75)
    iqr = q3 - q1
    fence_low = q1 - 1.5 * iqr
    fence_high = q3 + 1.5 * iqr
    inside = data[(data >= fence_low) & (data <= fence_high)]
    whisker_low = float(inside.min()) if inside.size else float(q1)
    whisker_high = float(inside.max()) if inside.size else float(q3)
    outliers = int(((data < whisker_low) | (data > whisker_high)).sum())
    return OffsetStats(q1=float(q1), median=float(median), q3=float(q3),
                       whisker_low=whisker_low, whisker_high=whisker_high,
                       outlier_count=outliers, n=int(data.size))


@dataclass
class UnrollMap:
    """Sparse (output step, rounded input position) -> overlap count."""

    counts: dict
    dropped: int
    t_out: int
    input_length: int

    def total(self) -> int:
        return sum(self.counts.values()) + self.dropped

    def triples(self):
        """Sorted (t_out, input_pos, count) rows for CSV export."""
        return [(t, p, c) for (t, p), c in sorted(self.counts.items())]


def unroll_kernels(p_prime: np.ndarray, input_length: int) -> UnrollMap:
    """Round deformed positions to the grid and count overlaps per location.

    Positions rounding outside [0, input_length) are dropped but counted, so
    ``total() == T_out * G_d * K`` always. Ties round toward +inf.
    """
    p = np.asarray(p_prime, dtype=np.float64)
    if p.ndim != 3:
        raise ShapeError(f"p_prime must be [T_out,G_d,K], got shape {p.shape}")
    rounded = np.floor(p + 0.5).astype(np.int64)
    counts: dict = {}
    dropped = 0
    for t in range(p.shape[0]):
        for pos in rounded[t].reshape(-1):
            if 0 <= pos < input_length:
                key = (t, int(pos))
                counts[key] = counts.get(key, 0) + 1
            else:
                dropped += 1
    return UnrollMap(counts=counts, dropped=dropped, t_out=p.shape[0],
                     input_length=input_length)


def corpus_aggregate(dumps) -> OffsetStats:
    """Boxplot statistics over the union of offset dumps for one layer.

    All dumps must share the tap count (their last dimension).
    """
    arrays = [np.asarray(d, dtype=np.float64) for d in dumps]
    if not arrays:
        raise ShapeError("corpus aggregation needs at least one dump")
    taps = {a.shape[-1] for a in arrays}
    if len(taps) != 1:
        raise FormatError(f"inconsistent tap counts across dumps: {sorted(taps)}")
    return offset_boxplot(np.concatenate([a.reshape(-1) for a in arrays]))
