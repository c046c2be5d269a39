"""Listwise ranking ingredients: quintile labels, the ListNet loss,
NDCG@k for long and short books, and the score-to-position rule.

All functions operate on one cross-section (one rebalance date) at a
time. Ties are always broken by ascending instrument id so results are
independent of input order.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, log_softmax_rows, neg, tensor_sum, transpose

N_BINS = 5
MAX_BIN = N_BINS - 1


def _ids_array(ids) -> np.ndarray:
    arr = np.asarray(ids)
    if len(set(arr.tolist())) != arr.size:
        raise ValueError("instrument ids must be unique within a cross-section")
    return arr


def quintile_sizes(n: int) -> np.ndarray:
    """Split n into 5 near-equal contiguous bin sizes, remainder going to
    the lowest bins: n=7 -> [2, 2, 1, 1, 1]."""
    base, extra = divmod(n, N_BINS)
    return np.array([base + (1 if i < extra else 0) for i in range(N_BINS)])


def assign_quintiles(next_returns, ids) -> np.ndarray:
    """Label each instrument with its realized next-period return quintile.

    Returns an int array aligned with the input order: 0 for the lowest
    returns up to 4 for the highest. Instruments are sorted ascending by
    return (ties by id) and cut into 5 contiguous bins of near-equal size.
    """
    returns = np.asarray(next_returns, dtype=np.float64)
    ids = _ids_array(ids)
    n = returns.size
    if n < N_BINS:
        raise ValueError(f"need at least {N_BINS} instruments to form quintiles, got {n}")
    if ids.size != n:
        raise ValueError(f"ids length {ids.size} does not match returns length {n}")
    order = np.lexsort((ids, returns))
    bins_sorted = np.repeat(np.arange(N_BINS), quintile_sizes(n))
    bins = np.empty(n, dtype=np.int64)
    bins[order] = bins_sorted
    return bins


def _scores_as_row(scores) -> Tensor:
    """Coerce model output (n, 1), (1, n) or a flat array into a (1, n) Tensor."""
    if not isinstance(scores, Tensor):
        return Tensor(np.asarray(scores, dtype=np.float64).reshape(1, -1))
    if scores.data.ndim == 2 and scores.data.shape[1] == 1:
        return transpose(scores)
    if scores.data.ndim == 2 and scores.data.shape[0] == 1:
        return scores
    raise ValueError(f"scores must be a column or row vector, got shape {scores.data.shape}")


def listnet_loss(labels, scores) -> Tensor:
    """Top-one ListNet loss: cross-entropy between the label softmax and
    the score softmax over the list.

    Labels enter the softmax as their raw bin integers. The result is a
    scalar Tensor differentiable w.r.t. ``scores``; it is non-negative
    and reaches the label-distribution entropy exactly when the two
    softmax distributions coincide.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(1, -1)
    s = _scores_as_row(scores)
    if s.data.shape[1] != y.shape[1]:
        raise ValueError(f"labels length {y.shape[1]} does not match scores length {s.data.shape[1]}")
    target = np.exp(y - y.max())
    target /= target.sum()
    return neg(tensor_sum(Tensor(target) * log_softmax_rows(s)))


def dcg_at_k(gains_in_rank_order: np.ndarray, k: int) -> float:
    """Discounted cumulative gain of the first k entries of an already
    ranked gain sequence."""
    top = gains_in_rank_order[:k]
    discounts = 1.0 / np.log2(np.arange(2, top.size + 2))
    return float((top * discounts).sum())


def ndcg_at_k(labels, scores, k: int, direction: str = "long") -> float:
    """NDCG@k of a scored cross-section, in [0, 1].

    ``long`` ranks by descending score with gain 2^bin - 1. ``short``
    inverts the labels (bin' = 4 - bin) and ranks by ascending score, so
    correctly placing the worst instruments at the bottom scores highly.
    A cross-section whose ideal DCG is zero (no relevant instruments)
    counts as perfectly ranked.
    """
    bins = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if k < 1 or k > bins.size:
        raise ValueError(f"k must lie in [1, {bins.size}], got {k}")
    if s.size != bins.size:
        raise ValueError(f"labels length {bins.size} does not match scores length {s.size}")
    if direction == "long":
        rank_key = -s
        rel = bins
    elif direction == "short":
        rank_key = s
        rel = MAX_BIN - bins
    else:
        raise ValueError(f"direction must be 'long' or 'short', got {direction!r}")
    order = np.lexsort((np.arange(bins.size), rank_key))
    gains = (2.0 ** rel - 1.0)[order]
    ideal = np.sort(2.0 ** rel - 1.0)[::-1]
    ideal_dcg = dcg_at_k(ideal, k)
    if ideal_dcg == 0.0:
        return 1.0
    return dcg_at_k(gains, k) / ideal_dcg


def average_ndcg_at_k(labels, scores, k: int) -> float:
    """Equal-weight mean of the long and short NDCG@k for one rebalance."""
    return 0.5 * (ndcg_at_k(labels, scores, k, "long") + ndcg_at_k(labels, scores, k, "short"))


def scores_to_signal(scores, ids, top_m: int) -> np.ndarray:
    """Convert scores to portfolio positions: +1 for the top_m highest,
    -1 for the top_m lowest, 0 elsewhere. Ties break by ascending id."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    ids = _ids_array(ids)
    n = s.size
    if ids.size != n:
        raise ValueError(f"ids length {ids.size} does not match scores length {n}")
    if top_m < 1 or 2 * top_m > n:
        raise ValueError(f"top_m must satisfy 1 <= 2*top_m <= n, got top_m={top_m}, n={n}")
    order = np.lexsort((ids, s))
    signal = np.zeros(n, dtype=np.float64)
    signal[order[:top_m]] = -1.0
    signal[order[-top_m:]] = 1.0
    return signal
