"""Quintile labels, ListNet loss, NDCG and signal construction.

NDCG is validated against a brute-force oracle that enumerates every
permutation of the list and computes DCG from first principles.
"""

import itertools
import math

import numpy as np
import numpy.testing as npt
import pytest

from fenrank.autodiff import Parameter, backward
from fenrank.ranking import (
    assign_quintiles,
    average_ndcg_at_k,
    dcg_at_k,
    listnet_loss,
    ndcg_at_k,
    quintile_sizes,
    scores_to_signal,
)
from helpers import assert_grads_close, finite_difference_grads


# ---------------------------------------------------------------------------
# brute-force oracles


def oracle_dcg(gains, k):
    """DCG@k from first principles: sum over the first k ranked items of
    gain / log2(1 + position)."""
    return sum(g / math.log2(pos + 1) for pos, g in enumerate(gains[:k], start=1))


def oracle_ndcg(bins, scores, k, direction):
    """Exhaustive-permutation NDCG: the ideal DCG is found by trying all
    n! orderings rather than by sorting. Scores must be distinct."""
    bins = list(bins)
    rel = bins if direction == "long" else [4 - b for b in bins]
    reverse = direction == "long"
    order = sorted(range(len(bins)), key=lambda i: scores[i], reverse=reverse)
    realized = oracle_dcg([2 ** rel[i] - 1 for i in order], k)
    best = max(
        oracle_dcg([2 ** rel[i] - 1 for i in perm], k)
        for perm in itertools.permutations(range(len(bins)))
    )
    if best == 0:
        return 1.0
    return realized / best


# ---------------------------------------------------------------------------
# quintile labels


def test_quintile_sizes_examples():
    npt.assert_array_equal(quintile_sizes(10), [2, 2, 2, 2, 2])
    npt.assert_array_equal(quintile_sizes(30), [6, 6, 6, 6, 6])
    npt.assert_array_equal(quintile_sizes(7), [2, 2, 1, 1, 1])


@pytest.mark.parametrize("n", range(5, 41))
def test_quintile_sizes_enumeration(n):
    sizes = quintile_sizes(n)
    assert sizes.sum() == n
    assert sizes.max() - sizes.min() <= 1
    # remainder goes to the lowest bins, so sizes never increase
    assert (np.diff(sizes) <= 0).all()


def test_assign_quintiles_forced_split():
    bins = assign_quintiles(np.arange(1.0, 11.0), [f"c{i}" for i in range(10)])
    npt.assert_array_equal(bins, [0, 0, 1, 1, 2, 2, 3, 3, 4, 4])


def test_assign_quintiles_all_equal_ties_by_id():
    ids = ["g", "a", "i", "b", "c", "h", "d", "j", "e", "f"]
    bins = assign_quintiles(np.zeros(10), ids)
    by_id = {i: b for i, b in zip(ids, bins)}
    expected = {i: pos // 2 for pos, i in enumerate(sorted(ids))}
    assert by_id == expected
    npt.assert_array_equal(np.bincount(bins, minlength=5), [2, 2, 2, 2, 2])


def test_assign_quintiles_monotone_in_returns():
    rng = np.random.default_rng(31)
    for _ in range(50):
        n = rng.integers(5, 25)
        returns = rng.normal(size=n)
        bins = assign_quintiles(returns, np.arange(n))
        order = np.argsort(returns, kind="stable")
        assert (np.diff(bins[order]) >= 0).all(), "higher return must never get a lower bin"


def test_assign_quintiles_order_invariance():
    rng = np.random.default_rng(32)
    returns = rng.normal(size=13)
    ids = np.array([f"s{i:02d}" for i in range(13)])
    bins = assign_quintiles(returns, ids)
    perm = rng.permutation(13)
    bins_perm = assign_quintiles(returns[perm], ids[perm])
    npt.assert_array_equal(bins_perm, bins[perm])


def test_assign_quintiles_too_small():
    with pytest.raises(ValueError):
        assign_quintiles([1.0, 2.0, 3.0, 4.0], ["a", "b", "c", "d"])


def test_assign_quintiles_duplicate_ids():
    with pytest.raises(ValueError):
        assign_quintiles(np.arange(5.0), ["a", "a", "b", "c", "d"])


# ---------------------------------------------------------------------------
# ListNet loss


def test_listnet_entropy_at_matching_scores():
    # scores equal to labels: loss collapses to the entropy of softmax(y)
    y = [0, 1]
    p = np.exp(y) / np.exp(y).sum()
    entropy = -(p * np.log(p)).sum()
    loss = listnet_loss(y, np.array(y, dtype=float)).item()
    npt.assert_allclose(loss, entropy, atol=1e-10)
    npt.assert_allclose(loss, 0.5822, atol=5e-5)


def test_listnet_shift_invariance():
    rng = np.random.default_rng(33)
    for _ in range(20):
        y = rng.integers(0, 5, size=9)
        s = rng.normal(size=9)
        base = listnet_loss(y, s).item()
        assert abs(listnet_loss(y, s + rng.normal() * 10).item() - base) < 1e-12
        # label shifts cancel inside the softmax as well
        assert abs(listnet_loss(y + 3, s).item() - base) < 1e-12


def test_listnet_nonnegative_and_exceeds_entropy():
    rng = np.random.default_rng(34)
    for _ in range(50):
        y = rng.integers(0, 5, size=11)
        s = rng.normal(size=11) * 3
        loss = listnet_loss(y, s).item()
        p = np.exp(y - y.max()) / np.exp(y - y.max()).sum()
        entropy = -(p * np.log(p)).sum()
        assert loss >= 0.0
        # cross-entropy is minimised exactly at the label distribution
        assert loss >= entropy - 1e-12


def test_listnet_gradient_matches_finite_differences():
    rng = np.random.default_rng(35)
    scores = Parameter(rng.normal(size=(7, 1)))
    y = rng.integers(0, 5, size=7)
    numeric = finite_difference_grads(lambda: listnet_loss(y, scores), [scores])
    analytic = backward(listnet_loss(y, scores))
    assert_grads_close(analytic, numeric, [scores])


def test_listnet_length_mismatch():
    with pytest.raises(ValueError):
        listnet_loss([0, 1, 2], [0.1, 0.2])


# ---------------------------------------------------------------------------
# NDCG


def test_ndcg_perfect_ranking_is_one():
    bins = np.array([0, 1, 2, 3, 4])
    scores = np.array([10.0, 20.0, 30.0, 40.0, 50.0])
    assert ndcg_at_k(bins, scores, 2, "long") == pytest.approx(1.0)
    # for the short book a perfect model scores the worst bins lowest
    assert ndcg_at_k(bins, scores, 2, "short") == pytest.approx(1.0)


def test_ndcg_reversed_example_frozen():
    bins = [0, 1, 2, 3]
    scores = [4.0, 3.0, 2.0, 1.0]
    got = ndcg_at_k(bins, scores, 2, "long")
    want = oracle_ndcg(bins, scores, 2, "long")
    npt.assert_allclose(got, want, atol=1e-12)
    # frozen expected value: realized DCG 1/log2(3) over ideal 7 + 3/log2(3)
    expected = (1.0 / math.log2(3)) / (7.0 + 3.0 / math.log2(3))
    npt.assert_allclose(got, expected, atol=1e-12)


def test_ndcg_brute_force_equivalence_small_n():
    rng = np.random.default_rng(36)
    for _ in range(120):
        n = int(rng.integers(2, 7))
        bins = rng.integers(0, 5, size=n)
        scores = rng.permutation(n) + rng.uniform(-0.3, 0.3, size=n)
        k = int(rng.integers(1, n + 1))
        for direction in ("long", "short"):
            got = ndcg_at_k(bins, scores, k, direction)
            want = oracle_ndcg(bins, scores, k, direction)
            assert abs(got - want) < 1e-12
            assert 0.0 <= got <= 1.0


def test_ndcg_zero_ideal_dcg_defined_as_one():
    assert ndcg_at_k([0, 0, 0], [3.0, 2.0, 1.0], 2, "long") == 1.0
    # all best-bin labels invert to all-zero relevance on the short side
    assert ndcg_at_k([4, 4, 4], [3.0, 2.0, 1.0], 2, "short") == 1.0


def test_ndcg_adjacent_repair_never_decreases():
    rng = np.random.default_rng(37)
    for _ in range(60):
        n = 6
        bins = rng.integers(0, 5, size=n)
        scores = rng.normal(size=n)
        order = np.argsort(-scores)
        # find an adjacent inversion in rank space and repair it by swapping scores
        for pos in range(n - 1):
            i, j = order[pos], order[pos + 1]
            if bins[i] < bins[j]:
                before = ndcg_at_k(bins, scores, n, "long")
                swapped = scores.copy()
                swapped[i], swapped[j] = swapped[j], swapped[i]
                after = ndcg_at_k(bins, swapped, n, "long")
                assert after >= before - 1e-12
                break


def test_ndcg_invalid_k():
    with pytest.raises(ValueError):
        ndcg_at_k([0, 1, 2], [1.0, 2.0, 3.0], 4)
    with pytest.raises(ValueError):
        ndcg_at_k([0, 1, 2], [1.0, 2.0, 3.0], 0)


def test_average_ndcg_is_mean_of_directions():
    rng = np.random.default_rng(38)
    bins = rng.integers(0, 5, size=8)
    scores = rng.normal(size=8)
    want = 0.5 * (ndcg_at_k(bins, scores, 2, "long") + ndcg_at_k(bins, scores, 2, "short"))
    assert average_ndcg_at_k(bins, scores, 2) == pytest.approx(want)


def test_dcg_at_k_direct():
    npt.assert_allclose(dcg_at_k(np.array([7.0, 3.0, 1.0]), 2), 7.0 + 3.0 / math.log2(3))


# ---------------------------------------------------------------------------
# score -> signal


def test_signal_basic_example():
    signal = scores_to_signal(np.arange(1.0, 11.0), [f"c{i}" for i in range(10)], top_m=2)
    npt.assert_array_equal(signal, [-1, -1, 0, 0, 0, 0, 0, 0, 1, 1])


def test_signal_all_equal_scores_uses_id_order():
    ids = ["e", "b", "a", "d", "c", "f"]
    signal = scores_to_signal(np.zeros(6), ids, top_m=2)
    by_id = dict(zip(ids, signal))
    assert by_id == {"a": -1, "b": -1, "c": 0, "d": 0, "e": 1, "f": 1}


def test_signal_sums_to_zero_with_2m_nonzero():
    rng = np.random.default_rng(39)
    for _ in range(40):
        n = int(rng.integers(4, 20))
        m = int(rng.integers(1, n // 2 + 1))
        signal = scores_to_signal(rng.normal(size=n), np.arange(n), top_m=m)
        assert signal.sum() == 0
        assert (signal != 0).sum() == 2 * m


def test_signal_permutation_stability():
    rng = np.random.default_rng(40)
    scores = rng.normal(size=12)
    ids = np.array([f"s{i:02d}" for i in range(12)])
    base = dict(zip(ids, scores_to_signal(scores, ids, top_m=3)))
    for _ in range(10):
        perm = rng.permutation(12)
        mapped = dict(zip(ids[perm], scores_to_signal(scores[perm], ids[perm], top_m=3)))
        assert mapped == base


def test_signal_book_too_large():
    with pytest.raises(ValueError):
        scores_to_signal([1.0, 2.0, 3.0], ["a", "b", "c"], top_m=2)
