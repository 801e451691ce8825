import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionforge.errors import DataError
from lesionforge.metrics import (
    ScoredSet,
    bootstrap_auc_ci,
    bootstrap_indices,
    operating_point,
    paired_difference_test,
    roc_auc,
    sens_spec,
)


def pairwise_auc(labels, scores):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def random_set(rng, n=20, ties=False, split="test"):
    while True:
        labels = rng.integers(0, 2, n)
        if 0 < labels.sum() < n:
            break
    scores = rng.integers(0, 5, n) / 4 if ties else rng.random(n)
    return ScoredSet([f"i{k}" for k in range(n)], labels, scores, split=split)


def brute_force_op(labels, scores):
    """Scan every distinct score (and +inf) as a ``score >= thr`` cut."""
    labels = np.asarray(labels)
    best = None
    for thr in sorted(set(scores.tolist()) | {np.inf}):
        pred = scores >= thr
        tpr = np.sum(pred & (labels == 1)) / np.sum(labels == 1)
        fpr = np.sum(pred & (labels == 0)) / np.sum(labels == 0)
        key = ((1 - tpr) ** 2 + fpr**2, fpr)
        if best is None or key < best[0]:
            best = (key, thr)
    return best[1]


def test_perfect_and_inverted():
    s = ScoredSet(["a", "b", "c", "d"], [0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9])
    assert roc_auc(s) == 1.0
    assert roc_auc(ScoredSet(s.image_ids, s.labels, -s.scores)) == 0.0


def test_auc_matches_pairwise_on_random_sets():
    rng = np.random.default_rng(0)
    for k in range(200):
        s = random_set(rng, ties=k % 2 == 0)
        assert roc_auc(s) == pytest.approx(pairwise_auc(s.labels, s.scores), abs=1e-12)


def test_single_class_rejected():
    with pytest.raises(DataError):
        roc_auc(ScoredSet(["a", "b"], [1, 1], [0.2, 0.3]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=4, max_size=30), st.randoms())
def test_auc_invariant_under_cubing(ints, rnd):
    # a 1/1000 grid keeps x -> x**3 injective in floating point
    scores = [k / 1000 for k in ints]
    labels = [rnd.randint(0, 1) for _ in scores]
    if 0 < sum(labels) < len(labels):
        s = ScoredSet([str(i) for i in range(len(scores))], labels, scores)
        cubed = ScoredSet(s.image_ids, labels, np.asarray(scores) ** 3)
        assert roc_auc(s) == roc_auc(cubed)


def test_auc_of_negated_scores_complements():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = random_set(rng, n=30)
        neg = ScoredSet(s.image_ids, s.labels, -s.scores)
        assert roc_auc(s) + roc_auc(neg) == pytest.approx(1.0, abs=1e-12)


def test_bootstrap_degenerate_interval():
    # every resample of this set holds the same multiset of (label, score) pairs up to ordering of
    # perfectly separated classes, so every replicate AUC equals the point estimate
    s = ScoredSet([f"{k}" for k in range(10)], [0] * 5 + [1] * 5, [0.1] * 5 + [0.9] * 5)
    lo, hi = bootstrap_auc_ci(s, B=200, seed=3)
    assert lo == hi == roc_auc(s) == 1.0


def test_bootstrap_interval_ordered_and_reproducible():
    rng = np.random.default_rng(2)
    s = random_set(rng, n=60)
    a = bootstrap_auc_ci(s, B=300, seed=11)
    b = bootstrap_auc_ci(s, B=300, seed=11)
    assert a == b
    assert a[0] <= a[1]


def test_bootstrap_rows_hold_both_classes():
    labels = np.array([1] + [0] * 19)
    idx = bootstrap_indices(labels, B=500, seed=0)
    assert idx.shape == (500, 20)
    counts = labels[idx].sum(axis=1)
    assert np.all((counts > 0) & (counts < 20))


def test_bootstrap_requires_enough_replicates():
    with pytest.raises(ValueError):
        bootstrap_indices(np.array([0, 1]), B=10)


def test_paired_self_comparison_is_zero_and_not_significant():
    rng = np.random.default_rng(4)
    s = random_set(rng, n=50)
    lo, hi, sig = paired_difference_test(s, s, B=300, seed=0)
    assert (lo, hi) == (0.0, 0.0)
    assert sig is False


def test_paired_antisymmetry():
    rng = np.random.default_rng(5)
    a = random_set(rng, n=50)
    b = ScoredSet(a.image_ids, a.labels, rng.random(50))
    lo_ab, hi_ab, sig_ab = paired_difference_test(a, b, B=400, seed=9)
    lo_ba, hi_ba, sig_ba = paired_difference_test(b, a, B=400, seed=9)
    assert lo_ab == pytest.approx(-hi_ba, abs=1e-12)
    assert hi_ab == pytest.approx(-lo_ba, abs=1e-12)
    assert sig_ab == sig_ba


def test_pairing_narrows_the_difference_interval():
    rng = np.random.default_rng(6)
    n = 200
    labels = (rng.random(n) < 0.3).astype(int)
    base = labels * 1.0 + rng.normal(0, 1.0, n)
    a = ScoredSet([str(i) for i in range(n)], labels, base)
    b = ScoredSet(a.image_ids, labels, base + rng.normal(0, 0.1, n))
    lo, hi, _ = paired_difference_test(a, b, B=500, seed=1)
    ci_a = bootstrap_auc_ci(a, B=500, seed=2)
    ci_b = bootstrap_auc_ci(b, B=500, seed=3)
    naive_width = (ci_a[1] - ci_a[0]) + (ci_b[1] - ci_b[0])
    assert hi - lo < 0.5 * naive_width


def test_paired_requires_same_images():
    a = ScoredSet(["a", "b"], [0, 1], [0.1, 0.2])
    b = ScoredSet(["a", "c"], [0, 1], [0.1, 0.2])
    with pytest.raises(DataError):
        paired_difference_test(a, b, B=100)


def test_operating_point_perfect_classifier():
    s = ScoredSet(list("abcd"), [0, 0, 1, 1], [0.1, 0.2, 0.7, 0.9], split="val")
    thr = operating_point(s)
    sens, spec = sens_spec(s, thr)
    assert (sens, spec) == (1.0, 1.0)


def test_operating_point_matches_brute_force():
    rng = np.random.default_rng(7)
    for k in range(300):
        s = random_set(rng, n=int(rng.integers(4, 40)), ties=k % 3 == 0, split="val")
        assert operating_point(s) == brute_force_op(s.labels, s.scores)


def test_operating_point_requires_validation_split():
    s = ScoredSet(list("ab"), [0, 1], [0.1, 0.9], split="test")
    with pytest.raises(DataError):
        operating_point(s)


def test_sens_spec_extremes():
    rng = np.random.default_rng(8)
    s = random_set(rng, n=30)
    assert sens_spec(s, 0.0)[0] == 1.0
    assert sens_spec(s, 1.5) == (0.0, 1.0)


def test_sens_spec_matches_confusion_tally():
    rng = np.random.default_rng(9)
    for _ in range(100):
        s = random_set(rng, n=15)
        thr = float(rng.random())
        tp = fn = tn = fp = 0
        for y, score in zip(s.labels, s.scores):
            if y == 1:
                tp, fn = (tp + 1, fn) if score >= thr else (tp, fn + 1)
            else:
                fp, tn = (fp + 1, tn) if score >= thr else (fp, tn + 1)
        assert sens_spec(s, thr) == (tp / (tp + fn), tn / (tn + fp))
