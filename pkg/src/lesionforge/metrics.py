"""ROC AUC, paired bootstrap intervals, operating point and sensitivity/specificity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from lesionforge.errors import DataError

DEFAULT_BOOTSTRAP = 2000


@dataclass
class ScoredSet:
    image_ids: list[str]
    labels: np.ndarray
    scores: np.ndarray
    split: str = "test"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.image_ids = list(self.image_ids)
        if not (len(self.image_ids) == len(self.labels) == len(self.scores)):
            raise DataError("image_ids, labels and scores must have equal lengths")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)


@dataclass
class EvalReport:
    auc: float
    ci_low: float
    ci_high: float
    significant_vs_baseline: bool
    op_threshold: float
    sensitivity: float
    specificity: float
    bootstrap_B: int
    seed: int
    diff_ci: tuple[float, float] = field(default=(0.0, 0.0))


def _check_both_classes(labels: np.ndarray) -> None:
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise DataError("AUC and operating point need both classes present")


def auc_from_arrays(labels: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    labels = np.asarray(labels)
    _check_both_classes(labels)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scored: ScoredSet) -> float:
    return auc_from_arrays(scored.labels, scored.scores)


def _batched_auc(labels: np.ndarray, scores: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """AUC of every bootstrap row ``idx[b]`` at once."""
    lab = labels[idx]
    ranks = rankdata(scores[idx], axis=1)
    n_pos = lab.sum(axis=1)
    n_neg = lab.shape[1] - n_pos
    u = (ranks * lab).sum(axis=1) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def bootstrap_indices(labels: np.ndarray, B: int = DEFAULT_BOOTSTRAP, seed: int = 0) -> np.ndarray:
    """``B`` resamples of ``range(len(labels))`` with replacement, each holding both classes.

    Replicate ``b`` draws from its own child of ``SeedSequence(seed)`` and is
    redrawn until it contains a positive and a negative, so the index matrix
    is independent of evaluation order and always has exactly ``B`` rows.
    """
    if B < 100:
        raise ValueError("use at least 100 bootstrap replicates")
    labels = np.asarray(labels)
    _check_both_classes(labels)
    n = len(labels)
    out = np.empty((B, n), dtype=np.int64)
    for b, child in enumerate(np.random.SeedSequence(seed).spawn(B)):
        rng = np.random.default_rng(child)
        while True:
            row = rng.integers(0, n, n)
            k = labels[row].sum()
            if 0 < k < n:
                break
        out[b] = row
    return out


def bootstrap_aucs(scored: ScoredSet, indices: np.ndarray) -> np.ndarray:
    return _batched_auc(scored.labels, scored.scores, indices)


def percentile_interval(values: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return float(lo), float(hi)


def bootstrap_auc_ci(scored: ScoredSet, B: int = DEFAULT_BOOTSTRAP, seed: int = 0, indices=None) -> tuple[float, float]:
    """Percentile 95% interval of the bootstrapped AUC."""
    if indices is None:
        indices = bootstrap_indices(scored.labels, B, seed)
    return percentile_interval(bootstrap_aucs(scored, indices))


def _check_paired(a: ScoredSet, b: ScoredSet) -> None:
    if a.image_ids != b.image_ids:
        raise DataError("paired comparison needs both models scored on the same images in the same order")
    if not np.array_equal(a.labels, b.labels):
        raise DataError("paired comparison needs identical labels")


def paired_difference_test(
    set_a: ScoredSet, set_b: ScoredSet, B: int = DEFAULT_BOOTSTRAP, seed: int = 0, indices=None
) -> tuple[float, float, bool]:
    """95% interval of per-replicate AUC(A) - AUC(B) on shared resamples; significant if it excludes 0."""
    _check_paired(set_a, set_b)
    if indices is None:
        indices = bootstrap_indices(set_a.labels, B, seed)
    diffs = bootstrap_aucs(set_a, indices) - bootstrap_aucs(set_b, indices)
    lo, hi = percentile_interval(diffs)
    return lo, hi, not (lo <= 0.0 <= hi)


def roc_points(labels: np.ndarray, scores: np.ndarray):
    """(thresholds, tpr, fpr) for every distinct score used as a ``score >= thr`` cut.

    Thresholds are in decreasing order; an extra leading threshold above the
    maximum score gives the (0, 0) vertex.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[distinct]
    fp = np.cumsum(1 - y)[distinct]
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    thresholds = np.r_[np.inf, s[distinct]]
    tpr = np.r_[0.0, tp / max(n_pos, 1)]
    fpr = np.r_[0.0, fp / max(n_neg, 1)]
    return thresholds, tpr, fpr


def operating_point(val_set: ScoredSet) -> float:
    """Threshold minimizing (1 - TPR)^2 + FPR^2; ties go to the lower FPR.

    Only accepts a validation-tagged set: the point is chosen on validation
    data and then applied unchanged to the test set.
    """
    if val_set.split != "val":
        raise DataError(f"operating point must be chosen on the validation split, got {val_set.split!r}")
    _check_both_classes(val_set.labels)
    thresholds, tpr, fpr = roc_points(val_set.labels, val_set.scores)
    crit = (1.0 - tpr) ** 2 + fpr**2
    best = np.flatnonzero(crit == crit.min())
    best = best[np.argmin(fpr[best])]
    return float(thresholds[best])


def sens_spec(scored: ScoredSet, threshold: float) -> tuple[float, float]:
    pred = scored.scores >= threshold
    pos = scored.labels == 1
    tp = int(np.sum(pred & pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    fp = int(np.sum(pred & ~pos))
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    return sens, spec


def evaluate_model(
    test_set: ScoredSet,
    val_set: ScoredSet,
    indices: np.ndarray,
    seed: int,
    baseline_test: ScoredSet | None = None,
) -> EvalReport:
    """Full report for one model; every model in a comparison must receive the same ``indices``."""
    auc = roc_auc(test_set)
    lo, hi = bootstrap_auc_ci(test_set, indices=indices)
    significant, diff_ci = False, (0.0, 0.0)
    if baseline_test is not None:
        dlo, dhi, significant = paired_difference_test(test_set, baseline_test, indices=indices)
        diff_ci = (dlo, dhi)
    op = operating_point(val_set)
    sens, spec = sens_spec(test_set, op)
    return EvalReport(
        auc=auc,
        ci_low=lo,
        ci_high=hi,
        significant_vs_baseline=significant,
        op_threshold=op,
        sensitivity=sens,
        specificity=spec,
        bootstrap_B=len(indices),
        seed=seed,
        diff_ci=diff_ci,
    )
