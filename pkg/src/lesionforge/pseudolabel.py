"""Hard-positive mining over generated images and augmented-set assembly."""

from __future__ import annotations

import csv
import warnings
from collections.abc import Callable, Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lesionforge.dataio import LESION, DatasetManifest, DatasetRecord
from lesionforge.errors import DataError

DEFAULT_T_GRID = (0.70, 0.85, 0.90, 0.95)


@dataclass
class MiningResult:
    kept: list[DatasetRecord]
    rejected: list[DatasetRecord]
    threshold: float
    scorer_id: str
    scores: dict[str, float]


def partition_by_score(
    records: list[DatasetRecord], scores: Iterable[float], t: float, scorer_id: str = ""
) -> MiningResult:
    """Keep records scoring ``>= t``; the rest are rejected.  Order is preserved within each side."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold t must lie in [0, 1], got {t}")
    scores = [float(s) for s in scores]
    if len(scores) != len(records):
        raise DataError("one score per generated record is required")
    kept, rejected = [], []
    for rec, s in zip(records, scores):
        (kept if s >= t else rejected).append(rec)
    return MiningResult(kept, rejected, t, scorer_id, {r.image_id: s for r, s in zip(records, scores)})


def mine_hard_positives(
    generated: DatasetManifest | list[DatasetRecord],
    scorer: Callable[[list[DatasetRecord]], np.ndarray],
    t: float,
    scorer_id: str = "",
) -> MiningResult:
    """Score every generated full image with ``scorer`` and split at ``t``.

    ``scorer`` maps records to lesion probabilities, e.g.
    ``lambda recs: classifier.score(model, recs, cache)``.
    """
    records = list(generated)
    bad = [r.image_id for r in records if r.provenance != "generated"]
    if bad:
        raise DataError(f"only generated records can be mined, got empirical ones: {bad[:3]}")
    if not records:
        warnings.warn("no generated images to mine", stacklevel=2)
        return partition_by_score([], [], t, scorer_id)
    return partition_by_score(records, scorer(records), t, scorer_id)


def select_threshold(candidate_ts: Iterable[float], val_auc_of: Callable[[float], float]) -> tuple[float, list[tuple[float, float]]]:
    """Grid search: the candidate with the best validation AUC, ties going to the larger ``t``.

    ``val_auc_of(t)`` builds the augmented set for ``t``, trains a classifier
    and returns its validation AUC.  Returns ``(t_best, [(t, auc), ...])``.
    """
    candidates = list(candidate_ts)
    if not candidates:
        raise ValueError("need at least one candidate threshold")
    table = [(float(t), float(val_auc_of(t))) for t in candidates]
    best = max(table, key=lambda row: (row[1], row[0]))
    return best[0], table


def build_augmented_manifest(base: DatasetManifest, kept: list[DatasetRecord]) -> DatasetManifest:
    """Append mined records to the training split; other splits are untouched."""
    for rec in kept:
        if rec.provenance != "generated":
            raise DataError(f"{rec.image_id}: only generated records may be added as augmentations")
        if rec.split != "train":
            raise DataError(f"{rec.image_id}: augmentations may only target the train split")
        if rec.label != LESION:
            raise DataError(f"{rec.image_id}: augmentations must be labelled lesion")
    return DatasetManifest(list(base.records) + list(kept), seed=base.seed)


def write_mining_report(path, result: MiningResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kept_ids = {r.image_id for r in result.kept}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "score", "kept", "threshold", "scorer_id"])
        for image_id, s in result.scores.items():
            w.writerow([image_id, repr(s), int(image_id in kept_ids), result.threshold, result.scorer_id])


def read_mining_report(path) -> dict[str, tuple[float, bool]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"mining report not found: {path}")
    with open(path, newline="") as fh:
        return {row["image_id"]: (float(row["score"]), row["kept"] == "1") for row in csv.DictReader(fh)}
