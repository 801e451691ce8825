import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionforge.dataio import (
    LESION,
    NON_LESION,
    BoundingBox,
    DatasetManifest,
    DatasetRecord,
)
from lesionforge.errors import DataError
from lesionforge.pseudolabel import (
    DEFAULT_T_GRID,
    build_augmented_manifest,
    mine_hard_positives,
    partition_by_score,
    read_mining_report,
    select_threshold,
    write_mining_report,
)


def generated(k):
    return DatasetRecord(f"gen-{k}", f"gen-{k}.png", LESION, "train", "humerus", 20, 20, boxes=[BoundingBox(2, 2, 8, 8)], provenance="generated")


def empirical(k, label=NON_LESION, split="train"):
    boxes = [BoundingBox(2, 2, 8, 8)] if label == LESION else []
    return DatasetRecord(f"img-{k}", f"img-{k}.png", label, split, "humerus", 20, 20, boxes=boxes)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=0, max_size=40), st.floats(0.0, 1.0))
def test_partition_is_exact(scores, t):
    recs = [generated(k) for k in range(len(scores))]
    res = partition_by_score(recs, scores, t)
    assert len(res.kept) + len(res.rejected) == len(recs)
    assert {r.image_id for r in res.kept}.isdisjoint({r.image_id for r in res.rejected})
    for rec, s in zip(recs, scores):
        assert (rec in res.kept) == (s >= t)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_kept_sets_are_nested_in_t(scores, t1, t2):
    lo, hi = sorted((t1, t2))
    recs = [generated(k) for k in range(len(scores))]
    kept_lo = {r.image_id for r in partition_by_score(recs, scores, lo).kept}
    kept_hi = {r.image_id for r in partition_by_score(recs, scores, hi).kept}
    assert kept_hi <= kept_lo


def test_kept_counts_non_increasing_over_default_grid():
    rng = np.random.default_rng(0)
    recs = [generated(k) for k in range(500)]
    scores = rng.beta(2, 2, 500)
    counts = [len(partition_by_score(recs, scores, t).kept) for t in DEFAULT_T_GRID]
    assert counts == sorted(counts, reverse=True)
    assert DEFAULT_T_GRID == (0.70, 0.85, 0.90, 0.95)


def test_threshold_boundary_is_inclusive():
    res = partition_by_score([generated(0), generated(1)], [0.9, np.nextafter(0.9, 0)], 0.9)
    assert [r.image_id for r in res.kept] == ["gen-0"]


def test_bad_inputs():
    with pytest.raises(ValueError):
        partition_by_score([generated(0)], [0.5], 1.5)
    with pytest.raises(DataError):
        partition_by_score([generated(0)], [0.5, 0.6], 0.5)
    with pytest.raises(DataError):
        mine_hard_positives([empirical(0, LESION)], lambda recs: np.ones(len(recs)), 0.5)


def test_mining_uses_scorer_and_warns_when_empty():
    recs = [generated(k) for k in range(4)]
    res = mine_hard_positives(recs, lambda rs: np.array([0.1, 0.95, 0.7, 0.3]), 0.7, scorer_id="x")
    assert [r.image_id for r in res.kept] == ["gen-1", "gen-2"]
    assert res.scorer_id == "x"
    with pytest.warns(UserWarning):
        empty = mine_hard_positives([], lambda rs: np.zeros(0), 0.7)
    assert empty.kept == [] and empty.rejected == []


def test_select_threshold_prefers_larger_t_on_ties():
    aucs = {0.70: 0.8, 0.85: 0.9, 0.90: 0.9, 0.95: 0.85}
    t, table = select_threshold(DEFAULT_T_GRID, aucs.__getitem__)
    assert t == 0.90
    assert table == [(0.70, 0.8), (0.85, 0.9), (0.90, 0.9), (0.95, 0.85)]


def test_augmented_manifest_adds_only_train_lesions():
    base = DatasetManifest([empirical(0), empirical(1, LESION), empirical(2, split="test")])
    aug = build_augmented_manifest(base, [generated(0), generated(1)])
    assert len(aug) == 5
    assert [r.image_id for r in aug.split("test")] == ["img-2"]
    with pytest.raises(DataError):
        build_augmented_manifest(base, [empirical(5, LESION)])


def test_mining_report_round_trip(tmp_path):
    recs = [generated(k) for k in range(3)]
    res = partition_by_score(recs, [0.2, 0.8, 0.9], 0.85, "baseline")
    write_mining_report(tmp_path / "m.csv", res)
    back = read_mining_report(tmp_path / "m.csv")
    assert back == {"gen-0": (0.2, False), "gen-1": (0.8, False), "gen-2": (0.9, True)}
