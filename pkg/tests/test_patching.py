import warnings

import numpy as np
import pytest

from lesionforge.dataio import LESION, NON_LESION, BoundingBox, DatasetRecord, Image
from lesionforge.errors import DataError
from lesionforge.patching import (
    PatchConfig,
    crop_lesion_patch,
    crop_matched_patch,
    intensity_filter,
    match_nonlesion_images,
    patch_side,
    resample,
    rescale_box,
)


def blank(h, w, value=0.5):
    return Image(np.full((h, w), value))


def test_side_is_s_times_long_box_side():
    img = Image(np.random.default_rng(0).random((400, 300)))
    box = BoundingBox(100, 150, 200, 200)  # 100 wide, 50 tall
    patch = crop_lesion_patch(img, box, 2, np.random.default_rng(1))
    assert patch.side == 200
    assert patch.crop_rect.contains(box)
    assert not patch.clamped and patch.contains_box
    np.testing.assert_array_equal(patch.pixels, img.pixels[patch.crop_rect.y_min : patch.crop_rect.y_max, patch.crop_rect.x_min : patch.crop_rect.x_max])


def test_square_box_with_s1_returns_the_box():
    img = Image(np.random.default_rng(0).random((128, 128)))
    box = BoundingBox(10, 20, 74, 84)
    patch = crop_lesion_patch(img, box, 1, np.random.default_rng(2))
    assert patch.crop_rect == box
    assert patch.scale_factor_used == 1.0


def test_clamped_when_box_is_long_relative_to_image():
    img = blank(200, 150)
    box = BoundingBox(10, 10, 140, 190)  # 130 x 180, s=2 would need 360
    patch = crop_lesion_patch(img, box, 2, np.random.default_rng(0))
    assert patch.clamped
    assert patch.side == 150
    # the box is taller than the short side, so it cannot be contained
    assert not patch.contains_box
    assert patch.crop_rect.is_valid_for(200, 150)


def test_clamp_keeps_box_when_it_fits():
    img = blank(200, 150)
    box = BoundingBox(20, 20, 120, 100)  # 100 wide: s=2 needs 200 > 150
    patch = crop_lesion_patch(img, box, 2, np.random.default_rng(0))
    assert patch.clamped and patch.contains_box and patch.side == 150


def test_random_geometry_cases():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        h, w = int(rng.integers(16, 160)), int(rng.integers(16, 160))
        bw, bh = int(rng.integers(1, w + 1)), int(rng.integers(1, h + 1))
        x0, y0 = int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1))
        box = BoundingBox(x0, y0, x0 + bw, y0 + bh)
        s = int(rng.integers(1, 3))
        patch = crop_lesion_patch(blank(h, w), box, s, rng)
        assert patch.crop_rect.is_valid_for(h, w)
        if s * max(bw, bh) <= min(h, w):
            assert not patch.clamped
            assert patch.side == s * max(bw, bh)
            assert patch.crop_rect.contains(box)
        else:
            assert patch.clamped and patch.side == min(h, w)


def test_box_outside_image_rejected():
    with pytest.raises(DataError):
        crop_lesion_patch(blank(20, 20), BoundingBox(15, 15, 25, 25), 1, np.random.default_rng(0))


def test_rescaled_box_centre_is_fixed_point_under_identity_shape():
    box = BoundingBox(3, 7, 13, 21)
    assert rescale_box(box, (40, 30), (40, 30)) == box
    doubled = rescale_box(box, (40, 30), (80, 60))
    assert doubled == BoundingBox(6, 14, 26, 42)
    assert (doubled.x_min + doubled.x_max) / 2 == 2 * (box.x_min + box.x_max) / 2


def test_matched_patch_uses_rescaled_box():
    neg = blank(80, 60)
    patch = crop_matched_patch(neg, BoundingBox(10, 10, 20, 20), 1, np.random.default_rng(0), lesion_shape=(40, 30))
    assert patch.domain == "non-lesion"
    assert patch.side == 20
    assert patch.crop_rect.contains(BoundingBox(20, 20, 40, 40))


def record(image_id, h, w, label=NON_LESION):
    boxes = [BoundingBox(0, 0, 2, 2)] if label == LESION else []
    return DatasetRecord(image_id, f"{image_id}.png", label, "train", "humerus", h, w, boxes=boxes)


def test_similarity_prefers_aspect_then_area():
    lesion = record("L", 200, 100, LESION)  # aspect 2.0
    negs = [record("a", 100, 100), record("b", 210, 100), record("c", 300, 100), record("d", 400, 200), record("e", 100, 50)]
    picked = match_nonlesion_images(lesion, negs, 3, np.random.default_rng(0))
    # e and d share the exact aspect ratio; e is closer in area; b is next on aspect
    assert [p.image_id for p in picked] == ["e", "d", "b"]


def test_similarity_top_two_from_aspect_only():
    lesion = record("L", 200, 100, LESION)
    negs = [record("a", 100, 100), record("b", 210, 100), record("c", 300, 100), record("d", 200, 100)]
    picked = match_nonlesion_images(lesion, negs, 2, np.random.default_rng(5))
    assert sorted(p.height / p.width for p in picked) == [2.0, 2.1]


def test_pool_exhaustion_warns_and_returns_all():
    lesion = record("L", 200, 100, LESION)
    negs = [record("a", 100, 100), record("b", 210, 100)]
    with pytest.warns(UserWarning, match="only 2 negatives"):
        picked = match_nonlesion_images(lesion, negs, 5, np.random.default_rng(0))
    assert len(picked) == 2


def test_similarity_ties_depend_on_seed_only():
    lesion = record("L", 100, 100, LESION)
    negs = [record(f"n{k}", 100, 100) for k in range(20)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = match_nonlesion_images(lesion, negs, 5, np.random.default_rng(7))
        b = match_nonlesion_images(lesion, negs, 5, np.random.default_rng(7))
    assert [r.image_id for r in a] == [r.image_id for r in b]


@pytest.mark.parametrize("size", [1, 3, 7, 64, 201])
def test_intensity_filter_boundary(size):
    assert intensity_filter(np.full((size, size), 0.15), 0.15)
    assert not intensity_filter(np.full((size, size), np.nextafter(0.15, 0.0)), 0.15)


def test_intensity_filter_on_random_patches():
    rng = np.random.default_rng(0)
    for _ in range(500):
        px = rng.random((9, 9)) * rng.uniform(0.05, 0.6)
        assert intensity_filter(px, 0.15) == (np.mean(px) >= 0.15)


def test_resample_identity_and_constants():
    rng = np.random.default_rng(0)
    px = rng.random((17, 17))
    np.testing.assert_array_equal(resample(px, 17), px)
    for side in (5, 32, 100):
        np.testing.assert_allclose(resample(np.full((17, 17), 0.3), side), 0.3, atol=1e-12)


def test_resample_down_then_up_is_close_for_smooth_images():
    yy, xx = np.mgrid[0:64, 0:64] / 63.0
    px = 0.5 + 0.3 * np.sin(2 * np.pi * xx) * np.cos(np.pi * yy)
    back = resample(resample(px, 32), 64)
    assert np.mean(np.abs(back - px)) < 0.02


def test_patch_config_validation():
    with pytest.raises(DataError):
        PatchConfig(s=3).validate()
    with pytest.raises(DataError):
        PatchConfig(intensity_threshold=1.5).validate()


def test_patch_side_rule():
    assert patch_side(BoundingBox(0, 0, 10, 4), 2, 100, 100) == (20, False)
    assert patch_side(BoundingBox(0, 0, 10, 4), 2, 100, 15) == (15, True)
