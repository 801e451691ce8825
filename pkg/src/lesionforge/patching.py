"""Square patch extraction around lesions and matched crops from negative images."""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from lesionforge.dataio import (
    MANIFEST_FORMAT,
    MANIFEST_VERSION,
    BoundingBox,
    DatasetRecord,
    Image,
    read_jsonl,
    write_jsonl,
)
from lesionforge.errors import DataError

DOMAINS = ("lesion", "non-lesion", "generated")


@dataclass
class PatchConfig:
    s: int = 2
    n: int = 10
    intensity_threshold: float = 0.15
    model_input_side: int = 128
    patches_per_box: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.s not in (1, 2):
            raise DataError(f"scale factor s must be 1 or 2, got {self.s}")
        if self.n < 1:
            raise DataError("n (negatives matched per lesion image) must be positive")
        if not 0.0 <= self.intensity_threshold <= 1.0:
            raise DataError("intensity_threshold must lie in [0, 1]")
        if self.model_input_side < 8:
            raise DataError("model_input_side must be at least 8")
        if self.patches_per_box < 1:
            raise DataError("patches_per_box must be positive")


@dataclass
class Patch:
    pixels: np.ndarray
    source_image_id: str
    crop_rect: BoundingBox
    domain: str
    scale_factor_used: float
    clamped: bool = False
    contains_box: bool = True
    box: BoundingBox | None = None

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise DataError(f"patch must be square, got {self.pixels.shape}")
        if self.domain not in DOMAINS:
            raise DataError(f"unknown patch domain {self.domain!r}")

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


def _axis_range(lo: int, hi: int, side: int, extent: int) -> tuple[int, int]:
    """Inclusive range of window starts along one axis.

    Windows must stay inside ``[0, extent)``.  When the box fits, the window
    must cover ``[lo, hi)``; otherwise it must lie inside the box, which is
    where overlap with the box is largest.
    """
    if hi - lo <= side:
        return max(0, hi - side), min(lo, extent - side)
    return max(0, lo), min(hi - side, extent - side)


def place_square(box: BoundingBox, side: int, height: int, width: int, rng: np.random.Generator) -> BoundingBox:
    x_lo, x_hi = _axis_range(box.x_min, box.x_max, side, width)
    y_lo, y_hi = _axis_range(box.y_min, box.y_max, side, height)
    x0 = int(rng.integers(x_lo, x_hi + 1))
    y0 = int(rng.integers(y_lo, y_hi + 1))
    return BoundingBox(x0, y0, x0 + side, y0 + side)


def patch_side(box: BoundingBox, s: int, height: int, width: int) -> tuple[int, bool]:
    """Nominal side ``s * max(box sides)``, reduced to the short image side when it does not fit."""
    nominal = s * max(box.width, box.height)
    short = min(height, width)
    if nominal <= short:
        return nominal, False
    return short, True


def _crop(image: Image, box: BoundingBox, s: int, rng, domain: str, source_id: str) -> Patch:
    box.check(image.height, image.width)
    side, clamped = patch_side(box, s, image.height, image.width)
    rect = place_square(box, side, image.height, image.width, rng)
    pixels = image.pixels[rect.y_min : rect.y_max, rect.x_min : rect.x_max].copy()
    return Patch(
        pixels=pixels,
        source_image_id=source_id,
        crop_rect=rect,
        domain=domain,
        scale_factor_used=side / max(box.width, box.height),
        clamped=clamped,
        contains_box=rect.contains(box),
        box=box,
    )


def crop_lesion_patch(image: Image, box: BoundingBox, s: int, rng: np.random.Generator, source_id: str = "") -> Patch:
    """Random square crop of side ``s * max(box sides)`` that contains ``box``.

    If the nominal side exceeds the short image side it is clamped to it.  If
    the box itself is longer than the short side, the crop lies inside the box
    along that axis and ``contains_box`` is False.
    """
    return _crop(image, box, s, rng, "lesion", source_id)


def rescale_box(box: BoundingBox, src_shape: tuple[int, int], dst_shape: tuple[int, int]) -> BoundingBox:
    """Map a box proportionally from a ``src_shape`` image onto a ``dst_shape`` image."""
    (sh, sw), (dh, dw) = src_shape, dst_shape
    fx, fy = dw / sw, dh / sh
    x0 = min(max(0, int(round(box.x_min * fx))), dw - 1)
    y0 = min(max(0, int(round(box.y_min * fy))), dh - 1)
    x1 = min(dw, max(x0 + 1, int(round(box.x_max * fx))))
    y1 = min(dh, max(y0 + 1, int(round(box.y_max * fy))))
    return BoundingBox(x0, y0, x1, y1)


def crop_matched_patch(
    neg_image: Image,
    lesion_box: BoundingBox,
    s: int,
    rng: np.random.Generator,
    lesion_shape: tuple[int, int] | None = None,
    source_id: str = "",
) -> Patch:
    """Crop a negative image where the matched lesion image's annotation sits.

    ``lesion_shape`` is the (height, width) of the lesion image; when it
    differs from the negative image the box is rescaled proportionally first.
    """
    box = lesion_box
    if lesion_shape is not None and tuple(lesion_shape) != (neg_image.height, neg_image.width):
        box = rescale_box(lesion_box, lesion_shape, (neg_image.height, neg_image.width))
    return _crop(neg_image, box, s, rng, "non-lesion", source_id)


def similarity_key(a: DatasetRecord, b: DatasetRecord) -> tuple[float, float]:
    return (abs(a.height / a.width - b.height / b.width), abs(a.height * a.width - b.height * b.width))


def match_nonlesion_images(
    lesion_record: DatasetRecord, negative_records: list[DatasetRecord], n: int, rng: np.random.Generator
) -> list[DatasetRecord]:
    """The ``n`` negatives closest in aspect ratio, then area; ties broken at random."""
    if len(negative_records) < n:
        warnings.warn(
            f"only {len(negative_records)} negatives available for {lesion_record.image_id}, wanted {n}",
            stacklevel=2,
        )
    jitter = rng.random(len(negative_records))
    order = sorted(
        range(len(negative_records)),
        key=lambda k: (*similarity_key(lesion_record, negative_records[k]), jitter[k]),
    )
    return [negative_records[k] for k in order[:n]]


def intensity_filter(patch: Patch | np.ndarray, threshold: float = 0.15) -> bool:
    """True when the patch's mean intensity is at least ``threshold``.

    The comparison sums exact per-pixel deviations so a uniform patch at the
    threshold is kept regardless of its size.
    """
    px = patch.pixels if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    return math.fsum((px - threshold).ravel()) >= 0.0


def resample(pixels: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Bilinear resample of a 2-D array (anti-aliased when shrinking)."""
    width = height if width is None else width
    if pixels.shape == (height, width):
        return pixels.copy()
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float64))[None, None]
    shrinking = height < pixels.shape[0] or width < pixels.shape[1]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False, antialias=shrinking)
    return out[0, 0].numpy()


def resample_to_model_size(patch: Patch, side: int) -> Patch:
    if side < 8:
        raise DataError("model input side must be at least 8")
    return Patch(
        pixels=np.clip(resample(patch.pixels, side), 0.0, 1.0),
        source_image_id=patch.source_image_id,
        crop_rect=patch.crop_rect,
        domain=patch.domain,
        scale_factor_used=patch.scale_factor_used,
        clamped=patch.clamped,
        contains_box=patch.contains_box,
        box=patch.box,
    )


# ---------------------------------------------------------------------------
# patch manifests


@dataclass
class PatchRecord:
    """One patch on disk plus where it came from."""

    patch_id: str
    path: str
    domain: str
    source_image_id: str
    crop_rect: BoundingBox
    scale_factor_used: float
    body_part: str
    clamped: bool = False
    contains_box: bool = True
    matched_lesion_id: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self, base: Path) -> dict:
        d = {
            "patch_id": self.patch_id,
            "path": os.path.relpath(self.path, base),
            "domain": self.domain,
            "source_image_id": self.source_image_id,
            "crop_rect": self.crop_rect.to_list(),
            "scale_factor_used": self.scale_factor_used,
            "body_part": self.body_part,
            "clamped": self.clamped,
            "contains_box": self.contains_box,
            "matched_lesion_id": self.matched_lesion_id,
        }
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_dict(cls, d: dict, base: Path) -> PatchRecord:
        d = dict(d)
        d["crop_rect"] = BoundingBox.from_list(d["crop_rect"])
        if not os.path.isabs(d["path"]):
            d["path"] = os.path.normpath(os.path.join(base, d["path"]))
        return cls(**d)


def write_patch_manifest(path, records: list[PatchRecord], seed: int = 0, side: int | None = None) -> None:
    base = Path(path).resolve().parent
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "kind": "patches", "seed": seed, "side": side}
    write_jsonl(path, header, (r.to_dict(base) for r in records))


def read_patch_manifest(path) -> list[PatchRecord]:
    header, rows = read_jsonl(path)
    if header.get("kind") != "patches":
        raise DataError(f"{path}: expected a patch manifest, got kind={header.get('kind')!r}")
    base = Path(path).resolve().parent
    return [PatchRecord.from_dict(r, base) for r in rows]
