"""Cosine alpha-mask blending of translated patches back into full images."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lesionforge.dataio import BoundingBox, Image
from lesionforge.errors import DataError


@dataclass
class BlendMask:
    alpha: np.ndarray
    n: float


def normalized_coords(size: int) -> np.ndarray:
    """Pixel centres mapped onto [-1, 1], outermost centres at exactly +-1.

    Built from integers so coordinate k and size-1-k are exact negatives.
    """
    k = np.arange(size, dtype=np.float64)
    return (2.0 * k - (size - 1)) / (size - 1)


def _profile(coords: np.ndarray, n: float) -> np.ndarray:
    a = np.abs(coords)
    out = np.cos(a**n * (math.pi / 2))
    # cos(pi/2) is ~6e-17 in floating point; the border must be exactly zero
    out[a >= 1.0] = 0.0
    return out


def alpha_mask(height: int, width: int, n: float = 2.0) -> BlendMask:
    """alpha(i, j) = cos(|i|^n * pi/2) * cos(|j|^n * pi/2) over normalized pixel coordinates."""
    if n <= 0:
        raise ValueError(f"mask exponent n must be positive, got {n}")
    if height < 2 or width < 2:
        raise ValueError("mask needs at least 2 pixels per side")
    alpha = np.outer(_profile(normalized_coords(height), n), _profile(normalized_coords(width), n))
    return BlendMask(alpha=alpha, n=n)


def blend(original: np.ndarray, translated: np.ndarray, mask: BlendMask | np.ndarray) -> np.ndarray:
    alpha = mask.alpha if isinstance(mask, BlendMask) else np.asarray(mask, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    translated = np.asarray(translated, dtype=np.float64)
    if not (original.shape == translated.shape == alpha.shape):
        raise DataError(f"shape mismatch: original {original.shape}, translated {translated.shape}, mask {alpha.shape}")
    return np.clip(alpha * translated + (1.0 - alpha) * original, 0.0, 1.0)


def paste_back(full: Image, blended: np.ndarray, crop_rect: BoundingBox) -> Image:
    """Copy of ``full`` with ``crop_rect`` replaced by ``blended``."""
    if not crop_rect.is_valid_for(full.height, full.width):
        raise DataError(f"crop rectangle {crop_rect} outside the {full.height}x{full.width} image")
    if blended.shape != (crop_rect.height, crop_rect.width):
        raise DataError(f"blended patch {blended.shape} does not match crop {crop_rect}")
    out = full.pixels.copy()
    out[crop_rect.y_min : crop_rect.y_max, crop_rect.x_min : crop_rect.x_max] = blended
    return Image(out)
