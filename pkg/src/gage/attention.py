"""Attention heatmaps, thresholded masks, minimum-perimeter boxes and crops.

The heatmap is the channel-wise maximum of the last-stage feature maps,
min-max normalised to [0, 1]. Thresholding is strict (``value > tau``). The
box search works on the feature grid and is then scaled to pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionError, NoActivationError

DEGENERATE_RANGE = 1e-8
DEFAULT_COVERAGE = 0.95
DEFAULT_TAU = {"resnet18": 0.3, "resnet50": 0.4}


@dataclass(frozen=True)
class Box:
    """Inclusive integer rectangle ``[r0, r1] x [c0, c1]``."""

    r0: int
    c0: int
    r1: int
    c1: int
    space: str = "feature"

    def __post_init__(self):
        if self.r0 > self.r1 or self.c0 > self.c1 or self.r0 < 0 or self.c0 < 0:
            raise ValueError(f"invalid box bounds {self.as_tuple()}")

    @property
    def height(self) -> int:
        return self.r1 - self.r0 + 1

    @property
    def width(self) -> int:
        return self.c1 - self.c0 + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def perimeter(self) -> int:
        return 2 * (self.height + self.width)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.r0, self.c0, self.r1, self.c1)

    def to_line(self) -> str:
        return f"{self.r0} {self.c0} {self.r1} {self.c1}"


@dataclass(frozen=True)
class AttentionMap:
    values: np.ndarray
    source_stride: int = 1
    degenerate: bool = False


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray
    threshold: float

    @property
    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class RoiResult:
    attention: AttentionMap
    box: Box
    crop: np.ndarray
    fallback: bool
    feature_box: Box | None = None


def max_intensity_projection(feature_maps) -> np.ndarray:
    """Per-pixel maximum over the channel axis of a ``[C, h, w]`` array."""
    fm = np.asarray(getattr(feature_maps, "data", feature_maps))
    if fm.ndim != 3 or fm.shape[0] < 1:
        raise DimensionError(f"feature maps must be [C, h, w] with C >= 1, got shape {fm.shape}")
    return fm.max(axis=0)


def normalize_heatmap(raw, source_stride: int = 1) -> AttentionMap:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise DimensionError(f"heatmap must be 2D, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("heatmap contains NaN or infinite values")
    lo, hi = raw.min(), raw.max()
    if hi - lo < DEGENERATE_RANGE:
        return AttentionMap(np.zeros_like(raw), source_stride, degenerate=True)
    return AttentionMap((raw - lo) / (hi - lo), source_stride)


def binarize(attention: AttentionMap, tau: float) -> Mask:
    if not 0.0 < tau < 1.0:
        raise ConfigurationError(f"threshold tau must lie in (0, 1), got {tau}")
    return Mask(attention.values > tau, float(tau))


def prefix_table(bits: np.ndarray) -> np.ndarray:
    """Summed-area table with a zero first row and column."""
    table = np.zeros((bits.shape[0] + 1, bits.shape[1] + 1), dtype=np.int64)
    table[1:, 1:] = np.cumsum(np.cumsum(bits.astype(np.int64), axis=0), axis=1)
    return table


def min_perimeter_box(mask: Mask | np.ndarray, coverage: float = DEFAULT_COVERAGE) -> Box:
    """Smallest-perimeter box holding at least ``ceil(coverage * active)`` cells.

    Ties go to the smaller area, then smaller ``r0``, ``c0`` and ``r1``.
    Exhaustive over boxes inside the active extent with O(1) prefix-sum
    counts.
    """
    bits = np.asarray(mask.bits if isinstance(mask, Mask) else mask, dtype=bool)
    if not 0.0 < coverage <= 1.0:
        raise ConfigurationError(f"coverage must lie in (0, 1], got {coverage}")
    total = int(bits.sum())
    if total == 0:
        raise NoActivationError("mask has no active pixel")
    # a tiny epsilon keeps e.g. 0.9*10 from rounding up to 10 in floating point
    need = max(1, math.ceil(coverage * total - 1e-9))
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    r0, c0, r1, c1 = kernels.box_search(prefix_table(bits), need, int(rows[0]), int(rows[-1]),
                                        int(cols[0]), int(cols[-1]))
    return Box(int(r0), int(c0), int(r1), int(c1), "feature")


def _expand(lo: int, hi: int, min_side: int, limit: int) -> tuple[int, int]:
    side = hi - lo + 1
    if side < min_side:
        deficit = min_side - side
        lo -= deficit // 2
        hi += deficit - deficit // 2
    if lo < 0:
        hi -= lo
        lo = 0
    if hi > limit - 1:
        lo -= hi - (limit - 1)
        hi = limit - 1
    return max(lo, 0), hi


def box_to_image_space(box: Box, stride: int, image_size: int, min_side: int = 8) -> Box:
    """Scale a feature-grid box to pixels, clamp, and grow to ``min_side``."""
    r0, r1 = box.r0 * stride, (box.r1 + 1) * stride - 1
    c0, c1 = box.c0 * stride, (box.c1 + 1) * stride - 1
    r0, r1 = max(r0, 0), min(r1, image_size - 1)
    c0, c1 = max(c0, 0), min(c1, image_size - 1)
    side = min(min_side, image_size)
    r0, r1 = _expand(r0, r1, side, image_size)
    c0, c1 = _expand(c0, c1, side, image_size)
    return Box(r0, c0, r1, c1, "image")


def crop_resize(image, box: Box, out_size: int) -> np.ndarray:
    """Bilinear align-corners resample of ``image[box]`` to ``out_size``²."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DimensionError(f"image must be 2D, got shape {img.shape}")
    h, w = img.shape
    if box.r1 >= h or box.c1 >= w:
        raise DimensionError(f"box {box.as_tuple()} exceeds image of shape {img.shape}")
    if out_size < 1:
        raise ConfigurationError(f"out_size must be positive, got {out_size}")
    return kernels.crop_bilinear(np.ascontiguousarray(img, dtype=np.float64), box.r0, box.c0, box.r1, box.c1,
                                 out_size)


def extract_roi(feature_maps, image, tau: float, coverage: float, stride: int, out_size: int,
                min_side: int = 8) -> RoiResult:
    """Heatmap, box and crop for one image; falls back to the full frame."""
    img = np.asarray(image, dtype=np.float64)
    size = img.shape[0]
    attention = normalize_heatmap(max_intensity_projection(feature_maps), stride)
    full = Box(0, 0, img.shape[0] - 1, img.shape[1] - 1, "image")
    if attention.degenerate:
        return RoiResult(attention, full, crop_resize(img, full, out_size), fallback=True)
    mask = binarize(attention, tau)
    try:
        fbox = min_perimeter_box(mask, coverage)
    except NoActivationError:
        return RoiResult(attention, full, crop_resize(img, full, out_size), fallback=True)
    box = box_to_image_space(fbox, stride, size, min_side)
    return RoiResult(attention, box, crop_resize(img, box, out_size), fallback=False, feature_box=fbox)
