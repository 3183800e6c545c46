"""Deterministic synthetic fetal-brain phantoms.

Every random quantity comes from a SplitMix64 stream keyed by
``(dataset_seed, subject_id, view_index)``, so any sample can be regenerated
on its own, in any order, bit for bit.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from .attention import Box
from .errors import ConfigurationError

AGE_MIN = 125.0
AGE_MAX = 273.0
VIEWS = ("axial", "sagittal", "coronal")
VIEW_ASPECT = {"axial": 1.0, "sagittal": 1.3, "coronal": 0.8}
AGE_STREAM = 3  # view_index slot reserved for per-subject draws (age)

GAMMA = kernels.GAMMA
MASK64 = kernels.MASK64

RADIUS_YOUNG = 0.10
RADIUS_OLD = 0.22
CYCLES_YOUNG = 3.0
CYCLES_OLD = 9.0
RADIUS_JITTER = 0.05
NOISE_SIGMA = 8.0
BACKGROUND = 20.0
RING_LEVEL = 95.0
BRAIN_LEVEL = 150.0
BRAIN_CONTRAST = 50.0


def mix64(z: int) -> int:
    """The SplitMix64 output function."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * kernels.MIX1) & MASK64
    z = ((z ^ (z >> 27)) * kernels.MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a 64-bit stream seed: s <- mix64((s ^ k) + GAMMA)."""
    s = mix64((seed + GAMMA) & MASK64)
    for k in keys:
        s = mix64(((s ^ (k & MASK64)) + GAMMA) & MASK64)
    return s


class SplitMix64:
    """SplitMix64 generator (Steele, Lea and Flood constants)."""

    def __init__(self, state: int):
        self.state = state & MASK64

    @classmethod
    def stream(cls, seed: int, *keys: int) -> "SplitMix64":
        return cls(derive_seed(seed, *keys))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self) -> float:
        """Float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def below(self, n: int) -> int:
        """Integer in [0, n)."""
        return min(int(self.uniform() * n), n - 1)

    def normal(self) -> float:
        u1 = ((self.next_u64() >> 11) + 1) * (1.0 / (1 << 53))
        u2 = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def u64_block(self, n: int) -> np.ndarray:
        out = kernels.splitmix_block(np.uint64(self.state), n)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def normal_block(self, n: int) -> np.ndarray:
        """``n`` standard normals by Box-Muller, consuming 2n outputs."""
        raw = self.u64_block(2 * n).reshape(n, 2)
        scale = 1.0 / (1 << 53)
        u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * scale
        u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * scale
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates, in place; returns ``items``."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def age_fraction(age_days: float) -> float:
    return (age_days - AGE_MIN) / (AGE_MAX - AGE_MIN)


def check_age(age_days: float) -> None:
    if not AGE_MIN <= age_days <= AGE_MAX:
        raise ConfigurationError(f"age {age_days} days is outside [{AGE_MIN:g}, {AGE_MAX:g}]")


def view_index(view: str) -> int:
    try:
        return VIEWS.index(view)
    except ValueError:
        raise ConfigurationError(f"unknown view {view!r}; expected one of {VIEWS}") from None


def _ellipse_rho2(rr, cc, cy, cx, a, b, theta):
    dy = rr - cy
    dx = cc - cx
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    return (u / a) ** 2 + (v / b) ** 2


def generate_phantom(age_days: float, view: str, rng: SplitMix64, size: int = 96,
                     return_mask: bool = False):
    """Render one phantom; returns ``(uint8 image, gt Box)``.

    Age drives both the brain's mean radius (0.10*size at 125 d to 0.22*size
    at 273 d, with 5% per-sample jitter) and the number of radial texture
    bands (3 to 9). Clutter blobs share the brain's grey levels but are flat.
    """
    check_age(age_days)
    vi = view_index(view)
    t = age_fraction(age_days)
    s = float(size)

    jitter = min(max(1.0 + RADIUS_JITTER * rng.normal(), 0.85), 1.15)
    radius = s * (RADIUS_YOUNG + (RADIUS_OLD - RADIUS_YOUNG) * t) * jitter
    aspect = VIEW_ASPECT[view]
    a = radius * math.sqrt(aspect)
    b = radius / math.sqrt(aspect)
    theta = rng.uniform() * math.pi
    hx = math.sqrt((a * math.cos(theta)) ** 2 + (b * math.sin(theta)) ** 2)
    hy = math.sqrt((a * math.sin(theta)) ** 2 + (b * math.cos(theta)) ** 2)
    cy = rng.uniform_range(hy + 1.0, s - 2.0 - hy)
    cx = rng.uniform_range(hx + 1.0, s - 2.0 - hx)
    cycles = CYCLES_YOUNG + (CYCLES_OLD - CYCLES_YOUNG) * t
    phase = vi * 2.0 * math.pi / 3.0

    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    canvas = np.full((size, size), BACKGROUND)

    # maternal ring around the frame centre
    ring_r = s * rng.uniform_range(0.40, 0.46)
    ring_w = s * rng.uniform_range(0.03, 0.06)
    ry = s / 2 + s * rng.uniform_range(-0.04, 0.04)
    rx = s / 2 + s * rng.uniform_range(-0.04, 0.04)
    dist = np.hypot(rr - ry, cc - rx)
    canvas[np.abs(dist - ring_r) <= ring_w / 2] = RING_LEVEL

    n_blobs = 3 + rng.below(4)
    for _ in range(n_blobs):
        by = rng.uniform_range(0.0, s - 1.0)
        bx = rng.uniform_range(0.0, s - 1.0)
        br = s * rng.uniform_range(0.04, 0.10)
        baspect = rng.uniform_range(0.6, 1.6)
        btheta = rng.uniform() * math.pi
        level = rng.uniform_range(BRAIN_LEVEL - BRAIN_CONTRAST, BRAIN_LEVEL + BRAIN_CONTRAST)
        inside = _ellipse_rho2(rr, cc, by, bx, br * math.sqrt(baspect), br / math.sqrt(baspect), btheta) <= 1.0
        canvas[inside] = level

    rho2 = _ellipse_rho2(rr, cc, cy, cx, a, b, theta)
    brain = rho2 <= 1.0
    rho = np.sqrt(rho2[brain])
    canvas[brain] = BRAIN_LEVEL + BRAIN_CONTRAST * np.cos(2.0 * math.pi * cycles * rho + phase)

    canvas += NOISE_SIGMA * rng.normal_block(size * size).reshape(size, size)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)

    rows = np.flatnonzero(brain.any(axis=1))
    cols = np.flatnonzero(brain.any(axis=0))
    box = Box(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]), "image")
    if return_mask:
        return image, box, brain
    return image, box
