"""Regression and localization metrics."""
from __future__ import annotations

import numpy as np

from .attention import Box
from .errors import DimensionError


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(y_true, dtype=np.float64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if t.shape != p.shape:
        raise DimensionError(f"length mismatch: {t.size} targets vs {p.size} predictions")
    return t, p


def r2_score(y_true, y_pred) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    t, p = _pair(y_true, y_pred)
    if t.size < 2:
        raise ValueError("r2_score needs at least 2 samples")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r2_score is undefined for constant targets")
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


def mae(y_true, y_pred) -> float:
    t, p = _pair(y_true, y_pred)
    if t.size == 0:
        raise ValueError("mae of an empty set")
    return float(np.mean(np.abs(t - p)))


def iou(a: Box, b: Box) -> float:
    """Intersection over union with inclusive pixel bounds."""
    if a.space != b.space:
        raise ValueError(f"boxes live in different coordinate spaces ({a.space} vs {b.space})")
    ih = min(a.r1, b.r1) - max(a.r0, b.r0) + 1
    iw = min(a.c1, b.c1) - max(a.c0, b.c0) + 1
    inter = max(ih, 0) * max(iw, 0)
    return inter / (a.area + b.area - inter)
