"""Overlap and surface-distance metrics on binary volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class UndefinedMetricError(ValueError):
    """Raised when a metric has no value for the given masks (e.g. HD95 of an empty mask)."""


@dataclass(frozen=True)
class BinaryConfusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred_mask, gt_mask) -> BinaryConfusion:
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return BinaryConfusion(tp, fp, p.size - tp - fp - fn, fn)


def dice_score(c: BinaryConfusion) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def sensitivity(c: BinaryConfusion) -> float:
    # empty ground truth: nothing to miss
    return 1.0 if c.tp + c.fn == 0 else c.tp / (c.tp + c.fn)


def specificity(c: BinaryConfusion) -> float:
    return 1.0 if c.tn + c.fp == 0 else c.tn / (c.tn + c.fp)


def boundary(mask) -> np.ndarray:
    """Mask voxels with a 6-neighbour outside the mask; the volume border counts as outside."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for axis in range(m.ndim):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=axis)[(slice(1, -1),) * m.ndim]
    return m & ~interior


def _distances(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Distance from each ``src`` point to its nearest ``dst`` point (mm)."""
    _, idx = cKDTree(dst * spacing).query(src * spacing)
    diff = (src - dst[idx]) * spacing
    return np.sqrt((diff * diff).sum(axis=1))


def percentile_nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise UndefinedMetricError("percentile of empty set")
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def hausdorff95(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile boundary distance.

    Raises :class:`UndefinedMetricError` if either mask is empty.
    """
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedMetricError("hausdorff95 undefined for an empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    d_ab = _distances(pa, pb, sp)
    d_ba = _distances(pb, pa, sp)
    return max(percentile_nearest_rank(d_ab), percentile_nearest_rank(d_ba))
