"""Probability maps to BraTS label maps, with false-positive reduction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import check_labels


@dataclass
class ComponentLabeling:
    ids: np.ndarray  # int32 volume, 0 = background, components 1..K
    sizes: np.ndarray  # sizes[k - 1] is the voxel count of component k
    connectivity: int

    @property
    def count(self) -> int:
        return len(self.sizes)


def fuse_channels(probs, threshold: float = 0.5) -> np.ndarray:
    """[ET, TC, WT] probabilities to labels by priority ET (4) > TC (1) > WT (2)."""
    probs = np.asarray(probs)
    if probs.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got shape {probs.shape}")
    et, tc, wt = (probs[i] > threshold for i in range(3))
    labels = np.zeros(probs.shape[1:], np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4
    return labels


def suppress_small_et(labels, min_et_voxels: int = 300) -> np.ndarray:
    """Relabel all ET voxels to 1 when fewer than ``min_et_voxels`` exist."""
    out = np.array(labels, dtype=np.uint8, copy=True)
    et = out == 4
    if 0 < np.count_nonzero(et) < min_et_voxels:
        out[et] = 1
    return out


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask, connectivity: int = 26) -> ComponentLabeling:
    """Label components; ids follow the row-major order of each component's first voxel."""
    m = np.asarray(mask, dtype=bool)
    ids, k = ndimage.label(m, structure=_structure(connectivity))
    sizes = np.bincount(ids.ravel(), minlength=k + 1)[1:]
    return ComponentLabeling(ids.astype(np.int32), sizes, connectivity)


def _drop_small(mask: np.ndarray, fraction: float, connectivity: int) -> np.ndarray:
    cc = connected_components(mask, connectivity)
    if cc.count == 0:
        return np.zeros_like(mask)
    keep = cc.sizes >= fraction * cc.sizes.sum()
    return np.concatenate([[False], keep])[cc.ids]


def filter_components(
    labels,
    fraction: float = 0.3,
    connectivity: int = 26,
    mode: str = "whole_tumor",
) -> np.ndarray:
    """Set components smaller than ``fraction`` of their class total to background.

    ``mode="whole_tumor"`` treats labels {1, 2, 4} as one mask; ``"per_label"``
    filters each label value separately.
    """
    labels = np.asarray(labels)
    check_labels(labels)
    out = labels.astype(np.uint8, copy=True)
    if mode == "whole_tumor":
        out[(labels > 0) & ~_drop_small(labels > 0, fraction, connectivity)] = 0
    elif mode == "per_label":
        for value in (1, 2, 4):
            m = labels == value
            out[m & ~_drop_small(m, fraction, connectivity)] = 0
    else:
        raise ValueError(f"unknown filter mode {mode!r}")
    return out


def postprocess(
    probs,
    threshold: float = 0.5,
    min_et_voxels: int = 300,
    fraction: float = 0.3,
    connectivity: int = 26,
    mode: str = "whole_tumor",
) -> np.ndarray:
    labels = fuse_channels(probs, threshold)
    labels = filter_components(labels, fraction, connectivity, mode)
    return suppress_small_et(labels, min_et_voxels)
