"""Training loss: class-averaged soft Dice plus a weighted L2 term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

DICE_SMOOTH = 1.0
L2_WEIGHT = 0.01
SUBREGIONS = ("ET", "TC", "WT")


@dataclass
class LossBreakdown:
    dice_per_class: Tensor  # (1 - DICE_c) for ET, TC, WT
    dice_mean: Tensor
    l2_term: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        out = {f"dice_{name.lower()}": float(v) for name, v in zip(SUBREGIONS, self.dice_per_class.data)}
        out["dice_mean"] = float(self.dice_mean.data)
        out["l2"] = float(self.l2_term.data)
        out["total"] = float(self.total.data)
        return out


def _check(pred: Tensor, target: np.ndarray):
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.data.ndim < 2:
        raise ValueError("expected [N, C, ...] prediction")


def soft_dice_loss(pred: Tensor, target, smooth: float = DICE_SMOOTH) -> tuple[Tensor, Tensor]:
    """Per-class ``1 - (2 sum(p g) + s) / (sum p + sum g + s)`` over the whole batch.

    Returns ``(per_class, mean)``; ``per_class`` has one entry per channel.
    """
    target = np.asarray(target, dtype=pred.dtype)
    _check(pred, target)
    axes = (0,) + tuple(range(2, pred.data.ndim))
    inter = (pred * target).sum(axis=axes)
    denom = pred.sum(axis=axes) + (target.sum(axis=axes) + smooth)
    dice = (inter * 2.0 + smooth) / denom
    per_class = 1.0 - dice
    return per_class, per_class.mean()


def total_loss(
    pred: Tensor,
    target,
    l2_weight: float = L2_WEIGHT,
    smooth: float = DICE_SMOOTH,
    l2_mode: str = "prediction",
    params: list[Tensor] | None = None,
) -> LossBreakdown:
    """``dice_mean + l2_weight * l2_term``.

    ``l2_mode="prediction"`` takes the mean of squared probabilities;
    ``"weights"`` takes the mean of squared entries of ``params`` instead.
    """
    per_class, dice_mean = soft_dice_loss(pred, target, smooth)
    if l2_mode == "prediction":
        l2 = (pred * pred).mean()
    elif l2_mode == "weights":
        if not params:
            raise ValueError("l2_mode='weights' needs params")
        n = sum(p.size for p in params)
        l2 = sum(((p * p).sum() for p in params[1:]), (params[0] * params[0]).sum()) * (1.0 / n)
    else:
        raise ValueError(f"unknown l2_mode {l2_mode!r}")
    total = dice_mean + l2 * l2_weight
    return LossBreakdown(per_class, dice_mean, l2, total)
