"""Segmentation losses (binary cross-entropy + Dice combo, with an auxiliary
early-supervision copy), the IoU metric, and a finite-difference gradient
checker for the hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .camera import _sigmoid

DICE_SMOOTHING = 1.0


@dataclass(frozen=True)
class LossWeights:
    bce: float = 1.0
    dice: float = 1.0

    def __post_init__(self):
        if self.bce < 0 or self.dice < 0:
            raise ValueError("loss weights must be non-negative")
        if self.bce == 0 and self.dice == 0:
            raise ValueError("at least one loss weight must be positive")


def _as_map(x) -> np.ndarray:
    arr = x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else x
    return np.asarray(arr, dtype=np.float64)


def bce_loss(logits, target) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy from logits, in the stable max/log1p form.

    Returns (loss, dL/dlogits) with gradient (sigmoid(x) - y) / P.
    """
    x = _as_map(logits)
    y = _as_map(target)
    if x.shape != y.shape:
        raise ValueError("logit/target shape mismatch")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be binary")
    per_pixel = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    p = x.size
    grad = (_sigmoid(x) - y) / p
    return float(per_pixel.sum() / p), grad


def dice_loss(probs, target) -> tuple[float, np.ndarray]:
    """Smoothed Dice loss 1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s)."""
    p = _as_map(probs)
    y = _as_map(target)
    if p.shape != y.shape:
        raise ValueError("prob/target shape mismatch")
    if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
        raise ValueError("probabilities must lie in [0, 1]")
    s = DICE_SMOOTHING
    num = 2.0 * np.sum(p * y) + s
    den = np.sum(p) + np.sum(y) + s
    loss = 1.0 - num / den
    grad = -(2.0 * y * den - num) / den**2
    return float(loss), grad


def combo_loss(
    main_logits,
    aux_logits,
    target,
    weights: LossWeights = LossWeights(),
) -> tuple[float, np.ndarray, np.ndarray]:
    """Main + auxiliary segmentation loss, each weighted BCE plus Dice.

    The auxiliary head shares the target and the definition; gradients are
    returned for both logit maps.
    """
    y = _as_map(target)

    def one(logits):
        x = _as_map(logits)
        if x.shape != y.shape:
            raise ValueError("logit/target shape mismatch")
        total = 0.0
        grad = np.zeros_like(x)
        if weights.bce > 0:
            l, g = bce_loss(x, y)
            total += weights.bce * l
            grad += weights.bce * g
        if weights.dice > 0:
            probs = _sigmoid(x)
            l, g = dice_loss(probs, y)
            total += weights.dice * l
            grad += weights.dice * g * probs * (1.0 - probs)
        return total, grad

    main_val, main_grad = one(main_logits)
    aux_val, aux_grad = one(aux_logits)
    return main_val + aux_val, main_grad, aux_grad


def iou(pred_logits, target, threshold: float = 0.5) -> float:
    """Jaccard index of the thresholded prediction against a binary target.

    Empty union counts as perfect agreement (IoU = 1).
    """
    x = _as_map(pred_logits)
    y = _as_map(target)
    if x.shape != y.shape:
        raise ValueError("pred/target shape mismatch")
    pred = _sigmoid(x) > threshold
    inter = float(np.sum(pred * y))
    union = float(np.sum(pred + y - pred * y))
    if union == 0.0:
        return 1.0
    return inter / union


def finite_diff_check(
    fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    h: float = 1e-4,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn`` maps a parameter dict to (scalar loss, gradient dict).  With
    ``sample`` set, only that many coordinates per parameter are probed
    (chosen by ``rng``); relative error uses max(|fd|, |analytic|, floor) as
    denominator.
    """
    _, grads = fn(params)
    worst = 0.0
    for key, arr in params.items():
        size = arr.size
        if sample is not None and sample < size:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(size, size=sample, replace=False)
        else:
            coords = range(size)
        for idx in coords:
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[key].flat[idx] += h
            minus[key].flat[idx] -= h
            fd = (fn(plus)[0] - fn(minus)[0]) / (2.0 * h)
            an = grads[key].flat[idx]
            err = abs(fd - an) / max(abs(fd), abs(an), floor)
            worst = max(worst, err)
    return worst
