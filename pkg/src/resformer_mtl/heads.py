"""Output heads and training losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backend import ShapeError, Tensor, as_tensor, ops
from .nn import Conv2d, Linear, Module

LOG_CLAMP = 1e-7
DICE_SMOOTH = 1.0


class ClassificationHead(Module):
    """FC(relu(FC(concat(GAP(level-3 feature), GAP(level-4 feature))))) -> n logits."""

    def __init__(self, c3: int, c4: int, hidden: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.c3, self.c4 = c3, c4
        self.fc1 = Linear(c3 + c4, hidden, rng)
        self.fc2 = Linear(hidden, n_classes, rng)

    def pooled(self, f3: Tensor, f4: Tensor) -> Tensor:
        if f3.shape[1] != self.c3 or f4.shape[1] != self.c4:
            raise ShapeError(
                f"ClassificationHead: got channels ({f3.shape[1]}, {f4.shape[1]}), "
                f"expected ({self.c3}, {self.c4})"
            )
        return ops.concat([ops.global_avg_pool(f3), ops.global_avg_pool(f4)], axis=1)

    def forward(self, f3: Tensor, f4: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(self.pooled(f3, f4))))


class SegmentationHead(Module):
    """Per-pixel softmax over n lesion classes plus background (channel 0)."""

    def __init__(self, in_channels: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, n_classes + 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.softmax(self.conv(x), axis=1)


@dataclass
class LossWeights:
    lambda_cls: float = 0.25
    lambda_seg: float = 1.0
    class_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.lambda_cls < 0 or self.lambda_seg < 0:
            raise ValueError("loss weights must be non-negative")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(self.class_weights <= 0):
                raise ValueError("class weights must be positive")


def inverse_frequency_weights(labels: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Per-class weights proportional to 1 / positive rate, normalised to mean 1."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or len(labels) == 0:
        raise ValueError("labels must be a non-empty (samples, classes) array")
    freq = np.maximum(labels.mean(axis=0), floor)
    w = 1.0 / freq
    return w / w.mean()


def _floor_value(log_prob: Tensor) -> Tensor:
    """Clamp log-probabilities at log(LOG_CLAMP) in value only.

    The gradient passes through unchanged: a zero-gradient clamp would freeze
    a confidently wrong logit for good.
    """
    floor = math.log(LOG_CLAMP)
    return ops.add(log_prob, np.maximum(log_prob.data, floor) - log_prob.data)


def weighted_multilabel_loss(logits, targets, weights=None) -> Tensor:
    """Class-weighted binary cross-entropy, averaged over batch and classes.

    Log arguments are clamped from below at ``LOG_CLAMP`` (value only, see
    :func:`_floor_value`).
    """
    logits = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"labels shape {y.shape} != logits shape {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("classification labels must be 0 or 1")
    n = logits.shape[-1]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=logits.dtype)
    if w.shape != (n,):
        raise ShapeError(f"class weights shape {w.shape} != ({n},)")
    log_p = _floor_value(ops.log_sigmoid(logits))
    log_not_p = _floor_value(ops.log_sigmoid(ops.neg(logits)))
    per = ops.neg(ops.add(ops.mul(log_p, y), ops.mul(log_not_p, 1.0 - y)))
    return ops.mean(ops.mul(per, w))


def one_hot(mask: np.ndarray, n_labels: int) -> np.ndarray:
    """(B, H, W) integer labels -> (B, n_labels, H, W) one-hot."""
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= n_labels:
        raise ValueError(f"mask labels must lie in [0, {n_labels - 1}]")
    return np.moveaxis(np.eye(n_labels)[mask], -1, 1)


def dice_loss(probs, target_onehot) -> Tensor:
    """Soft Dice over foreground classes (channel 0 = background is skipped).

    Per image and class: 1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1); the
    mean is taken over foreground classes and batch.
    """
    probs = as_tensor(probs)
    g = np.asarray(target_onehot, dtype=probs.dtype)
    if g.shape != probs.shape:
        raise ShapeError(f"dice_loss: target shape {g.shape} != prediction shape {probs.shape}")
    if probs.ndim != 4 or probs.shape[1] < 2:
        raise ShapeError("dice_loss expects (B, n+1, H, W) with at least one foreground class")
    p = probs[:, 1:]
    g = g[:, 1:]
    inter = ops.sum(ops.mul(p, g), axis=(2, 3))
    denom = ops.add(ops.sum(p, axis=(2, 3)), g.sum(axis=(2, 3)) + DICE_SMOOTH)
    score = ops.div(ops.add(ops.mul(inter, 2.0), DICE_SMOOTH), denom)
    return ops.sub(1.0, ops.mean(score))


@dataclass
class MtlOutput:
    cls_logits: Tensor  # (B, n)
    seg_probs: Tensor  # (B, n+1, H, W)


def combine(cls_loss: Tensor, seg_loss: Tensor, weights: LossWeights) -> Tensor:
    """lambda_cls * classification loss + lambda_seg * Dice loss."""
    return ops.add(ops.mul(cls_loss, weights.lambda_cls), ops.mul(seg_loss, weights.lambda_seg))


def combined_loss(out: MtlOutput, y_cls, y_seg, weights: LossWeights):
    """Return (total, classification loss, Dice loss) for one batch.

    ``y_seg`` is an integer label map (B, H, W) with 0 = background.
    """
    wce = weighted_multilabel_loss(out.cls_logits, y_cls, weights.class_weights)
    dice = dice_loss(out.seg_probs, one_hot(y_seg, out.seg_probs.shape[1]))
    return combine(wce, dice, weights), wce, dice
