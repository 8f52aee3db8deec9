"""Segmentation losses and metrics.

Training losses (balanced cross entropy, soft Dice, and their fixed 0.7/0.3
combination) are differentiable Tensor expressions; IoU and top-k accuracy
are plain-numpy evaluation metrics over hard label maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from microseg import tensor as T
from microseg.tensor import Tensor

__all__ = [
    "class_weights",
    "balanced_cross_entropy",
    "dice_loss",
    "combined_loss",
    "IoUReport",
    "iou",
    "topk_accuracy",
    "BCE_WEIGHT",
    "DICE_WEIGHT",
]

BCE_WEIGHT = 0.7
DICE_WEIGHT = 0.3


def class_weights(hist):
    """Inverse-frequency weights from a per-class pixel histogram.

    w_c = total / (classes_present * count_c) for classes with pixels; absent
    classes get weight 1 so indexing stays total.
    """
    hist = np.asarray(hist, dtype=np.float64)
    if hist.ndim != 1 or np.any(hist < 0):
        raise ValueError("histogram must be 1-d and non-negative")
    total = hist.sum()
    if total == 0:
        raise ValueError("histogram is all zero")
    present = hist > 0
    weights = np.ones(len(hist), dtype=np.float64)
    weights[present] = total / (present.sum() * hist[present])
    return weights


def _check_target(target, num_classes):
    target = np.asarray(target)
    if not np.issubdtype(target.dtype, np.integer):
        raise ValueError(f"target must be integer class indices, got {target.dtype}")
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise ValueError(
            f"target values outside [0, {num_classes}): "
            f"range [{target.min()}, {target.max()}]"
        )
    return target


def _one_hot(target, num_classes, dtype):
    b, h, w = target.shape
    onehot = np.zeros((b, num_classes, h, w), dtype=dtype)
    bi, ri, ci = np.indices(target.shape)
    onehot[bi, target, ri, ci] = 1.0
    return onehot


def balanced_cross_entropy(logits, target, weights=None):
    """Mean over pixels of w[y] * (-log softmax(logits)[y]).

    logits: Tensor (B, K, H, W); target: integer map (B, H, W); weights: one
    positive weight per class (None means uniform 1).
    """
    k = logits.shape[1]
    target = _check_target(target, k)
    if weights is None:
        weights = np.ones(k, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (k,) or np.any(weights <= 0):
        raise ValueError(f"need {k} positive class weights")
    log_p = T.log_softmax(logits, axis=1)
    onehot = _one_hot(target, k, logits.dtype)
    nll = -(log_p * Tensor(onehot)).sum(axis=1)  # (B, H, W)
    wmap = weights[target].astype(logits.dtype)
    return (nll * Tensor(wmap)).mean()


def dice_loss(logits, target, eps=1.0):
    """1 - mean over classes of (2*|p*g| + eps) / (|p| + |g| + eps).

    Soft probabilities p come from softmax over the class axis; g is the
    one-hot target.  eps keeps absent classes at a perfect score instead of
    0/0.
    """
    k = logits.shape[1]
    target = _check_target(target, k)
    probs = T.softmax(logits, axis=1)
    onehot = Tensor(_one_hot(target, k, logits.dtype))
    inter = (probs * onehot).sum(axis=(0, 2, 3))  # (K,)
    psum = probs.sum(axis=(0, 2, 3))
    gsum = onehot.data.sum(axis=(0, 2, 3))
    dice = (inter * 2.0 + eps) / (psum + Tensor(gsum) + eps)
    return 1.0 - dice.mean()


def combined_loss(logits, target, weights=None):
    """Exactly 0.7 * balanced cross entropy + 0.3 * Dice."""
    return (
        BCE_WEIGHT * balanced_cross_entropy(logits, target, weights)
        + DICE_WEIGHT * dice_loss(logits, target)
    )


@dataclass
class IoUReport:
    """Per-class intersection-over-union; None marks an empty-union class."""

    per_class: list
    mean: float

    @staticmethod
    def from_counts(inter, union):
        per_class = [
            None if u == 0 else i / u for i, u in zip(inter, union)
        ]
        defined = [x for x in per_class if x is not None]
        mean = float(np.mean(defined)) if defined else float("nan")
        return IoUReport(per_class=per_class, mean=mean)


def iou(pred, target, num_classes):
    """IoU per class between two label maps; empty-union classes are excluded
    from the mean."""
    pred = _check_target(pred, num_classes)
    target = _check_target(target, num_classes)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    inter = np.empty(num_classes, dtype=np.int64)
    union = np.empty(num_classes, dtype=np.int64)
    for c in range(num_classes):
        p = pred == c
        t = target == c
        inter[c] = np.sum(p & t)
        union[c] = np.sum(p | t)
    return IoUReport.from_counts(inter, union)


def topk_accuracy(logits, labels, k):
    """Fraction of rows whose label is among the k largest logits.

    Ties rank the lower class index first (stable sort on descending score).
    """
    logits = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(labels)
    n, num_classes = logits.shape
    if not 1 <= k <= num_classes:
        raise ValueError(f"k must be in [1, {num_classes}], got {k}")
    _check_target(labels, num_classes)
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())
