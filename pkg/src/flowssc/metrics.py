"""Confusion statistics, IoU and mIoU for semantic voxel grids.

Class 0 is "empty".  Geometric IoU treats every other class as occupied.
mIoU averages per-class IoU over the non-empty classes that appear in the
prediction or the ground truth; classes absent from both are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionStats:
    num_classes: int
    matrix: np.ndarray = field(default=None)  # rows: gt, cols: pred

    def __post_init__(self):
        if self.matrix is None:
            self.matrix = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    def fp(self) -> np.ndarray:
        return self.matrix.sum(axis=0) - np.diag(self.matrix)

    def fn(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - np.diag(self.matrix)

    def geometric(self) -> tuple[int, int, int]:
        m = self.matrix
        tp = int(m[1:, 1:].sum())
        fp = int(m[0, 1:].sum())
        fn = int(m[1:, 0].sum())
        return tp, fp, fn

    def merge(self, other: "ConfusionStats") -> "ConfusionStats":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge stats over different class counts")
        return ConfusionStats(self.num_classes, self.matrix + other.matrix)

    def __add__(self, other: "ConfusionStats") -> "ConfusionStats":
        return self.merge(other)


def accumulate(pred: np.ndarray, gt: np.ndarray, stats: ConfusionStats) -> ConfusionStats:
    """Add the counts of one (pred, gt) pair to ``stats`` in place and return it."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction dims {pred.shape} differ from ground truth {gt.shape}")
    k = stats.num_classes
    if pred.size and (pred.max() >= k or gt.max() >= k):
        raise ValueError(f"labels must be < {k}")
    idx = gt.reshape(-1).astype(np.int64) * k + pred.reshape(-1).astype(np.int64)
    stats.matrix += np.bincount(idx, minlength=k * k).reshape(k, k)
    return stats


def per_class_iou(stats: ConfusionStats) -> np.ndarray:
    """IoU per class (index 0 included for completeness); NaN where the class is absent."""
    tp, fp, fn = stats.tp(), stats.fp(), stats.fn()
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def iou(stats: ConfusionStats) -> float:
    """Geometric (occupied vs empty) IoU; 1.0 when both sides are entirely empty."""
    tp, fp, fn = stats.geometric()
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def miou(stats: ConfusionStats) -> float:
    if stats.total == 0:
        raise ValueError("mIoU of empty statistics")
    ious = per_class_iou(stats)[1:]
    present = ~np.isnan(ious)
    if not present.any():
        return 1.0
    return float(ious[present].mean())


def evaluate(preds, gts, num_classes: int) -> ConfusionStats:
    stats = ConfusionStats(num_classes)
    for p, g in zip(preds, gts):
        accumulate(p, g, stats)
    return stats
