"""Confusion-matrix segmentation metrics (per-class Acc/IoU, mAcc, mIoU)."""

from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    """``counts[g, p]``: pixels with ground truth ``g`` predicted as ``p``."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        k = self.num_classes
        for name, a in (("prediction", pred), ("ground truth", gt)):
            if a.size and (a.min() < 0 or a.max() >= k):
                raise ValueError(f"{name} class out of range [0, {k})")
        idx = gt.reshape(-1).astype(np.int64) * k + pred.reshape(-1)
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def metrics(self) -> dict:
        """Per-class accuracy/IoU and their means over classes present in the ground truth."""
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        cm = self.counts.astype(np.float64)
        tp = np.diag(cm)
        rows = cm.sum(axis=1)
        cols = cm.sum(axis=0)
        present = rows > 0
        acc = np.full(self.num_classes, np.nan)
        iou = np.full(self.num_classes, np.nan)
        acc[present] = tp[present] / rows[present]
        iou[present] = tp[present] / (rows + cols - tp)[present]
        return {
            "per_class_acc": acc,
            "per_class_iou": iou,
            "macc": float(acc[present].mean()),
            "miou": float(iou[present].mean()),
        }


def metrics(cm: ConfusionMatrix) -> dict:
    return cm.metrics()
