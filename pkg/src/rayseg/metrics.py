"""Segmentation and reconstruction metrics: confusion matrix, per-class IoU
and its mean, and PSNR for color renders."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

PSNR_CAP_DB = 99.0


class ConfusionMatrix:
    """Integer counts, rows = ground truth, cols = prediction."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ContractError("need at least one class")
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, gt: np.ndarray, pred: np.ndarray):
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ShapeError(f"gt {gt.shape} vs pred {pred.shape}")
        l = self.num_classes
        if gt.min(initial=0) < 0 or gt.max(initial=0) >= l \
                or pred.min(initial=0) < 0 or pred.max(initial=0) >= l:
            raise ContractError("class id outside the matrix")
        flat = gt * l + pred
        self.counts += np.bincount(flat, minlength=l * l).reshape(l, l)

    def merge(self, other: "ConfusionMatrix"):
        if other.num_classes != self.num_classes:
            raise ShapeError("confusion matrices of different sizes")
        self.counts += other.counts


def miou(cm: ConfusionMatrix):
    """(mean IoU, per-class IoU array).

    Per class: TP / (TP + FP + FN).  Classes absent from both ground truth
    and prediction have undefined 0/0 IoU; they are NaN in the per-class
    array and excluded from the mean.
    """
    counts = cm.counts
    if counts.sum() == 0:
        raise ContractError("empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        raise ContractError("no class present in ground truth or prediction")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[present] = tp[present] / denom[present]
    return float(per_class[present].mean()), per_class


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """10 log10(1 / MSE) for intensities in [0,1]; capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"psnr: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))
