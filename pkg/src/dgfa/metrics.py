"""Confusion-matrix segmentation metrics: OA, mAcc, per-class and mean IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    oa: float
    macc: float
    miou: float
    iou: np.ndarray
    confusion: np.ndarray

    def to_dict(self, class_names=None) -> dict:
        names = class_names or [str(c) for c in range(len(self.iou))]
        return {
            "OA": self.oa,
            "mAcc": self.macc,
            "mIoU": self.miou,
            "per_class_IoU": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, self.iou)},
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """Counts with ground truth on rows and prediction on columns."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {gt.size} labels")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels out of range [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def evaluate(pred, gt, num_classes: int) -> Metrics:
    """Segmentation metrics.

    IoU_c = TP / (TP + FP + FN). Classes absent from both prediction and
    ground truth get NaN IoU and are left out of mIoU; mAcc averages recall
    over the classes that occur in the ground truth.
    """
    cm = confusion_matrix(pred, gt, num_classes)
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    union = gt_count + pred_count - tp
    total = cm.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        recall = np.where(gt_count > 0, tp / gt_count, np.nan)
    oa = float(tp.sum() / total) if total else float("nan")
    miou = float(np.nanmean(iou)) if np.any(union > 0) else float("nan")
    macc = float(np.nanmean(recall)) if np.any(gt_count > 0) else float("nan")
    return Metrics(oa, macc, miou, iou, cm)
