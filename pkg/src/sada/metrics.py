"""
Segmentation metrics: confusion-matrix mIoU and pixelwise expected
calibration error.

Both accumulators are mergeable, so per-image results can be combined in any
order (and across threads) into dataset totals.

Usage:
    >>> cm = ConfusionMatrix(2)
    >>> cm.update(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    >>> per_class, mean = miou(cm)
    >>> round(mean, 4)
    0.5833
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from .exceptions import SadaShapeError, SadaValidationError
from .pseudo_label import IGNORE
from .types import HistogramDump

logger = logging.getLogger(__name__)

ECE_BINS = 10


class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns are predictions.

    Pixels labeled :data:`IGNORE` (or outside 0..C-1) are not counted.
    """

    def __init__(self, num_classes: int) -> None:
        if num_classes < 1:
            raise SadaValidationError(f"num_classes must be >= 1, got {num_classes}", parameter="num_classes")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise SadaShapeError(
                f"prediction {pred.shape} and ground truth {gt.shape} differ",
                shapes=[pred.shape, gt.shape],
            )
        gt = gt.astype(np.int64)
        pred = pred.astype(np.int64)
        valid = (gt != IGNORE) & (gt >= 0) & (gt < self.num_classes)
        c = self.num_classes
        self.counts += np.bincount(c * gt[valid] + pred[valid], minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise SadaShapeError(
                f"cannot merge {other.num_classes}-class counts into {self.num_classes}-class counts",
                shapes=[other.counts.shape, self.counts.shape],
            )
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, Optional[float]]:
    """Per-class IoU (NaN where the union is empty) and their mean.

    Classes with an empty union are left out of the mean; the mean is None
    when every union is empty.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(union > 0, tp / union, np.nan)
    present = union > 0
    mean = float(per_class[present].mean()) if present.any() else None
    return per_class, mean


class CalibrationHistogram:
    """Equal-width confidence bins over (0, 1], right-closed.

    Attributes:
        count: Pixels per bin
        conf_sum: Sum of confidences per bin (float64)
        correct: Correctly predicted pixels per bin
    """

    def __init__(self, n_bins: int = ECE_BINS) -> None:
        if n_bins < 1:
            raise SadaValidationError(f"n_bins must be >= 1, got {n_bins}", parameter="n_bins")
        self.n_bins = n_bins
        self.edges = np.linspace(0.0, 1.0, n_bins + 1)
        self.count = np.zeros(n_bins, dtype=np.int64)
        self.conf_sum = np.zeros(n_bins, dtype=np.float64)
        self.correct = np.zeros(n_bins, dtype=np.int64)

    def bin_index(self, confidence: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.edges, np.asarray(confidence, dtype=np.float64), side="left") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def update(self, confidence: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> "CalibrationHistogram":
        """Add pixels; ``confidence`` is the max softmax probability per pixel."""
        confidence, pred, gt = np.asarray(confidence), np.asarray(pred), np.asarray(gt)
        if not confidence.shape == pred.shape == gt.shape:
            raise SadaShapeError(
                "confidence, prediction and ground truth must share one shape",
                shapes=[confidence.shape, pred.shape, gt.shape],
            )
        valid = gt != IGNORE
        conf = confidence[valid].astype(np.float64)
        hit = (pred[valid].astype(np.int64) == gt[valid].astype(np.int64)).astype(np.int64)
        idx = self.bin_index(conf)
        self.count += np.bincount(idx, minlength=self.n_bins)
        # exact in float64 for confidences >= 1/C, so bin sums are order-free
        self.conf_sum += np.bincount(idx, weights=conf, minlength=self.n_bins)
        self.correct += np.bincount(idx, weights=hit, minlength=self.n_bins).astype(np.int64)
        return self

    def merge(self, other: "CalibrationHistogram") -> "CalibrationHistogram":
        if other.n_bins != self.n_bins:
            raise SadaShapeError(f"bin counts differ: {other.n_bins} vs {self.n_bins}")
        out = CalibrationHistogram(self.n_bins)
        out.count = self.count + other.count
        out.conf_sum = self.conf_sum + other.conf_sum
        out.correct = self.correct + other.correct
        return out

    @property
    def total(self) -> int:
        return int(self.count.sum())

    def to_dict(self) -> HistogramDump:
        return {
            "count": [int(v) for v in self.count],
            "conf_sum": [float(v) for v in self.conf_sum],
            "correct": [int(v) for v in self.correct],
        }


def ece(hist: CalibrationHistogram) -> Optional[float]:
    """sum_b (n_b / n) * |acc_b - conf_b|; None when no pixel was evaluated."""
    n = hist.total
    if n == 0:
        return None
    return float(np.abs(hist.correct - hist.conf_sum).sum() / n)


def confidence_and_prediction(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel max probability and argmax class of a C x H x W map."""
    probs = np.asarray(probs)
    pred = np.argmax(probs, axis=0)
    conf = np.take_along_axis(probs, pred[None], axis=0)[0]
    return conf, pred
