"""Confusion matrix, per-class IoU, overall accuracy and mean IoU."""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .pccore import CLASS_NAMES, IGNORE_LABEL, NUM_CLASSES


class ConfusionMatrix:
    """Counts with rows = ground truth and columns = prediction."""

    def __init__(self, num_classes: int = NUM_CLASSES, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes) or np.any(self.counts < 0):
            raise ValueError("counts must be a non-negative square matrix")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, predicted, truth) -> "ConfusionMatrix":
        predicted = np.asarray(predicted).astype(np.int64).reshape(-1)
        truth = np.asarray(truth).astype(np.int64).reshape(-1)
        if predicted.shape != truth.shape:
            raise ValueError(f"length mismatch: {predicted.size} predictions, {truth.size} labels")
        keep = truth != IGNORE_LABEL
        predicted, truth = predicted[keep], truth[keep]
        c = self.num_classes
        bad = (truth < 0) | (truth >= c) | (predicted < 0) | (predicted >= c)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"label out of range: truth {truth[i]}, prediction {predicted[i]}")
        self.counts += np.bincount(truth * c + predicted, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, predicted, truth) -> ConfusionMatrix:
    return cm.accumulate(predicted, truth)


@dataclass
class MetricsReport:
    iou: Dict[str, Optional[float]]  # None where the class never occurs in truth or prediction
    oa: float
    miou: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "miou": self.miou,
            "iou": dict(self.iou),
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self, method: str = "Ours") -> str:
        """One row in the layout Method | OA | mIoU | per-class IoU, percentages."""
        names = [n.capitalize() for n in self.iou]
        head = ["Method", "OA", "mIoU"] + names
        def pct(v):
            return "-" if v is None else f"{100 * v:.2f}%"
        row = [method, pct(self.oa), pct(self.miou)] + [pct(v) for v in self.iou.values()]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        fmt = " | ".join("{:>%d}" % w for w in widths)
        rule = "-+-".join("-" * w for w in widths)
        return "\n".join([fmt.format(*head), rule, fmt.format(*row)])


def compute_metrics(cm: ConfusionMatrix, class_names=CLASS_NAMES) -> MetricsReport:
    counts = cm.counts
    n = counts.sum()
    if n == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    names = list(class_names)[: cm.num_classes]
    names += [f"class{i}" for i in range(len(names), cm.num_classes)]
    # exact rationals so every reported value is the correctly rounded ratio
    exact = {name: Fraction(int(tp[c]), int(denom[c])) for c, name in enumerate(names) if denom[c] > 0}
    iou = {name: (float(exact[name]) if name in exact else None) for name in names}
    miou = sum(exact.values(), Fraction(0)) / len(exact)
    return MetricsReport(iou, float(Fraction(int(tp.sum()), int(n))), float(miou), counts.copy())


def evaluate_labels(predicted, truth, num_classes: int = NUM_CLASSES) -> MetricsReport:
    return compute_metrics(ConfusionMatrix(num_classes).accumulate(predicted, truth))
