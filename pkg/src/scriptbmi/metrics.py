"""Cross-entropy loss, confusion matrices and support-weighted metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InputError, LabelError, ShapeError
from .tensor import as_tensor

PROB_FLOOR = 1e-12
CSV_HEADER = ("accuracy", "precision", "recall", "f1")


def _check_labels(probs, labels):
    probs = as_tensor(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ShapeError(f"probabilities must be (B, K), got {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise ShapeError(f"expected {probs.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise LabelError(f"labels must lie in [0, {probs.shape[1]})")
    return probs, labels.astype(np.int64)


def cross_entropy(probs, labels) -> float:
    """Mean negative log-likelihood; probabilities are floored at 1e-12."""
    probs, labels = _check_labels(probs, labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def softmax_ce_backward(probs, labels) -> np.ndarray:
    """Gradient of mean cross-entropy with respect to the softmax logits."""
    probs, labels = _check_labels(probs, labels)
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        k = self.num_classes
        lines = ["true\\pred," + ",".join(str(i) for i in range(k))]
        for i, row in enumerate(self.counts):
            lines.append(f"{i}," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def confusion(preds, labels, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise InputError(f"{len(preds)} predictions vs {len(labels)} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(f"{name} index outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricsReport:
    accuracy: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray

    def as_row(self) -> tuple[float, float, float, float]:
        return (self.accuracy, self.precision_weighted, self.recall_weighted, self.f1_weighted)

    def csv_row(self) -> str:
        """Percentages with two decimals, in accuracy/precision/recall/F1 order."""
        return ",".join(f"{100.0 * v:.2f}" for v in self.as_row())


def _safe_ratio(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def weighted_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class precision/recall/F1 and their class-support-weighted means.

    A class whose denominator is zero scores 0 for that metric.
    """
    counts = np.asarray(cm.counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise InputError("confusion matrix holds no samples")
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    precision = _safe_ratio(tp, predicted)
    recall = _safe_ratio(tp, support)
    f1 = _safe_ratio(2.0 * precision * recall, precision + recall)
    weights = support / total
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        precision_weighted=float(weights @ precision),
        recall_weighted=float(weights @ recall),
        f1_weighted=float(weights @ f1),
        precision=precision,
        recall=recall,
        f1=f1,
        support=support.astype(np.int64),
    )
