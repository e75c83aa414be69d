"""Classification metrics: accuracy, confusion matrix, weighted F1."""
from __future__ import annotations

import numpy as np

from .errors import ContractError, LabelError

__all__ = ["accuracy", "confusion", "weighted_f1", "weighted_f1_from_confusion"]


def _as_labels(predictions, targets):
    p = np.asarray(predictions)
    t = np.asarray(targets)
    if p.ndim != 1 or t.ndim != 1 or len(p) != len(t):
        raise ContractError(f"metrics: prediction/target lengths differ ({p.shape} vs {t.shape})")
    if len(p) < 1:
        raise ContractError("metrics: need at least one sample")
    return p.astype(np.int64), t.astype(np.int64)


def accuracy(predictions, targets) -> float:
    p, t = _as_labels(predictions, targets)
    return float(np.mean(p == t))


def confusion(predictions, targets, k: int) -> np.ndarray:
    """K x K count matrix; rows are the true class, columns the prediction."""
    p, t = _as_labels(predictions, targets)
    for arr, what in ((p, "prediction"), (t, "target")):
        if ((arr < 0) | (arr >= k)).any():
            bad = int(arr[(arr < 0) | (arr >= k)][0])
            raise LabelError(f"confusion: {what} label {bad} outside [0, {k})")
    mat = np.zeros((k, k), dtype=np.int64)
    np.add.at(mat, (t, p), 1)
    return mat


def weighted_f1_from_confusion(mat: np.ndarray) -> float:
    mat = np.asarray(mat)
    tp = np.diag(mat).astype(np.float64)
    fp = mat.sum(axis=0) - tp
    fn = mat.sum(axis=1) - tp
    # zero-division resolves to 0 by convention
    precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    recall = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    support = mat.sum(axis=1).astype(np.float64)
    total = support.sum()
    if total == 0:
        return 0.0
    return float((f1 * support).sum() / total)


def weighted_f1(predictions, targets, k: int) -> float:
    """Support-weighted mean of per-class F1 scores."""
    return weighted_f1_from_confusion(confusion(predictions, targets, k))
