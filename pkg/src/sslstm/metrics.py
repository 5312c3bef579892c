"""Sample-wise classification metrics."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import EvaluationError, ShapeError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C); rows are true classes, columns predictions

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pred, true, valid=None, n_classes: int | None = None) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ShapeError(f"{pred.shape[0]} predictions vs {true.shape[0]} labels")
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != pred.shape:
        raise ShapeError(f"valid mask length {valid.shape} vs {pred.shape}")
    if n_classes is None:
        n_classes = int(max(pred.max(initial=0), true.max(initial=0))) + 1
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true[valid], pred[valid]), 1)
    return ConfusionMatrix(counts)


def per_class_prf(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall and F1 per class plus a mask of classes present in truth or prediction.

    Undefined precision or recall (zero denominator) gives F1 = 0.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        denom = precision + recall
        f1 = np.where((predicted > 0) & (actual > 0) & (denom > 0), 2 * precision * recall / denom, 0.0)
    present = (predicted > 0) | (actual > 0)
    return precision, recall, f1, present


def mean_f1(cm: ConfusionMatrix, exclude_null: bool = False, null_class: int | None = 0) -> float:
    """Macro F1 over classes that occur in truth or prediction.

    Computed in exact rational arithmetic from the integer counts and rounded
    once, so the result does not depend on summation order.
    """
    counts = cm.counts
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    keep = (tp + fp + fn) > 0
    if exclude_null and null_class is not None:
        keep[null_class] = False
    if cm.total == 0 or not keep.any():
        raise EvaluationError("no classes to average")
    # F1 = 2tp / (2tp + fp + fn), which is 0 when tp == 0
    f1 = [Fraction(2 * int(tp[c]), 2 * int(tp[c]) + int(fp[c]) + int(fn[c])) for c in np.flatnonzero(keep)]
    return float(sum(f1) / len(f1))


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EvaluationError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def sensitivity_at_specificity(scores, labels, target_spec: float = 0.9) -> tuple[float, float]:
    """Best sensitivity over thresholds whose specificity reaches ``target_spec``.

    Candidate thresholds are the distinct scores plus ``+inf``; a sample is
    positive when ``score >= threshold``. Ties in sensitivity go to the higher
    threshold. Returns ``(sensitivity, threshold)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.shape} scores vs {labels.shape} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("sensitivity at fixed specificity needs both classes")
    thresholds = np.concatenate([np.unique(scores), [np.inf]])
    pos_sorted = np.sort(scores[labels])
    neg_sorted = np.sort(scores[~labels])
    # number of samples with score >= threshold
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, thresholds, side="left")
    sens = tp / n_pos
    spec = (n_neg - fp) / n_neg
    ok = np.flatnonzero(spec >= target_spec)
    # +inf always qualifies, so ok is never empty
    best = ok[sens[ok] == sens[ok].max()].max()
    return float(sens[best]), float(thresholds[best])


def specificity_at(scores, labels, threshold: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    neg = ~labels
    return float(np.sum(scores[neg] < threshold) / neg.sum())


def metrics_report(
    pred: np.ndarray,
    true: np.ndarray,
    valid: np.ndarray,
    class_names: Sequence[str],
    null_class: int | None = 0,
    positive_scores: np.ndarray | None = None,
    target_spec: float = 0.9,
) -> dict:
    """Everything the CLI writes to a metrics JSON."""
    cm = confusion(pred, true, valid, len(class_names))
    p, r, f1, present = per_class_prf(cm)
    report = {
        "n_samples": cm.total,
        "accuracy": accuracy(cm),
        "mean_f1": mean_f1(cm),
        "mean_f1_excl_null": mean_f1(cm, exclude_null=True, null_class=null_class)
        if null_class is not None and present[[i for i in range(len(class_names)) if i != null_class]].any()
        else None,
        "per_class": {
            name: {"precision": float(p[i]), "recall": float(r[i]), "f1": float(f1[i]), "support": int(cm.counts[i].sum())}
            for i, name in enumerate(class_names)
        },
        "confusion": cm.counts.tolist(),
    }
    if positive_scores is not None:
        v = np.asarray(valid, dtype=bool)
        labels = np.asarray(true)[v] == 1
        sens, thr = sensitivity_at_specificity(np.asarray(positive_scores)[v], labels, target_spec)
        report["binary"] = {
            "sensitivity": sens,
            "specificity": specificity_at(np.asarray(positive_scores)[v], labels, thr),
            "threshold": thr if np.isfinite(thr) else "inf",
            "target_specificity": target_spec,
        }
    return report
