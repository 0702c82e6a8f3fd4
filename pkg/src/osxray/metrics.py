"""Classification and calibration metrics.

Precision/recall are macro-averaged over classes; F1 is the harmonic mean
of macro precision and macro recall. Calibration uses M equal-width,
right-closed bins over (0, 1] with confidence = max softmax probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """K x K counts; rows are true class, columns predicted."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"preds {preds.shape} and labels {labels.shape} differ in length")
    for arr, what in ((preds, "pred"), (labels, "label")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"{what} class out of range [0,{num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def prf1(cm: np.ndarray) -> dict:
    """Accuracy plus macro precision/recall and their harmonic-mean F1.

    A class with zero predicted (or true) positives contributes 0 to the
    corresponding macro average rather than raising.
    """
    total = cm.sum()
    if total == 0:
        raise ContractError("prf1: empty confusion matrix")
    k = cm.shape[0]
    diag = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0).astype(np.float64)
    true_pos = cm.sum(axis=1).astype(np.float64)
    precision_per = np.divide(diag, pred_pos, out=np.zeros(k), where=pred_pos > 0)
    recall_per = np.divide(diag, true_pos, out=np.zeros(k), where=true_pos > 0)
    precision = float(precision_per.mean())
    recall = float(recall_per.mean())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {
        "accuracy": float(diag.sum() / total),
        "precision": precision,
        "recall": recall,
        "f1": float(f1),
    }


def _bin_index(confidences: np.ndarray, num_bins: int) -> np.ndarray:
    # Right-closed bins ((m-1)/M, m/M]; confidence 0 lands in the first bin.
    idx = np.ceil(confidences * num_bins).astype(np.int64) - 1
    return np.clip(idx, 0, num_bins - 1)


@dataclass
class CalibrationReport:
    ece: float
    oe: float
    brier: float
    num_bins: int
    bin_counts: list
    bin_acc: list
    bin_conf: list

    def to_dict(self) -> dict:
        return {
            "ece": self.ece, "oe": self.oe, "brier": self.brier,
            "num_bins": self.num_bins, "bin_counts": self.bin_counts,
            "bin_acc": self.bin_acc, "bin_conf": self.bin_conf,
        }


def _bin_stats(confidences, correctness, num_bins):
    confidences = np.asarray(confidences, dtype=np.float64)
    correctness = np.asarray(correctness, dtype=np.float64)
    idx = _bin_index(confidences, num_bins)
    counts = np.bincount(idx, minlength=num_bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=confidences, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=correctness, minlength=num_bins)
    nonzero = counts > 0
    conf = np.divide(conf_sum, counts, out=np.zeros(num_bins), where=nonzero)
    acc = np.divide(acc_sum, counts, out=np.zeros(num_bins), where=nonzero)
    return counts, acc, conf


def ece(confidences, correctness, num_bins: int = 10) -> float:
    """Expected calibration error: sum_m (|B_m|/N) |acc(B_m) - conf(B_m)|."""
    n = len(np.asarray(confidences))
    counts, acc, conf = _bin_stats(confidences, correctness, num_bins)
    return float((counts / n * np.abs(acc - conf)).sum())


def oe(confidences, correctness, num_bins: int = 10) -> float:
    """Overconfidence error: sum_m (|B_m|/N) conf(B_m) max(conf - acc, 0)."""
    n = len(np.asarray(confidences))
    counts, acc, conf = _bin_stats(confidences, correctness, num_bins)
    return float((counts / n * conf * np.maximum(conf - acc, 0.0)).sum())


def brier(probs, labels) -> float:
    """Mean over samples of the squared distance between the probability
    row and the one-hot label."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = probs.shape
    if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-5:
        raise ContractError("brier: probability rows must sum to 1 within 1e-5")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return float(((probs - onehot) ** 2).sum(axis=1).mean())


def calibration_report(probs, labels, num_bins: int = 10) -> CalibrationReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    confidences = probs.max(axis=1)
    correctness = (probs.argmax(axis=1) == labels).astype(np.float64)
    counts, acc, conf = _bin_stats(confidences, correctness, num_bins)
    return CalibrationReport(
        ece=ece(confidences, correctness, num_bins),
        oe=oe(confidences, correctness, num_bins),
        brier=brier(probs, labels),
        num_bins=num_bins,
        bin_counts=[int(c) for c in counts],
        bin_acc=[float(a) for a in acc],
        bin_conf=[float(c) for c in conf],
    )


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: list
    calibration: CalibrationReport

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1,
            "confusion": self.confusion,
            "calibration": self.calibration.to_dict(),
        }


def evaluate_predictions(probs, labels, num_classes: int, num_bins: int = 10) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    preds = probs.argmax(axis=1)
    cm = confusion_matrix(preds, labels, num_classes)
    scores = prf1(cm)
    return MetricsReport(
        accuracy=scores["accuracy"], precision=scores["precision"],
        recall=scores["recall"], f1=scores["f1"],
        confusion=cm.tolist(),
        calibration=calibration_report(probs, labels, num_bins),
    )


def aggregate_metrics(reports) -> dict:
    """Mean and sample standard deviation of each scalar metric across folds."""
    keys = ("accuracy", "precision", "recall", "f1")
    out = {}
    for key in keys:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key + "_mean"] = float(vals.mean())
        out[key + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    for key in ("ece", "oe", "brier"):
        vals = np.array([getattr(r.calibration, key) for r in reports], dtype=np.float64)
        out[key + "_mean"] = float(vals.mean())
        out[key + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out
