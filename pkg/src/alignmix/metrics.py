"""Classifier evaluation metrics: top-1 error, calibration, OOD detection.

Every metric here is a pure function of prediction records or score sets.
AuROC integrates the ROC curve with the trapezoid rule over score-tie groups
(equivalent to pairwise concordance counting with half credit for ties);
AuPR uses step-wise precision-recall summation, again with ties collapsed
into groups. Detection accuracy is balanced across the two distributions:
scores at or above the threshold count as in-distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PredictionRecord:
    """One classifier output: a probability vector plus the ground truth."""

    probabilities: np.ndarray
    true_label: int
    confidence: float
    correct: bool

    @classmethod
    def from_probabilities(cls, probabilities: np.ndarray, true_label: int) -> "PredictionRecord":
        p = np.asarray(probabilities, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError("probabilities must be a vector")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must be a simplex vector (sum 1 within 1e-6)")
        predicted = int(np.argmax(p))  # ties break to the lowest index
        return cls(probabilities=p, true_label=int(true_label),
                   confidence=float(p.max()), correct=predicted == int(true_label))


def records_from_probabilities(probs: np.ndarray, labels: np.ndarray) -> list[PredictionRecord]:
    return [PredictionRecord.from_probabilities(p, y) for p, y in zip(probs, labels)]


def error_from_probabilities(probs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 error in percent straight from a probability matrix."""
    probs = np.asarray(probs)
    if probs.shape[0] == 0:
        raise ValueError("no predictions to score")
    predicted = np.argmax(probs, axis=1)
    return 100.0 * float(np.mean(predicted != np.asarray(labels)))


def top1_error(records: list[PredictionRecord]) -> float:
    """Percentage of records whose argmax prediction misses the true label."""
    if not records:
        raise ValueError("no predictions to score")
    wrong = sum(1 for r in records if not r.correct)
    return 100.0 * wrong / len(records)


@dataclass(frozen=True)
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_confidence: float
    accuracy: float


def reliability_bins(records: list[PredictionRecord], num_bins: int = 15) -> list[ReliabilityBin]:
    """Equal-width confidence bins over [0, 1]; confidence 1.0 lands in the last bin."""
    if not records:
        raise ValueError("no predictions to bin")
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    conf = np.array([r.confidence for r in records])
    correct = np.array([r.correct for r in records])
    idx = np.minimum((conf * num_bins).astype(int), num_bins - 1)
    bins = []
    for b in range(num_bins):
        mask = idx == b
        n = int(mask.sum())
        bins.append(ReliabilityBin(
            lo=b / num_bins,
            hi=(b + 1) / num_bins,
            count=n,
            mean_confidence=float(conf[mask].mean()) if n else 0.0,
            accuracy=float(correct[mask].mean()) if n else 0.0,
        ))
    return bins


def ece(records: list[PredictionRecord], num_bins: int = 15) -> float:
    """Expected calibration error: sum_b (n_b/N) * |accuracy_b - confidence_b|."""
    bins = reliability_bins(records, num_bins)
    total = len(records)
    return float(sum(b.count / total * abs(b.accuracy - b.mean_confidence) for b in bins))


@dataclass(frozen=True)
class OODScoreSet:
    """Max-softmax confidences on in-distribution and OOD test examples."""

    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        for name, s in (("id_scores", self.id_scores), ("ood_scores", self.ood_scores)):
            s = np.asarray(s)
            if s.size == 0:
                raise ValueError(f"{name} is empty")
            if (s < 0).any() or (s > 1).any():
                raise ValueError(f"{name} must lie in [0, 1]")


def detection_accuracy(scores: OODScoreSet, threshold: float = 0.5) -> float:
    """Balanced accuracy: scores >= threshold count as ID, below as OOD."""
    id_s = np.asarray(scores.id_scores, dtype=np.float64)
    ood_s = np.asarray(scores.ood_scores, dtype=np.float64)
    return 0.5 * (float(np.mean(id_s >= threshold)) + float(np.mean(ood_s < threshold)))


def _threshold_counts(pos: np.ndarray, neg: np.ndarray):
    """True/false positive counts when thresholding at each unique score (descending)."""
    pos = np.sort(np.asarray(pos, dtype=np.float64))
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    cuts = np.unique(np.concatenate([pos, neg]))[::-1]
    tp = pos.size - np.searchsorted(pos, cuts, side="left")
    fp = neg.size - np.searchsorted(neg, cuts, side="left")
    return tp.astype(np.float64), fp.astype(np.float64), pos.size, neg.size


def auroc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Area under the ROC curve; higher scores rank as more positive.

    Trapezoidal integration over tie groups, so tied scores earn half credit,
    matching the pairwise-concordance definition.
    """
    tp, fp, n_pos, n_neg = _threshold_counts(pos, neg)
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return float((0.5 * (tpr[1:] + tpr[:-1]) * np.diff(fpr)).sum())


def aupr(pos: np.ndarray, neg: np.ndarray) -> float:
    """Area under precision-recall: step-wise sum over descending score groups."""
    tp, fp, n_pos, _ = _threshold_counts(pos, neg)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * precision).sum())


def ood_metrics(scores: OODScoreSet, threshold: float = 0.5) -> dict:
    """Detection accuracy at the threshold, AuROC, and both AuPR orientations."""
    id_s = np.asarray(scores.id_scores, dtype=np.float64)
    ood_s = np.asarray(scores.ood_scores, dtype=np.float64)
    return {
        "det_acc": detection_accuracy(scores, threshold),
        "auroc": auroc(id_s, ood_s),
        "aupr_id": aupr(id_s, ood_s),
        "aupr_ood": aupr(-ood_s, -id_s),
        "threshold": float(threshold),
    }
