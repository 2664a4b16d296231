"""Probabilistic-quality metrics computed from ensemble-mean probabilities.

Functions accept either a :class:`~confdecode.ensemble.PredictionSet` or a
plain ``(N, C)`` probability array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidShape
from .selective import SelectivePolicy

DEFAULT_BINS = 15
PROB_FLOOR = 1e-12


def _probs(preds) -> np.ndarray:
    p = np.asarray(getattr(preds, "mean_prob", preds), dtype=np.float64)
    if p.ndim != 2:
        raise InvalidShape(f"expected (N, C) probabilities, got {p.shape}")
    return p


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise InvalidShape(f"expected {n} labels, got shape {y.shape}")
    return y


@dataclass
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray  # mean confidence per bin, 0 for empty bins
    accuracy: np.ndarray  # empirical accuracy per bin, 0 for empty bins

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(),
                "confidence": self.confidence.tolist(), "accuracy": self.accuracy.tolist()}


def reliability_bins(preds, labels, n_bins: int = DEFAULT_BINS) -> ReliabilityBins:
    """Equal-width confidence bins ``[k/B, (k+1)/B)``, the last one closed at 1."""
    p = _probs(preds)
    y = _labels(labels, p.shape[0])
    conf = p.max(axis=1)
    correct = (np.argmax(p, axis=1) == y).astype(np.float64)
    edges = np.arange(n_bins + 1) / n_bins
    which = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    conf_sum = np.bincount(which, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(which, weights=correct, minlength=n_bins)
    nz = np.maximum(counts, 1)
    return ReliabilityBins(edges, counts, np.where(counts > 0, conf_sum / nz, 0.0),
                           np.where(counts > 0, acc_sum / nz, 0.0))


def ece(preds, labels, n_bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error, as a fraction; confidence is the top mean probability."""
    bins = reliability_bins(preds, labels, n_bins)
    n = bins.counts.sum()
    return float(np.sum(bins.counts / n * np.abs(bins.accuracy - bins.confidence)))


def nll(preds, labels) -> float:
    p = _probs(preds)
    y = _labels(labels, p.shape[0])
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(y)), y], PROB_FLOOR))))


def brier(preds, labels) -> float:
    p = _probs(preds)
    y = _labels(labels, p.shape[0])
    diff = p.copy()
    diff[np.arange(len(y)), y] -= 1.0
    return float(np.mean(np.sum(diff * diff, axis=1)))


def accuracy(preds, labels) -> float:
    p = _probs(preds)
    y = _labels(labels, p.shape[0])
    return float(np.mean(np.argmax(p, axis=1) == y))


@dataclass
class ClassAcceptance:
    class_index: int
    count: int
    n_accepted: int
    acceptance: float | None  # None when the class has no trials
    accuracy: float  # 1.0 when nothing of this class was accepted

    @property
    def absent(self) -> bool:
        return self.count == 0

    def to_dict(self) -> dict:
        return {"class_index": self.class_index, "count": self.count, "n_accepted": self.n_accepted,
                "acceptance": self.acceptance, "accuracy": self.accuracy, "absent": self.absent}


def per_class_acceptance(preds, labels, policy: SelectivePolicy, alpha: float,
                         n_classes: int | None = None) -> list[ClassAcceptance]:
    """Acceptance rate and accepted-subset accuracy for each true class."""
    p = _probs(preds)
    y = _labels(labels, p.shape[0])
    accepted = policy.accept_mask(np.asarray(preds.score(policy.score_kind)), alpha)
    predicted = np.asarray(preds.predicted)
    K = p.shape[1] if n_classes is None else n_classes
    rows = []
    for k in range(K):
        mine = y == k
        count = int(mine.sum())
        acc_mask = mine & accepted
        n_acc = int(acc_mask.sum())
        acc = float((predicted[acc_mask] == k).sum()) / n_acc if n_acc else 1.0
        rows.append(ClassAcceptance(k, count, n_acc, n_acc / count if count else None, acc))
    return rows


def confusion(preds, labels, accepted=None, n_classes: int | None = None) -> np.ndarray:
    """Counts with rows = true class and columns = predicted class.

    Pass a boolean ``accepted`` mask to restrict the tally to accepted trials.
    """
    if hasattr(preds, "predicted"):
        predicted = np.asarray(preds.predicted, dtype=np.int64)
    else:
        predicted = np.argmax(_probs(preds), axis=1)
    y = _labels(labels, predicted.shape[0])
    K = n_classes if n_classes is not None else _probs(preds).shape[1]
    if accepted is not None:
        accepted = np.asarray(accepted, dtype=bool)
        predicted, y = predicted[accepted], y[accepted]
    return np.bincount(y * K + predicted, minlength=K * K).reshape(K, K)
