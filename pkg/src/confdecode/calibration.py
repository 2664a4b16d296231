"""Post-hoc temperature scaling, fitted per member on the calibration split."""

from __future__ import annotations

import math

import numpy as np

from .errors import InsufficientData, InvalidShape
from .probcore import check_logits, log_softmax, softmax

T_MIN = 0.05
T_MAX = 20.0
LOG_T_TOL = 1e-4

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def temperature_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    """Mean cross-entropy of ``softmax(logits / temperature)`` against ``labels``."""
    logp = log_softmax(logits / temperature)
    return -float(np.mean(logp[np.arange(len(labels)), labels]))


def _check(logits, labels):
    logits = check_logits(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise InvalidShape(f"expected (N, C) logits, got {logits.shape}")
    if logits.shape[0] == 0:
        raise InsufficientData("calibration set is empty")
    if labels.shape != (logits.shape[0],):
        raise InvalidShape("need one label per logit vector")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise InvalidShape("labels out of range for the logit width")
    return logits, labels


def fit_temperature(logits, labels, t_min: float = T_MIN, t_max: float = T_MAX, tol: float = LOG_T_TOL) -> float:
    """Temperature in ``[t_min, t_max]`` minimizing calibration NLL.

    Golden-section search on ``log T`` (the objective is unimodal there).
    The bracket endpoints and ``T = 1`` are also scored, so a monotone
    objective lands exactly on a bound and the result never does worse
    than leaving the logits alone.
    """
    logits, labels = _check(logits, labels)

    def f(log_t):
        return temperature_nll(logits, labels, math.exp(log_t))

    a, b = math.log(t_min), math.log(t_max)
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)

    candidates = [(fc, math.exp(c)), (fd, math.exp(d))]
    candidates += [(temperature_nll(logits, labels, t), t) for t in (1.0, t_min, t_max)]
    _, best_t = min(candidates, key=lambda pair: pair[0])
    return float(best_t)


def apply_temperature(z, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return softmax(check_logits(z) / temperature)
