"""Coverage-targeted abstention: thresholds, decisions, risk-coverage curves and AURC.

Conventions worth knowing:

* acceptance is inclusive, ``u(x) <= tau``;
* accuracy on an empty accepted set is 1.0 (risk 0), since abstaining on
  everything commits no errors;
* AURC integrates risk over the *target* coverage grid with the trapezoid
  rule, extending the curve to coverage 0 with the risk at the smallest grid
  point.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import InsufficientData, InvalidConfig, InvalidCurve, InvalidShape, UnknownOperatingPoint

SCORE_KINDS = ("entropy", "margin", "mutual_info")
SCORE_ALIASES = {"mi": "mutual_info", "h": "entropy"}

_ALPHA_ATOL = 1e-9


def default_grid() -> list[float]:
    return [round(0.05 * k, 10) for k in range(1, 21)]


def normalize_score_kind(kind: str) -> str:
    kind = SCORE_ALIASES.get(kind, kind)
    if kind not in SCORE_KINDS:
        raise InvalidConfig(f"unknown score kind {kind!r}; choose from {SCORE_KINDS + tuple(SCORE_ALIASES)}")
    return kind


def check_grid(grid: Iterable[float]) -> list[float]:
    grid = [float(a) for a in grid]
    if not grid:
        raise InvalidConfig("coverage grid is empty")
    bad = [a for a in grid if not 0.0 < a <= 1.0]
    if bad:
        raise InvalidConfig(f"coverage levels must lie in (0, 1]: {bad}")
    return grid


def _scores(preds, kind: str) -> np.ndarray:
    if hasattr(preds, "score"):
        return np.asarray(preds.score(kind), dtype=np.float64)
    return np.asarray(preds, dtype=np.float64)


@dataclass
class SelectivePolicy:
    score_kind: str
    alphas: list[float]
    thresholds: list[float]

    def __post_init__(self):
        if len(self.alphas) != len(self.thresholds):
            raise InvalidShape("one threshold per coverage level")

    def _position(self, alpha: float) -> int:
        for i, a in enumerate(self.alphas):
            if abs(a - alpha) <= _ALPHA_ATOL:
                return i
        raise UnknownOperatingPoint(f"coverage {alpha} is not on the policy grid")

    def threshold(self, alpha: float) -> float:
        return self.thresholds[self._position(alpha)]

    def accept_mask(self, scores: np.ndarray, alpha: float) -> np.ndarray:
        return np.asarray(scores) <= self.threshold(alpha)

    def to_dict(self) -> dict:
        return {"score_kind": self.score_kind,
                "thresholds": [{"alpha": a, "tau": t} for a, t in zip(self.alphas, self.thresholds)]}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectivePolicy":
        rows = d["thresholds"]
        return cls(normalize_score_kind(d["score_kind"]), [float(r["alpha"]) for r in rows],
                   [float(r["tau"]) for r in rows])


def required_count(alpha: float, n: int) -> int:
    """Smallest ``k`` with ``k / n >= alpha``."""
    k = max(1, math.ceil(alpha * n))
    while k > 1 and (k - 1) / n >= alpha:
        k -= 1
    while k < n and k / n < alpha:
        k += 1
    return k


def fit_thresholds(cal_scores, grid=None, score_kind: str = "entropy") -> SelectivePolicy:
    """Per coverage level, the smallest observed calibration score reaching that coverage.

    ``tau(alpha)`` is the ``ceil(alpha * N)``-th smallest score. With tied
    scores the realized calibration coverage may exceed ``alpha``.
    """
    scores = np.sort(np.asarray(cal_scores, dtype=np.float64).ravel())
    if scores.size == 0:
        raise InsufficientData("no calibration scores")
    if not np.all(np.isfinite(scores)):
        raise InvalidShape("calibration scores must be finite")
    grid = check_grid(default_grid() if grid is None else grid)
    n = scores.size
    taus = [float(scores[required_count(a, n) - 1]) for a in grid]
    return SelectivePolicy(normalize_score_kind(score_kind), grid, taus)


@dataclass(frozen=True)
class Decision:
    accepted: bool
    predicted_class: int | None = None

    def __bool__(self):
        return self.accepted


ABSTAIN = Decision(False, None)


def decide(pred, policy: SelectivePolicy, alpha: float) -> Decision:
    """Accept with the predicted class iff the prediction's score is at most ``tau(alpha)``."""
    tau = policy.threshold(alpha)
    score = {"entropy": pred.entropy, "margin": pred.margin_u, "mutual_info": pred.mutual_info}[policy.score_kind]
    if score <= tau:
        return Decision(True, int(pred.predicted_class))
    return ABSTAIN


@dataclass(frozen=True)
class CurvePoint:
    alpha: float
    achieved_coverage: float
    accuracy: float
    risk: float
    n_accepted: int


@dataclass
class CoverageCurve:
    points: list[CurvePoint] = field(default_factory=list)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([p.alpha for p in self.points])

    @property
    def risks(self) -> np.ndarray:
        return np.array([p.risk for p in self.points])

    def point(self, alpha: float) -> CurvePoint:
        for p in self.points:
            if abs(p.alpha - alpha) <= _ALPHA_ATOL:
                return p
        raise UnknownOperatingPoint(f"coverage {alpha} is not on the curve grid")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "achieved_coverage", "accuracy", "risk", "n_accepted"])
        for p in self.points:
            w.writerow([repr(p.alpha), repr(p.achieved_coverage), repr(p.accuracy), repr(p.risk), p.n_accepted])
        return buf.getvalue()


def selective_accuracy(correct: np.ndarray, accepted: np.ndarray) -> float:
    n = int(accepted.sum())
    if n == 0:
        return 1.0
    return float(correct[accepted].sum()) / n


def coverage_curve(preds, labels, policy: SelectivePolicy, grid=None) -> CoverageCurve:
    """One point per grid level, evaluated with the policy's thresholds."""
    labels = np.asarray(labels)
    scores = _scores(preds, policy.score_kind)
    predicted = np.asarray(preds.predicted)
    if scores.shape != labels.shape or predicted.shape != labels.shape:
        raise InvalidShape("predictions and labels differ in length")
    grid = policy.alphas if grid is None else check_grid(grid)
    correct = predicted == labels
    n = labels.size
    points = []
    for a in grid:
        accepted = policy.accept_mask(scores, a)
        n_acc = int(accepted.sum())
        acc = selective_accuracy(correct, accepted)
        points.append(CurvePoint(float(a), n_acc / n if n else 0.0, acc, 1.0 - acc, n_acc))
    return CoverageCurve(points)


def aurc(curve: CoverageCurve) -> float:
    """Trapezoidal area under risk versus target coverage, from 0 to the last grid point."""
    if not curve.points:
        raise InvalidCurve("curve has no points")
    alphas = curve.alphas
    if np.any(np.diff(alphas) <= 0):
        raise InvalidCurve("curve coverage levels must be strictly increasing")
    risks = curve.risks
    x = np.concatenate(([0.0], alphas))
    y = np.concatenate(([risks[0]], risks))
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


DEFAULT_RISK_ALPHAS = (0.5, 0.7, 1.0)
DEFAULT_TARGET_RISKS = (0.25, 0.15)


def operating_points(curve: CoverageCurve, target_risks=DEFAULT_TARGET_RISKS, alphas=DEFAULT_RISK_ALPHAS) -> dict:
    """Risk at fixed coverage levels and the best achieved coverage under risk ceilings."""
    risk_at = {}
    for a in alphas:
        risk_at[_key(a)] = curve.point(a).risk
    cov_at = {}
    for rho in target_risks:
        feasible = [p.achieved_coverage for p in curve.points if p.risk <= rho]
        cov_at[_key(rho)] = max(feasible) if feasible else 0.0
    return {"risk_at_coverage": risk_at, "coverage_at_target_risk": cov_at}


def _key(x: float) -> str:
    return f"{x:g}"


def policy_json(policy: SelectivePolicy) -> str:
    return json.dumps(policy.to_dict(), indent=2, sort_keys=True) + "\n"
