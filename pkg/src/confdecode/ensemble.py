"""Averaging calibrated members into a predictive distribution with uncertainty scores."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import probcore
from .backbone import MemberModel
from .errors import InsufficientData, InvalidShape


@dataclass(frozen=True)
class EnsemblePrediction:
    mean_prob: np.ndarray
    predicted_class: int
    entropy: float
    mutual_info: float
    margin_u: float
    member_probs: np.ndarray | None = None


@dataclass
class PredictionSet:
    """Column-oriented predictions for N trials.

    ``member_probs`` has shape ``(M, N, C)`` and may be dropped to save memory.
    """

    mean_prob: np.ndarray
    predicted: np.ndarray
    entropy: np.ndarray
    mutual_info: np.ndarray
    margin_u: np.ndarray
    member_probs: np.ndarray | None = None

    def __len__(self) -> int:
        return self.mean_prob.shape[0]

    def __getitem__(self, i: int) -> EnsemblePrediction:
        return EnsemblePrediction(
            self.mean_prob[i], int(self.predicted[i]), float(self.entropy[i]),
            float(self.mutual_info[i]), float(self.margin_u[i]),
            None if self.member_probs is None else self.member_probs[:, i],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def score(self, kind: str) -> np.ndarray:
        return {"entropy": self.entropy, "margin": self.margin_u, "mutual_info": self.mutual_info}[kind]

    def subset(self, idx) -> "PredictionSet":
        idx = np.asarray(idx)
        return PredictionSet(self.mean_prob[idx], self.predicted[idx], self.entropy[idx],
                             self.mutual_info[idx], self.margin_u[idx],
                             None if self.member_probs is None else self.member_probs[:, idx])


def aggregate_batch(member_probs, keep_members: bool = True) -> PredictionSet:
    """Aggregate member probabilities of shape ``(M, N, C)``."""
    if not isinstance(member_probs, np.ndarray):
        if len(member_probs) == 0:
            raise InsufficientData("ensemble has no members")
        member_probs = probcore.stack_members(member_probs)
    if member_probs.ndim != 3:
        raise InvalidShape(f"expected (M, N, C) member probabilities, got {member_probs.shape}")
    if member_probs.shape[0] == 0:
        raise InsufficientData("ensemble has no members")
    member_probs = probcore.check_probs(member_probs, min_classes=2)
    mean = probcore.member_mean(member_probs)
    return PredictionSet(
        mean_prob=mean,
        # argmax returns the lowest index on ties
        predicted=np.argmax(mean, axis=-1),
        entropy=probcore.entropy(mean),
        mutual_info=probcore.mutual_information(member_probs),
        margin_u=probcore.margin_uncertainty(mean),
        member_probs=member_probs if keep_members else None,
    )


def aggregate(member_probs) -> EnsemblePrediction:
    """Aggregate the ``(M, C)`` member distributions for a single trial."""
    if len(member_probs) == 0:
        raise InsufficientData("ensemble has no members")
    stacked = probcore.stack_members(member_probs)
    if stacked.ndim != 2:
        raise InvalidShape(f"expected (M, C) member probabilities, got {stacked.shape}")
    return aggregate_batch(stacked[:, None, :])[0]


def member_probabilities(members: Sequence[MemberModel], trials: np.ndarray, use_temperature: bool = True) -> np.ndarray:
    if len(members) == 0:
        raise InsufficientData("ensemble has no members")
    if trials.ndim != 3:
        raise InvalidShape(f"expected trials of shape (N, C, T), got {trials.shape}")
    out = [m.predict_proba(trials) if use_temperature else probcore.softmax(m.logits(trials))
           for m in members]
    return np.stack(out)


def predict_set(members: Sequence[MemberModel], trials: np.ndarray, keep_members: bool = True) -> PredictionSet:
    """Forward every member, apply its temperature, aggregate. Output follows input order."""
    return aggregate_batch(member_probabilities(members, trials), keep_members=keep_members)


def write_predictions_jsonl(preds: PredictionSet, labels, path, trial_indices=None) -> None:
    labels = np.asarray(labels)
    if trial_indices is None:
        trial_indices = np.arange(len(preds))
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(preds)):
            row = {
                "trial_index": int(trial_indices[i]),
                "label": int(labels[i]),
                "predicted": int(preds.predicted[i]),
                "mean_prob": preds.mean_prob[i].tolist(),
                "entropy": float(preds.entropy[i]),
                "mi": float(preds.mutual_info[i]),
                "margin_u": float(preds.margin_u[i]),
            }
            fh.write(json.dumps(row) + "\n")
