"""Numerically stable probability primitives.

Every function accepts a single vector or a batch with classes on the last
axis. Batched calls return one value per leading index. Logarithms are
natural, so entropies are in nats.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidLogits, InvalidProbability, InvalidShape

SIMPLEX_TOL = 1e-9


def check_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 1:
        raise InvalidShape(f"logits need a class axis, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidLogits("logits contain NaN or Inf")
    return z


def check_probs(p, min_classes: int = 1) -> np.ndarray:
    """Validate that ``p`` lies on the simplex (to 1e-9) and return it as float64.

    Never renormalizes.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0:
        raise InvalidShape("probability vector must have a class axis")
    if p.shape[-1] < min_classes:
        raise InvalidShape(f"need at least {min_classes} classes, got {p.shape[-1]}")
    if not np.all(np.isfinite(p)):
        raise InvalidProbability("probabilities contain NaN or Inf")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise InvalidProbability("probabilities must lie in [0, 1]")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > SIMPLEX_TOL):
        worst = float(np.max(np.abs(s - 1.0)))
        raise InvalidProbability(f"probabilities do not sum to 1 (max deviation {worst:.3g})")
    return p


def logsumexp(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    zmax = np.max(z, axis=axis, keepdims=True)
    out = zmax + np.log(np.sum(np.exp(z - zmax), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(z) -> np.ndarray:
    z = check_logits(z)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    z = check_logits(z)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _entropy_unchecked(p: np.ndarray) -> np.ndarray:
    # 0 * log 0 is taken as 0
    safe = np.where(p > 0.0, p, 1.0)
    return -np.sum(p * np.log(safe), axis=-1)


def entropy(p) -> np.ndarray | float:
    """Shannon entropy in nats, in ``[0, ln C]``."""
    p = check_probs(p)
    h = _entropy_unchecked(p)
    return float(h) if np.ndim(h) == 0 else h


def margin_uncertainty(p) -> np.ndarray | float:
    """``1 - (top1 - top2)``; ties give 1 regardless of index order."""
    p = check_probs(p, min_classes=2)
    top2 = np.sort(p, axis=-1)[..., -2:]
    u = 1.0 - (top2[..., 1] - top2[..., 0])
    u = np.clip(u, 0.0, 1.0)
    return float(u) if np.ndim(u) == 0 else u


def member_mean(member_probs: np.ndarray) -> np.ndarray:
    """Arithmetic mean over axis 0, independent of member order.

    Values are sorted along the member axis before summation so that any
    permutation of the members produces bit-identical output.
    """
    m = member_probs.shape[0]
    return np.sort(member_probs, axis=0).sum(axis=0) / m


def mutual_information(members) -> np.ndarray | float:
    """Entropy of the mean minus the mean member entropy.

    ``members`` has shape ``(M, C)`` for one input or ``(M, N, C)`` for a batch.
    """
    if isinstance(members, np.ndarray):
        members = members.astype(np.float64, copy=False)
    else:
        members = stack_members(members)
    if members.ndim < 2:
        raise InvalidShape(f"expected (M, C) or (M, N, C) member probabilities, got {members.shape}")
    if members.shape[0] < 1:
        raise InvalidShape("need at least one member")
    members = check_probs(members)
    mean = member_mean(members)
    member_h = np.sort(_entropy_unchecked(members), axis=0).sum(axis=0) / members.shape[0]
    mi = _entropy_unchecked(mean) - member_h
    # agreeing members carry no disagreement; avoid last-ulp residue from the mean
    mi = np.where(np.all(members == members[0], axis=(0, -1)), 0.0, mi)
    return float(mi) if np.ndim(mi) == 0 else mi


def stack_members(member_probs) -> np.ndarray:
    """Stack a list of equally shaped probability arrays, raising InvalidShape on mismatch."""
    arrays = [np.asarray(p, dtype=np.float64) for p in member_probs]
    if not arrays:
        raise InvalidShape("no member probabilities given")
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise InvalidShape(f"member {i} has shape {a.shape}, expected {shape}")
    return np.stack(arrays)
