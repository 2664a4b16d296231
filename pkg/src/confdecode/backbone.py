"""Compact trial classifier used as the ensemble member.

The network is spatial filtering, squaring, mean pooling over equal temporal
windows, a log, and a dense softmax layer::

    u = F x            (S x T)
    w = pool(u ** 2)   (S x W)
    a = log(w + eps)
    z = D vec(a) + b   (K)

Gradients are derived by hand and checked against finite differences in the
test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import seeding
from .dataio import SplitAssignment, TrialSet
from .errors import FormatError, InsufficientData, InvalidConfig, InvalidShape, NumericalError, TrainingError
from .probcore import log_softmax, softmax


@dataclass
class BackboneParams:
    spatial_filter: np.ndarray  # (S, C)
    dense: np.ndarray  # (K, S * W)
    dense_bias: np.ndarray  # (K,)
    n_windows: int
    eps_log: float = 1e-6

    @property
    def n_filters(self) -> int:
        return self.spatial_filter.shape[0]

    @property
    def n_channels(self) -> int:
        return self.spatial_filter.shape[1]

    @property
    def n_classes(self) -> int:
        return self.dense.shape[0]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.spatial_filter, self.dense, self.dense_bias

    def copy(self) -> "BackboneParams":
        return replace(self, spatial_filter=self.spatial_filter.copy(), dense=self.dense.copy(),
                       dense_bias=self.dense_bias.copy())

    def check(self) -> None:
        S, C = self.spatial_filter.shape
        if self.n_windows < 1 or S < 1:
            raise InvalidShape("need at least one spatial filter and one pooling window")
        if self.dense.shape != (self.dense.shape[0], S * self.n_windows):
            raise InvalidShape(f"dense has shape {self.dense.shape}, expected (K, {S * self.n_windows})")
        if self.dense_bias.shape != (self.dense.shape[0],):
            raise InvalidShape("dense_bias must have one entry per class")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise NumericalError("non-finite backbone parameters")


def init_params(n_channels: int, n_classes: int, n_filters: int, n_windows: int,
                rng: np.random.Generator, eps_log: float = 1e-6) -> BackboneParams:
    F = rng.standard_normal((n_filters, n_channels)) / np.sqrt(n_channels)
    D = 0.01 * rng.standard_normal((n_classes, n_filters * n_windows))
    return BackboneParams(F, D, np.zeros(n_classes), int(n_windows), float(eps_log))


def _usable_length(n_samples: int, n_windows: int) -> int:
    if n_windows > n_samples:
        raise InvalidShape(f"{n_windows} pooling windows do not fit in {n_samples} samples")
    return (n_samples // n_windows) * n_windows


def _features(params: BackboneParams, X: np.ndarray):
    if X.ndim != 3 or X.shape[1] != params.n_channels:
        raise InvalidShape(f"expected trials of shape (B, {params.n_channels}, T), got {X.shape}")
    B = X.shape[0]
    S, W = params.n_filters, params.n_windows
    Tu = _usable_length(X.shape[2], W)
    X = np.asarray(X[:, :, :Tu], dtype=np.float64)
    u = np.einsum("sc,bct->bst", params.spatial_filter, X, optimize=True)
    w = (u * u).reshape(B, S, W, Tu // W).mean(axis=-1)
    a = np.log(w + params.eps_log)
    return X, u, w, a.reshape(B, S * W)


def forward_batch(params: BackboneParams, X: np.ndarray) -> np.ndarray:
    """Logits of shape ``(B, K)`` for trials ``X`` of shape ``(B, C, T)``."""
    _, _, _, f = _features(params, X)
    return f @ params.dense.T + params.dense_bias


def forward(params: BackboneParams, trial: np.ndarray) -> np.ndarray:
    trial = np.asarray(trial)
    if trial.ndim != 2:
        raise InvalidShape(f"a trial is (C, T), got {trial.shape}")
    return forward_batch(params, trial[None])[0]


def loss_and_grad(params: BackboneParams, batch: np.ndarray, labels) -> tuple[float, BackboneParams]:
    """Mean cross-entropy of ``batch`` and its exact gradient, shaped like ``params``."""
    labels = np.asarray(labels, dtype=np.int64)
    if batch.shape[0] == 0:
        raise InsufficientData("empty batch")
    if labels.shape != (batch.shape[0],):
        raise InvalidShape("need one label per trial")
    X, u, w, f = _features(params, batch)
    B, S, W = X.shape[0], params.n_filters, params.n_windows
    L = X.shape[2] // W
    logits = f @ params.dense.T + params.dense_bias
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits during training")
    logp = log_softmax(logits)
    nll = -float(np.mean(logp[np.arange(B), labels]))

    g = np.exp(logp)
    g[np.arange(B), labels] -= 1.0
    g /= B
    d_dense = g.T @ f
    d_bias = g.sum(axis=0)
    d_w = (g @ params.dense).reshape(B, S, W) / (w + params.eps_log)
    d_u = 2.0 * u * np.repeat(d_w / L, L, axis=2)
    d_filter = np.einsum("bst,bct->sc", d_u, X, optimize=True)
    grads = BackboneParams(d_filter, d_dense, d_bias, W, params.eps_log)
    if not (np.isfinite(nll) and all(np.all(np.isfinite(a)) for a in grads.arrays())):
        raise NumericalError("non-finite loss or gradient")
    return nll, grads


def predict_proba(params: BackboneParams, X: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return softmax(forward_batch(params, X) / temperature)


@dataclass
class TrainConfig:
    epochs_max: int = 200
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    patience: int = 10
    holdout_fraction: float = 0.2
    seed: int | None = None
    n_filters: int = 8
    n_windows: int = 4
    eps_log: float = 1e-6

    def validate(self) -> list[str]:
        errs = []
        if self.epochs_max < 1:
            errs.append("train.epochs_max must be >= 1")
        if self.batch_size < 1:
            errs.append("train.batch_size must be >= 1")
        if not self.learning_rate > 0:
            errs.append("train.learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            errs.append("train.momentum must be in [0, 1)")
        if self.patience < 1:
            errs.append("train.patience must be >= 1")
        if not 0 < self.holdout_fraction <= 0.5:
            errs.append("train.holdout_fraction must be in (0, 0.5]")
        if self.n_filters < 1:
            errs.append("train.n_filters must be >= 1")
        if self.n_windows < 1:
            errs.append("train.n_windows must be >= 1")
        if not self.eps_log > 0:
            errs.append("train.eps_log must be > 0")
        return errs


@dataclass
class DiversityConfig:
    bootstrap: bool = True
    channel_dropout_p: float = 0.1
    max_time_shift: int = 4
    time_mask_fraction: float = 0.1
    hyper_variants: list = field(default_factory=lambda: [[8, 4], [12, 4], [8, 8]])

    @classmethod
    def off(cls) -> "DiversityConfig":
        return cls(bootstrap=False, channel_dropout_p=0.0, max_time_shift=0,
                   time_mask_fraction=0.0, hyper_variants=[])

    def validate(self) -> list[str]:
        errs = []
        if not 0 <= self.channel_dropout_p < 1:
            errs.append("diversity.channel_dropout_p must be in [0, 1)")
        if self.max_time_shift < 0:
            errs.append("diversity.max_time_shift must be >= 0")
        if not 0 <= self.time_mask_fraction < 0.5:
            errs.append("diversity.time_mask_fraction must be in [0, 0.5)")
        for i, v in enumerate(self.hyper_variants):
            try:
                ok = len(v) == 2 and all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v)
            except TypeError:
                ok = False
            if not ok:
                errs.append(f"diversity.hyper_variants[{i}] must be a pair (S >= 1, W >= 1)")
        return errs

    def variant(self, member_index: int, default: tuple[int, int]) -> tuple[int, int]:
        if not self.hyper_variants:
            return default
        s, w = self.hyper_variants[member_index % len(self.hyper_variants)]
        return int(s), int(w)


def augment_batch(X: np.ndarray, cfg: DiversityConfig, rng: np.random.Generator) -> np.ndarray:
    """Channel dropout, circular time shift and a zeroed time span, drawn per trial."""
    X = np.array(X, dtype=np.float64, copy=True)
    B, C, T = X.shape
    if cfg.channel_dropout_p > 0:
        keep = rng.random((B, C)) >= cfg.channel_dropout_p
        X *= keep[:, :, None]
    if cfg.max_time_shift > 0:
        shifts = rng.integers(-cfg.max_time_shift, cfg.max_time_shift + 1, size=B)
        src = (np.arange(T)[None, :] - shifts[:, None]) % T
        X = np.take_along_axis(X, np.broadcast_to(src[:, None, :], X.shape), axis=2)
    span = int(round(cfg.time_mask_fraction * T))
    if span > 0:
        starts = rng.integers(0, T - span + 1, size=B)
        t = np.arange(T)[None, :]
        masked = (t >= starts[:, None]) & (t < starts[:, None] + span)
        X[np.broadcast_to(masked[:, None, :], X.shape)] = 0.0
    return X


def augment(trial: np.ndarray, cfg: DiversityConfig, rng: np.random.Generator) -> np.ndarray:
    return augment_batch(np.asarray(trial)[None], cfg, rng)[0]


def circular_shift(trial: np.ndarray, shift: int) -> np.ndarray:
    return np.roll(trial, shift, axis=-1)


def _holdout_blocks(ts: TrialSet, train_blocks, fraction: float, rng: np.random.Generator) -> set:
    block_label = ts.block_labels()
    by_class: dict[int, list[int]] = {}
    for b in sorted(train_blocks):
        by_class.setdefault(block_label[b], []).append(b)
    hold = set()
    for k in sorted(by_class):
        blocks = by_class[k]
        n = min(max(1, int(round(fraction * len(blocks)))), len(blocks) - 1)
        if n > 0:
            hold.update(np.asarray(blocks)[rng.permutation(len(blocks))[:n]].tolist())
    return hold


MAX_RESAMPLE_RETRIES = 5


def bootstrap_indices(fit_idx: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Resample ``fit_idx`` with replacement at the same size, redrawing if one class remains."""
    for _ in range(1 + MAX_RESAMPLE_RETRIES):
        sample = fit_idx[rng.integers(0, fit_idx.size, size=fit_idx.size)]
        if np.unique(labels[sample]).size >= 2:
            return sample
    raise TrainingError("bootstrap resample kept a single class after retries")


def train_member(ts: TrialSet, split: SplitAssignment, train_cfg: TrainConfig, div_cfg: DiversityConfig,
                 member_seed: int, member_index: int = 0, history: list | None = None) -> BackboneParams:
    """Fit one ensemble member on the training partition only.

    A block-atomic, class-stratified slice of the training blocks is held
    out for early stopping; the rest is optionally bootstrap-resampled. SGD
    with momentum runs until holdout NLL stops improving for ``patience``
    epochs, and the parameters from the best holdout epoch are returned
    (rounded to float32, the on-disk precision). When ``history`` is a list,
    the holdout NLL of every completed epoch is appended to it.
    """
    errs = train_cfg.validate() + div_cfg.validate()
    if errs:
        raise InvalidConfig(errs)
    if not split.train_blocks:
        raise InsufficientData("training partition is empty")

    def stream(purpose):
        return seeding.make_rng(member_seed, "member", 0, purpose)

    hold_blocks = _holdout_blocks(ts, split.train_blocks, train_cfg.holdout_fraction, stream("holdout"))
    if not hold_blocks:
        raise TrainingError("no training class has enough blocks for an early-stopping holdout")
    fit_idx = ts.indices_for_blocks(split.train_blocks - hold_blocks)
    hold_idx = ts.indices_for_blocks(hold_blocks)

    labels_all = ts.labels
    if div_cfg.bootstrap:
        sample = bootstrap_indices(fit_idx, labels_all, stream("bootstrap"))
    else:
        sample = fit_idx
        if np.unique(labels_all[sample]).size < 2:
            raise TrainingError("training data holds a single class")

    uniq, inverse = np.unique(sample, return_inverse=True)
    X_fit = ts.trials(uniq).astype(np.float64)[inverse]
    y_fit = labels_all[sample]
    X_hold = ts.trials(hold_idx).astype(np.float64)
    y_hold = labels_all[hold_idx]

    S, W = div_cfg.variant(member_index, (train_cfg.n_filters, train_cfg.n_windows))
    params = init_params(ts.n_channels, ts.n_classes, S, W, stream("init"), train_cfg.eps_log)
    velocity = [np.zeros_like(a) for a in params.arrays()]
    aug_rng, batch_rng = stream("augment"), stream("batch")

    def holdout_nll(p):
        logp = log_softmax(forward_batch(p, X_hold))
        return -float(np.mean(logp[np.arange(len(y_hold)), y_hold]))

    best_params, best_nll, waited = params.copy(), holdout_nll(params), 0
    n = X_fit.shape[0]
    for _epoch in range(train_cfg.epochs_max):
        X_epoch = augment_batch(X_fit, div_cfg, aug_rng)
        order = batch_rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            _, grads = loss_and_grad(params, X_epoch[idx], y_fit[idx])
            for p, v, g in zip(params.arrays(), velocity, grads.arrays()):
                v *= train_cfg.momentum
                v -= train_cfg.learning_rate * g
                p += v
        nll = holdout_nll(params)
        if not np.isfinite(nll):
            raise NumericalError("holdout NLL became non-finite")
        if history is not None:
            history.append(nll)
        if nll < best_nll:
            best_params, best_nll, waited = params.copy(), nll, 0
        else:
            waited += 1
            if waited >= train_cfg.patience:
                break

    for a in best_params.arrays():
        a[...] = a.astype(np.float32)
    return best_params


@dataclass
class MemberModel:
    """A trained backbone with its fitted temperature."""

    params: BackboneParams
    temperature: float = 1.0
    index: int = 0
    calibrated: bool = False
    member_seed: int | None = None

    def logits(self, X: np.ndarray) -> np.ndarray:
        return forward_batch(self.params, X)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return predict_proba(self.params, X, self.temperature)


MEMBER_MAGIC = b"CDMB"
_HEADER = struct.Struct("<4s4I")


def member_basename(index: int) -> str:
    return f"member_{index:03d}"


def save_member(member: MemberModel, directory) -> Path:
    """Write ``member_XXX.json`` (hyper-parameters, temperature) and ``member_XXX.f32``.

    The blob is a header (magic, S, C, W, K as little-endian uint32) followed
    by the spatial filter, dense weights and bias as little-endian float32.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p = member.params
    base = member_basename(member.index)
    header = _HEADER.pack(MEMBER_MAGIC, p.n_filters, p.n_channels, p.n_windows, p.n_classes)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in p.arrays())
    (directory / f"{base}.f32").write_bytes(header + body)
    meta = {
        "format": "confdecode.member",
        "version": 1,
        "index": member.index,
        "hyper": {"S": p.n_filters, "C": p.n_channels, "W": p.n_windows, "K": p.n_classes,
                  "eps_log": p.eps_log},
        "temperature": member.temperature,
        "calibrated": member.calibrated,
        "member_seed": member.member_seed,
        "params_file": f"{base}.f32",
    }
    path = directory / f"{base}.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_member(json_path) -> MemberModel:
    json_path = Path(json_path)
    try:
        meta = json.loads(json_path.read_text(encoding="utf-8"))
        hyper = meta["hyper"]
        S, C, W, K = (int(hyper[k]) for k in ("S", "C", "W", "K"))
        eps_log = float(hyper["eps_log"])
        blob_path = json_path.parent / meta["params_file"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed member file: {exc!r}", path=json_path) from exc
    blob = blob_path.read_bytes() if blob_path.exists() else None
    if blob is None:
        raise FormatError("member parameter blob not found", path=blob_path)
    if len(blob) < _HEADER.size:
        raise FormatError("member blob shorter than its header", offset=len(blob), path=blob_path)
    magic, *dims = _HEADER.unpack_from(blob)
    if magic != MEMBER_MAGIC:
        raise FormatError("bad member blob magic", offset=0, path=blob_path)
    if tuple(dims) != (S, C, W, K):
        raise FormatError(f"blob header {tuple(dims)} disagrees with JSON hyper {(S, C, W, K)}",
                          offset=4, path=blob_path)
    sizes = [S * C, K * S * W, K]
    expected = _HEADER.size + 4 * sum(sizes)
    if len(blob) != expected:
        raise FormatError(f"member blob has {len(blob)} bytes, expected {expected}",
                          offset=min(len(blob), expected), path=blob_path)
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    F, D, b = np.split(values, np.cumsum(sizes)[:-1])
    params = BackboneParams(F.reshape(S, C), D.reshape(K, S * W), b.copy(), W, eps_log)
    params.check()
    temperature = float(meta.get("temperature", 1.0))
    if not temperature > 0:
        raise FormatError("member temperature must be > 0", path=json_path)
    return MemberModel(params, temperature, int(meta.get("index", 0)), bool(meta.get("calibrated", False)),
                       meta.get("member_seed"))
