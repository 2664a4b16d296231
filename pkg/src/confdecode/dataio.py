"""Trial datasets: synthesis, on-disk format, normalization and block splits.

On disk a trial set is a directory holding ``manifest.json`` (geometry,
class names, per-trial labels and block ids) and ``trials.f32`` (raw
little-endian float32, row-major ``[N][C][T]``).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InsufficientData, InvalidConfig, InvalidShape

MANIFEST_NAME = "manifest.json"
DATA_NAME = "trials.f32"
FORMAT_TAG = "confdecode.trialset"
FORMAT_VERSION = 1
STD_FLOOR = 1e-8

COMMAND_NAMES = (
    "rest", "ambulance", "clock", "hello", "help me", "light", "pain",
    "stop", "thank you", "toilet", "TV", "water", "yes",
)

_U64 = (1 << 64) - 1


def default_class_names(n_classes: int) -> list[str]:
    if n_classes == len(COMMAND_NAMES):
        return list(COMMAND_NAMES)
    return ["rest"] + [f"class_{k}" for k in range(1, n_classes)]


@dataclass(frozen=True, eq=False)
class TrialSet:
    """Labelled multi-channel trials grouped into contiguous same-class blocks.

    ``data`` is float32 with shape ``(N, C, T)`` and is made read-only on
    construction.
    """

    data: np.ndarray
    labels: np.ndarray
    block_ids: np.ndarray
    class_names: tuple
    sample_rate_hz: float
    block_size: int

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        blocks = np.asarray(self.block_ids, dtype=np.int64)
        if data.ndim != 3:
            raise InvalidShape(f"trial data must be (N, C, T), got {data.shape}")
        if labels.shape != (data.shape[0],) or blocks.shape != (data.shape[0],):
            raise InvalidShape("labels and block_ids need one entry per trial")
        for arr in (data, labels, blocks):
            arr.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "block_ids", blocks)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        object.__setattr__(self, "block_size", int(self.block_size))

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def trials(self, indices) -> np.ndarray:
        """Return the trials at ``indices``. All model code reads data through here."""
        return self.data[np.asarray(indices, dtype=np.int64)]

    def block_labels(self) -> dict[int, int]:
        out = {}
        for b, y in zip(self.block_ids.tolist(), self.labels.tolist()):
            out.setdefault(b, y)
        return out

    def indices_for_blocks(self, blocks) -> np.ndarray:
        blocks = np.fromiter(sorted(blocks), dtype=np.int64)
        return np.flatnonzero(np.isin(self.block_ids, blocks))

    def with_data(self, data: np.ndarray) -> "TrialSet":
        return TrialSet(data, self.labels, self.block_ids, self.class_names,
                        self.sample_rate_hz, self.block_size)


@dataclass
class SynthConfig:
    n_classes: int = 13
    n_channels: int = 64
    n_samples: int = 1000
    blocks_per_class: int = 25
    block_size: int = 4
    snr: float = 0.1
    seed: int = 0
    sample_rate_hz: float = 500.0

    @classmethod
    def desk(cls, **overrides) -> "SynthConfig":
        """Small geometry for fast runs: 8 channels, 2 s at 64 Hz."""
        base = dict(n_channels=8, n_samples=128, sample_rate_hz=64.0, snr=0.06)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> list[str]:
        errs = []
        if self.n_classes < 2:
            errs.append("synth.n_classes must be >= 2")
        if self.n_channels < 1:
            errs.append("synth.n_channels must be >= 1")
        if self.n_samples < 8:
            errs.append("synth.n_samples must be >= 8")
        if self.blocks_per_class < 1:
            errs.append("synth.blocks_per_class must be >= 1")
        if self.block_size < 1:
            errs.append("synth.block_size must be >= 1")
        if not (self.snr >= 0.0 and math.isfinite(self.snr)):
            errs.append("synth.snr must be finite and >= 0")
        if not self.sample_rate_hz > 0:
            errs.append("synth.sample_rate_hz must be > 0")
        if not isinstance(self.seed, int):
            errs.append("synth.seed must be an integer")
        return errs


def class_frequency(k: int) -> float:
    return 4.0 + k


def generate_synthetic(cfg: SynthConfig) -> TrialSet:
    """Seeded synthetic trial set.

    Class ``k >= 1`` adds a sinusoid at ``4 + k`` Hz projected onto a fixed
    random unit spatial vector, with a random phase per trial. Class 0 (rest)
    is noise only. Each template is scaled so its mean power over channels and
    samples equals ``snr`` times the unit white-noise power.
    """
    errs = cfg.validate()
    if errs:
        raise InvalidConfig(errs)
    K, C, T = cfg.n_classes, cfg.n_channels, cfg.n_samples
    bs, bpc = cfg.block_size, cfg.blocks_per_class
    rng = np.random.default_rng(int(cfg.seed) & _U64)

    spatial = rng.standard_normal((K, C))
    spatial /= np.linalg.norm(spatial, axis=1, keepdims=True)
    spatial[0] = 0.0

    n_blocks = K * bpc
    block_class = rng.permutation(n_blocks) // bpc
    t = np.arange(T) / cfg.sample_rate_hz

    data = np.empty((n_blocks * bs, C, T), dtype=np.float32)
    labels = np.repeat(block_class, bs)
    block_ids = np.repeat(np.arange(n_blocks), bs)
    for b in range(n_blocks):
        k = int(block_class[b])
        noise = rng.standard_normal((bs, C, T))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=bs)
        if k > 0 and cfg.snr > 0:
            wave = np.sin(2.0 * np.pi * class_frequency(k) * t[None, :] + phases[:, None])
            template = spatial[k][None, :, None] * wave[:, None, :]
            power = np.mean(template**2, axis=(1, 2), keepdims=True)
            noise += template * np.sqrt(cfg.snr / power)
        data[b * bs:(b + 1) * bs] = noise
    return TrialSet(data, labels, block_ids, default_class_names(K), cfg.sample_rate_hz, bs)


@dataclass(frozen=True)
class SplitAssignment:
    train_blocks: frozenset
    cal_blocks: frozenset
    test_blocks: frozenset

    def indices(self, ts: TrialSet, part: str) -> np.ndarray:
        return ts.indices_for_blocks(getattr(self, f"{part}_blocks"))

    def to_dict(self) -> dict:
        return {f"{p}_blocks": sorted(int(b) for b in getattr(self, f"{p}_blocks"))
                for p in ("train", "cal", "test")}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        try:
            parts = {k: frozenset(int(b) for b in d[k]) for k in ("train_blocks", "cal_blocks", "test_blocks")}
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed split assignment: {exc!r}") from exc
        out = cls(**parts)
        if out.train_blocks & out.cal_blocks or out.train_blocks & out.test_blocks or out.cal_blocks & out.test_blocks:
            raise FormatError("split partitions overlap")
        return out


def block_stratified_split(ts: TrialSet, train_blocks_per_class: int, cal_blocks_per_class: int,
                           seed: int) -> SplitAssignment:
    """Assign whole blocks to train/cal/test, the same counts for every class.

    Each class's blocks are permuted with ``seed``; the first
    ``train_blocks_per_class`` go to train, the next ``cal_blocks_per_class``
    to calibration, and the rest (at least one) to test.
    """
    if train_blocks_per_class < 1 or cal_blocks_per_class < 0:
        raise InvalidConfig("train_blocks_per_class must be >= 1 and cal_blocks_per_class >= 0")
    rng = np.random.default_rng(int(seed) & _U64)
    per_class: dict[int, list[int]] = {}
    for b, y in sorted(ts.block_labels().items()):
        per_class.setdefault(y, []).append(b)
    need = train_blocks_per_class + cal_blocks_per_class + 1
    short = {k: len(v) for k, v in per_class.items() if len(v) < need}
    if short:
        raise InsufficientData(f"classes {sorted(short)} have fewer than {need} blocks "
                               f"(train + cal + at least one test block)")
    train, cal, test = set(), set(), set()
    for k in sorted(per_class):
        blocks = np.asarray(per_class[k])[rng.permutation(len(per_class[k]))].tolist()
        train.update(blocks[:train_blocks_per_class])
        cal.update(blocks[train_blocks_per_class:train_blocks_per_class + cal_blocks_per_class])
        test.update(blocks[train_blocks_per_class + cal_blocks_per_class:])
    return SplitAssignment(frozenset(train), frozenset(cal), frozenset(test))


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        try:
            mean = np.asarray(d["mean"], dtype=np.float64)
            std = np.asarray(d["std"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed channel stats: {exc!r}") from exc
        if mean.shape != std.shape or mean.ndim != 1 or np.any(std <= 0):
            raise FormatError("channel stats need equal-length mean/std with std > 0")
        return cls(mean, std)


_CHUNK = 256


def fit_channel_stats(ts: TrialSet, train) -> ChannelStats:
    """Per-channel mean and population std pooled over training trials and samples."""
    idx = ts.indices_for_blocks(train)
    if idx.size == 0:
        raise InsufficientData("no training trials to fit channel statistics")
    count = idx.size * ts.n_samples
    total = np.zeros(ts.n_channels)
    for start in range(0, idx.size, _CHUNK):
        total += ts.trials(idx[start:start + _CHUNK]).astype(np.float64).sum(axis=(0, 2))
    mean = total / count
    sq = np.zeros(ts.n_channels)
    for start in range(0, idx.size, _CHUNK):
        x = ts.trials(idx[start:start + _CHUNK]).astype(np.float64) - mean[None, :, None]
        sq += (x * x).sum(axis=(0, 2))
    std = np.maximum(np.sqrt(sq / count), STD_FLOOR)
    return ChannelStats(mean, std)


def apply_zscore(ts: TrialSet, stats: ChannelStats) -> TrialSet:
    if stats.mean.shape != (ts.n_channels,):
        raise InvalidShape(f"stats cover {stats.mean.shape[0]} channels, trials have {ts.n_channels}")
    out = np.empty_like(ts.data)
    mean = stats.mean[None, :, None]
    std = stats.std[None, :, None]
    for start in range(0, ts.n_trials, _CHUNK):
        out[start:start + _CHUNK] = (ts.data[start:start + _CHUNK].astype(np.float64) - mean) / std
    return ts.with_data(out)


def write_trialset(ts: TrialSet, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "K": ts.n_classes,
        "C": ts.n_channels,
        "T": ts.n_samples,
        "N": ts.n_trials,
        "block_size": ts.block_size,
        "sample_rate_hz": ts.sample_rate_hz,
        "dtype": "<f4",
        "data_file": DATA_NAME,
        "class_names": list(ts.class_names),
        "labels": ts.labels.tolist(),
        "block_ids": ts.block_ids.tolist(),
    }
    tmp = path / (DATA_NAME + ".tmp")
    ts.data.astype("<f4", copy=False).tofile(tmp)
    os.replace(tmp, path / DATA_NAME)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def _key_offset(raw: bytes, key: str):
    pos = raw.find(json.dumps(key).encode("utf-8"))
    return pos if pos >= 0 else None


def read_trialset(path) -> TrialSet:
    path = Path(path)
    mpath, dpath = path / MANIFEST_NAME, path / DATA_NAME
    try:
        raw = mpath.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError("manifest not found", path=mpath) from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("manifest is not valid UTF-8", offset=exc.start, path=mpath) from exc
    try:
        m = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}",
                          offset=len(text[:exc.pos].encode("utf-8")), path=mpath) from exc
    if not isinstance(m, dict):
        raise FormatError("manifest must be a JSON object", offset=0, path=mpath)

    def fail(msg, key=None):
        raise FormatError(msg, offset=_key_offset(raw, key) if key else None, path=mpath)

    for key in ("K", "C", "T", "N", "block_size"):
        v = m.get(key)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            fail(f"manifest field {key!r} must be a positive integer", key if key in m else None)
    if m.get("dtype", "<f4") != "<f4":
        fail(f"unsupported dtype {m.get('dtype')!r}", "dtype")
    K, C, T, N, bs = m["K"], m["C"], m["T"], m["N"], m["block_size"]
    rate = m.get("sample_rate_hz")
    if not isinstance(rate, (int, float)) or isinstance(rate, bool) or not rate > 0:
        fail("manifest field 'sample_rate_hz' must be a positive number", "sample_rate_hz")
    names = m.get("class_names")
    if not isinstance(names, list) or len(names) != K or not all(isinstance(s, str) for s in names):
        fail(f"class_names must list exactly K={K} strings", "class_names" if "class_names" in m else None)
    for key in ("labels", "block_ids"):
        arr = m.get(key)
        if not isinstance(arr, list) or len(arr) != N or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in arr):
            fail(f"{key} must list N={N} integers", key if key in m else None)
    labels = np.asarray(m["labels"], dtype=np.int64)
    blocks = np.asarray(m["block_ids"], dtype=np.int64)
    if labels.min() < 0 or labels.max() != K - 1:
        fail(f"manifest K={K} disagrees with label range [{labels.min()}, {labels.max()}]", "labels")
    if N % bs:
        fail(f"N={N} is not a multiple of block_size={bs}", "block_size")
    _, first, counts = np.unique(blocks, return_index=True, return_counts=True)
    if np.any(counts != bs):
        fail(f"every block must hold exactly block_size={bs} trials", "block_ids")
    for b, i in zip(np.unique(blocks), first):
        if np.any(labels[blocks == b] != labels[i]):
            fail(f"block {int(b)} mixes labels", "block_ids")

    expected = N * C * T * 4
    try:
        size = dpath.stat().st_size
    except FileNotFoundError as exc:
        raise FormatError("trial data file not found", path=dpath) from exc
    if size < expected:
        raise FormatError(f"truncated trial data: expected {expected} bytes, data ends early",
                          offset=size, path=dpath)
    if size > expected:
        raise FormatError(f"trial data has {size - expected} trailing bytes", offset=expected, path=dpath)
    data = np.fromfile(dpath, dtype="<f4", count=N * C * T).reshape(N, C, T).astype(np.float32)
    return TrialSet(data, labels, blocks, names, float(rate), bs)
