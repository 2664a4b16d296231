"""Run configuration: nested dataclasses loaded from JSON.

Loading never stops at the first problem; every unknown key, bad type and
out-of-range value is collected and raised together as ``InvalidConfig``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import seeding
from .backbone import DiversityConfig, TrainConfig
from .dataio import SynthConfig
from .errors import InvalidConfig
from .selective import SCORE_ALIASES, SCORE_KINDS, default_grid


@dataclass
class SplitConfig:
    train_blocks_per_class: int = 20
    cal_blocks_per_class: int = 2
    seed: int | None = None

    def validate(self) -> list[str]:
        errs = []
        if self.train_blocks_per_class < 1:
            errs.append("split.train_blocks_per_class must be >= 1")
        if self.cal_blocks_per_class < 1:
            errs.append("split.cal_blocks_per_class must be >= 1 (temperatures and thresholds need calibration data)")
        return errs


@dataclass
class EnsembleConfig:
    M: int = 8

    def validate(self) -> list[str]:
        return [] if self.M >= 1 else ["ensemble.M must be >= 1"]


@dataclass
class SelectiveConfig:
    score_kind: str = "entropy"
    grid: list = field(default_factory=default_grid)

    def validate(self) -> list[str]:
        errs = []
        if SCORE_ALIASES.get(self.score_kind, self.score_kind) not in SCORE_KINDS:
            errs.append(f"selective.score_kind must be one of {list(SCORE_KINDS)}")
        if not self.grid:
            errs.append("selective.grid must not be empty")
        elif any(not isinstance(a, (int, float)) or not 0 < a <= 1 for a in self.grid):
            errs.append("selective.grid values must lie in (0, 1]")
        elif any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            errs.append("selective.grid must be strictly increasing")
        return errs


@dataclass
class MetricsConfig:
    ece_bins: int = 15

    def validate(self) -> list[str]:
        return [] if self.ece_bins >= 1 else ["metrics.ece_bins must be >= 1"]


def _desk_synth() -> SynthConfig:
    return SynthConfig.desk(seed=None)


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=_desk_synth)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    selective: SelectiveConfig = field(default_factory=SelectiveConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "run"
    master_seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        synth_errs = self.synth.validate() if self.synth.seed is not None else dataclasses.replace(
            self.synth, seed=0).validate()
        errs += synth_errs
        for part in (self.split, self.train, self.diversity, self.ensemble, self.selective, self.metrics):
            errs += part.validate()
        if self.split.train_blocks_per_class + self.split.cal_blocks_per_class >= self.synth.blocks_per_class:
            errs.append("split.train_blocks_per_class + split.cal_blocks_per_class must leave at least "
                        "one test block per class (< synth.blocks_per_class)")
        if not isinstance(self.master_seed, int) or not 0 <= self.master_seed < 2**64:
            errs.append("master_seed must be an unsigned 64-bit integer")
        return errs

    def check(self) -> "RunConfig":
        errs = self.validate()
        if errs:
            raise InvalidConfig(errs)
        return self

    def resolved_synth(self) -> SynthConfig:
        if self.synth.seed is not None:
            return self.synth
        return dataclasses.replace(self.synth, seed=seeding.derive_seed(self.master_seed, "synth"))

    def split_seed(self) -> int:
        if self.split.seed is not None:
            return self.split.seed
        return seeding.derive_seed(self.master_seed, "split")

    def member_seed(self, member: int) -> int:
        base = self.train.seed if self.train.seed is not None else self.master_seed
        return seeding.derive_seed(base, "train", member)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        errs: list[str] = []
        if not isinstance(d, dict):
            raise InvalidConfig("config must be a JSON object")
        kwargs: dict[str, Any] = {}
        sections = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in d.items():
            if key not in sections:
                errs.append(f"unknown config key '{key}'")
                continue
            default = getattr(cls(), key)
            if dataclasses.is_dataclass(default):
                kwargs[key] = _load_section(type(default), default, value, key, errs)
            else:
                kwargs[key] = _coerce(value, default, key, errs)
        cfg = cls(**kwargs)
        # ill-typed values were replaced by defaults above, so range checks are safe to run too
        errs += cfg.validate()
        if errs:
            raise InvalidConfig(errs)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise InvalidConfig(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def override(self, dotted: str, value) -> None:
        """Set ``section.field`` (or a top-level field) from a CLI string or value."""
        parts = dotted.split(".")
        target = self
        for p in parts[:-1]:
            if not hasattr(target, p) or not dataclasses.is_dataclass(getattr(target, p)):
                raise InvalidConfig(f"unknown config path {dotted!r}")
            target = getattr(target, p)
        name = parts[-1]
        if not dataclasses.is_dataclass(target) or name not in {f.name for f in dataclasses.fields(target)}:
            raise InvalidConfig(f"unknown config path {dotted!r}")
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        errs: list[str] = []
        coerced = _coerce(value, getattr(target, name), dotted, errs)
        if errs:
            raise InvalidConfig(errs)
        setattr(target, name, coerced)


def _load_section(klass, default, value, prefix: str, errs: list[str]):
    if not isinstance(value, dict):
        errs.append(f"{prefix} must be an object")
        return default
    names = {f.name for f in dataclasses.fields(klass)}
    kwargs = {}
    for key, v in value.items():
        if key not in names:
            errs.append(f"unknown config key '{prefix}.{key}'")
            continue
        kwargs[key] = _coerce(v, getattr(default, key), f"{prefix}.{key}", errs)
    return dataclasses.replace(default, **kwargs)


def _coerce(value, default, path: str, errs: list[str]):
    """Check ``value`` against the type of ``default``; ``None`` defaults accept ints or null."""
    if default is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        errs.append(f"{path} must be an integer or null")
        return default
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        errs.append(f"{path} must be true or false")
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        errs.append(f"{path} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        errs.append(f"{path} must be a number")
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
        errs.append(f"{path} must be a string")
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
        errs.append(f"{path} must be a list")
    else:
        return value
    return default
