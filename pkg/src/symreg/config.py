"""Run configuration: built-in defaults, a strict TOML config file, flags.

Precedence is defaults < config file < explicit command-line flags; the
resolved configuration is echoed into every run manifest. Unknown keys in
the config file are rejected (a typo must fail the run, not silently fall
back to a default).
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from typing import Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import DatasetConfig
from .errors import UsageError
from .training import TrainConfig


@dataclass
class ModelSettings:
    embed_dim: int = 512
    num_heads: int = 8
    num_layers: int = 8
    ff_dim: int = 2048
    dropout: float = 0.15


@dataclass
class ScheduleSettings:
    num_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class FitSettings:
    bound_lo: float = -10.0
    bound_hi: float = 10.0
    de_iterations: int = 100
    lbfgs_max_iters: int = 200


@dataclass
class EvalSettings:
    num_steps: Optional[int] = None   # reverse steps at sampling (None = all)
    limit: Optional[int] = None
    generation_batch: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0  # 0 leaves the torch default
    dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig())
    model: ModelSettings = field(default_factory=ModelSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    training: TrainConfig = field(default_factory=TrainConfig)
    fitting: FitSettings = field(default_factory=FitSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TUPLE_FIELDS = {"split", "x_range", "const_range"}


def _apply_section(obj, section: dict, path: str) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in section.items():
        if key not in names:
            raise UsageError(f"unknown config key {path}{key}")
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        setattr(obj, key, value)


def load_config(path: Optional[str] = None) -> RunConfig:
    """Build a RunConfig from defaults plus an optional TOML file."""
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc
    sections = {
        "dataset": cfg.dataset,
        "model": cfg.model,
        "schedule": cfg.schedule,
        "training": cfg.training,
        "fitting": cfg.fitting,
        "eval": cfg.eval,
    }
    for key, value in data.items():
        if key in ("seed", "threads"):
            setattr(cfg, key, int(value))
        elif key in sections:
            if not isinstance(value, dict):
                raise UsageError(f"config section [{key}] must be a table")
            _apply_section(sections[key], value, f"{key}.")
        else:
            raise UsageError(f"unknown config key {key}")
    # re-run dataclass validation on the merged dataset section
    cfg.dataset = DatasetConfig(**dataclasses.asdict(cfg.dataset))
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-path overrides (from flags); None values are skipped."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        parts = dotted.split(".")
        target = cfg
        for p in parts[:-1]:
            target = getattr(target, p)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise UsageError(f"unknown config path {dotted}")
        if leaf in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        setattr(target, leaf, value)
    cfg.dataset = DatasetConfig(**dataclasses.asdict(cfg.dataset))
    return cfg
