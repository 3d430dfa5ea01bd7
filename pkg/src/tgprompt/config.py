"""Experiment configuration: one TOML file per experiment, CLI flags on top."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .finetune import FinetuneConfig
from .model import ModelConfig
from .pretrain import PretrainConfig
from .protocol import SyntheticSpec


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    path: str | None = None
    has_header: bool = True
    d_E: int | None = None
    label_column_present: bool = True
    zero_feat_width: int = 0
    node_feat_width: int | None = None


@dataclass
class ScenarioConfig:
    sparse_threshold: int | None = None
    endpoint_rule: str = "both"
    sparse_mode: str = "keep_sparse"
    pretrain_ratio: float = 0.8

    def __post_init__(self):
        if self.sparse_threshold is not None and self.sparse_threshold < 1:
            raise ValueError("scenario.sparse_threshold must be >= 1")
        if self.endpoint_rule not in ("both", "either"):
            raise ValueError("scenario.endpoint_rule must be 'both' or 'either'")
        if self.sparse_mode not in ("keep_sparse", "drop_sparse"):
            raise ValueError("scenario.sparse_mode must be 'keep_sparse' or 'drop_sparse'")
        if not 0 < self.pretrain_ratio < 1:
            raise ValueError("scenario.pretrain_ratio must lie in (0, 1)")


@dataclass
class SweepConfig:
    alpha: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    beta: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    gamma: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def seeds(self) -> list[int]:
        return list(self.finetune.seeds)


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _section(name: str, cls, values) -> object:
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected a table, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
    defaults = cls()
    for key, val in values.items():
        default = getattr(defaults, key)
        if isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"{name}.{key}: expected true/false, got {val!r}")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{name}.{key}: expected a number, got {val!r}")
            if isinstance(default, int) and not isinstance(val, int):
                raise ConfigError(f"{name}.{key}: expected an integer, got {val!r}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def from_dict(raw: dict) -> RunConfig:
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown section (expected one of {sorted(SECTIONS)})")
    parts = {}
    for name, factory in SECTIONS.items():
        cls = type(factory())
        parts[name] = _section(name, cls, raw.get(name, {}))
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: {path}: {exc}") from None
    return from_dict(raw)


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Copy of ``cfg`` with fields of one section replaced (``None`` values ignored)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    merged = {**asdict(getattr(cfg, section)), **values}
    cls = type(getattr(cfg, section))
    return dataclasses.replace(cfg, **{section: _section(section, cls, merged)})
