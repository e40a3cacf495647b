"""Pipeline configuration: a YAML file whose sections mirror the dataclasses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .models import ModelConfig
from .samples import RATIOS, SPLIT_MODES
from .training import TrainConfig


@dataclass(frozen=True)
class Paths:
    metadata_csv: str | None = None
    image_root: str | None = None
    work_dir: str = "work"


@dataclass(frozen=True)
class FilterConfig:
    min_records: int = 3


@dataclass(frozen=True)
class SplitConfig:
    seed: int = 0
    mode: str = "by_sample"
    ratios: tuple[float, float, float] = RATIOS


@dataclass(frozen=True)
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    filters: FilterConfig = field(default_factory=FilterConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval_dir: str | None = None

    def validate(self) -> None:
        if not math.isclose(sum(self.split.ratios), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split ratios must sum to 1, got {self.split.ratios}")
        if self.split.mode not in SPLIT_MODES:
            raise ConfigError(f"split mode must be one of {SPLIT_MODES}")
        if self.filters.min_records < 1:
            raise ConfigError("filters.min_records must be positive")
        self.model.validate()
        try:
            self.training.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def work_dir(self) -> Path:
        return Path(self.paths.work_dir)

    @property
    def evaluation_dir(self) -> Path:
        return Path(self.eval_dir) if self.eval_dir else self.work_dir / "reports"

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(
            self,
            split=replace(self.split, seed=seed),
            model=replace(self.model, seed=seed),
            training=replace(self.training, seed=seed),
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _section(cls, data: dict | None, name: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {unknown}")
    if "ratios" in data:
        data["ratios"] = tuple(float(r) for r in data["ratios"])
    return cls(**data)


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    data = dict(data or {})
    allowed = {"paths", "filters", "split", "model", "training", "eval_dir"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    cfg = PipelineConfig(
        paths=_section(Paths, data.get("paths"), "paths"),
        filters=_section(FilterConfig, data.get("filters"), "filters"),
        split=_section(SplitConfig, data.get("split"), "split"),
        model=_section(ModelConfig, data.get("model"), "model"),
        training=_section(TrainConfig, data.get("training"), "training"),
        eval_dir=data.get("eval_dir"),
    )
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as handle:
        data = yaml.safe_load(handle) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return config_from_dict(data)
