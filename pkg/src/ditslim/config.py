"""Pipeline configuration: one JSON document, strict keys, dotted overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

from .distill import LossWeights, TrainConfig
from .errors import ConfigError, ContractError
from .model import DiTConfig
from .router import RoutingConfig


@dataclass
class CalibrationConfig:
    n_samples: int = 16
    n_bins: int = 5


@dataclass
class PruningConfig:
    sa_ratio: float = 0.3
    ca_ratio: float = 0.3
    ffn_ratio: float = 0.3
    min_heads: int = 2
    temporal_boost: float = 1.5
    spatial_threshold: float = 0.7
    temporal_threshold: float = 0.3
    similarity_threshold: float = 0.95
    align_unit: int = 8


@dataclass
class CostConfig:
    s_orig: float = 50.0
    s_distill: float = 50.0
    cfg_multiplier: float = 1.0


@dataclass
class TeacherConfig:
    steps: int = 300
    warmup: int = 30
    lr: float = 2e-3
    batch_size: int = 2
    seed: int = 11


@dataclass
class PipelineConfig:
    mode: str = "t2v"
    model: DiTConfig = field(default_factory=DiTConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    weights: LossWeights | None = None

    def __post_init__(self):
        if self.mode not in ("t2v", "i2v"):
            raise ConfigError(f"mode must be t2v or i2v, got {self.mode!r}")
        if self.weights is None:
            # temporal term weighted heavier for t2v
            temporal = 8.0 if self.mode == "t2v" else 4.0
            self.weights = LossWeights(temporal=temporal)
        self._validate()

    def _validate(self) -> None:
        """Check every section against its owning module's contracts before
        any stage runs."""
        if not 2 <= self.routing.min_blocks <= self.routing.max_blocks <= self.model.n_blocks:
            raise ConfigError(
                f"routing bounds {self.routing.min_blocks}..{self.routing.max_blocks} invalid for {self.model.n_blocks} blocks"
            )
        p = self.pruning
        for name, ratio in (("sa_ratio", p.sa_ratio), ("ca_ratio", p.ca_ratio), ("ffn_ratio", p.ffn_ratio)):
            if not 0.0 <= ratio < 1.0:
                raise ConfigError(f"pruning.{name} must be in [0, 1), got {ratio}")
        if not 0.0 <= p.temporal_threshold < p.spatial_threshold <= 1.0:
            raise ConfigError(
                f"need 0 <= temporal_threshold < spatial_threshold <= 1, got {p.temporal_threshold}/{p.spatial_threshold}"
            )
        if p.temporal_boost < 1.0:
            raise ConfigError(f"pruning.temporal_boost must be >= 1, got {p.temporal_boost}")
        if not 0.0 < p.similarity_threshold <= 1.0:
            raise ConfigError(f"pruning.similarity_threshold must be in (0, 1], got {p.similarity_threshold}")
        if p.align_unit < 1 or p.min_heads < 1:
            raise ConfigError("pruning.align_unit and pruning.min_heads must be >= 1")
        if self.calibration.n_samples < 1 or not 1 <= self.calibration.n_bins <= self.model.t_max:
            raise ConfigError("calibration needs n_samples >= 1 and 1 <= n_bins <= t_max")
        for label, section in (("training", self.training), ("teacher", self.teacher)):
            steps = section.steps
            warmup = section.warmup
            if steps < 1 or warmup < 0 or warmup >= steps:
                raise ConfigError(f"{label}: need steps >= 1 and warmup < steps, got {warmup}/{steps}")
            if section.batch_size < 1:
                raise ConfigError(f"{label}.batch_size must be >= 1")
        if min(self.cost.s_orig, self.cost.s_distill) <= 0:
            raise ConfigError("cost.s_orig and cost.s_distill must be positive")
        if self.cost.cfg_multiplier not in (1.0, 2.0):
            raise ConfigError(f"cost.cfg_multiplier must be 1 or 2, got {self.cost.cfg_multiplier}")

    def resolved(self) -> dict:
        return asdict(self)

    def echo(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.resolved(), indent=2, sort_keys=True))


_SECTION_TYPES = {
    "model": DiTConfig,
    "calibration": CalibrationConfig,
    "pruning": PruningConfig,
    "routing": RoutingConfig,
    "training": TrainConfig,
    "teacher": TeacherConfig,
    "cost": CostConfig,
    "weights": LossWeights,
}


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys under {path!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"bad section {path!r}: {exc}") from None


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        return PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def apply_overrides(cfg: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply key=value overrides with dotted paths, re-validating the result."""
    data = cfg.resolved()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        node = data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"override path {dotted!r} does not exist")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"override path {dotted!r} does not exist")
        node[leaf] = json.loads(raw) if _looks_jsonish(raw) else raw
    return config_from_dict(data)


def _looks_jsonish(raw: str) -> bool:
    try:
        json.loads(raw)
        return True
    except json.JSONDecodeError:
        return False
