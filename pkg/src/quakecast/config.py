"""Run configuration: one JSON document, overridable from the command line."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .catalog import RegionFilter, parse_time
from .features import FeatureSpec
from .models import KINDS, PATTERNS, TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class RegionConfig:
    lat_min: float = 32.0
    lat_max: float = 36.0
    lon_min: float = -120.0
    lon_max: float = -114.0
    t_start: str = "1986-01-01T00:00:00Z"
    t_end: str = "2024-05-01T00:00:00Z"

    def to_filter(self) -> RegionFilter:
        return RegionFilter(
            self.lat_min, self.lat_max, self.lon_min, self.lon_max, parse_time(self.t_start), parse_time(self.t_end)
        )


@dataclass
class ModelConfig:
    name: str
    kind: str
    gat_layers: int = 1
    hidden: int = 32
    gat_width: int = 32
    residual: bool = True
    pattern: str | None = None
    streams: list[str] = field(default_factory=list)


@dataclass
class NowcastConfig:
    mag_threshold: float = 3.29
    large_mag: float = 6.0
    horizon_months: int = 36
    spans: list[int] = field(default_factory=lambda: [6, 12, 18, 24, 36, 48, 60])
    weights: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    train_fraction: float = 0.8


def _default_models():
    return [
        ModelConfig("persistence", "persistence"),
        ModelConfig("mean", "mean"),
        ModelConfig("lstm", "lstm"),
        ModelConfig("gnncoder-1", "gnncoder", gat_layers=1),
    ]


@dataclass
class RunConfig:
    catalog: str | None = None
    out: str = "runs/default"
    region: RegionConfig = field(default_factory=RegionConfig)
    cell_size: float = 0.1
    period_days: int = 14
    active_bins: int = 500
    epsilon: float = 0.15
    lookback: int = 52
    features: FeatureSpec = field(default_factory=FeatureSpec)
    split_fraction: float = 0.8
    normalize_train_only: bool = False
    models: list[ModelConfig] = field(default_factory=_default_models)
    train: TrainConfig = field(default_factory=TrainConfig)
    nowcast: NowcastConfig = field(default_factory=NowcastConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"]["multiplicity_windows"] = list(self.features.multiplicity_windows)
        d["features"]["ema_spans"] = list(self.features.ema_spans)
        return d

    def digest(self) -> str:
        """Hash of everything that shapes results; the output location is excluded."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def model(self, name: str) -> ModelConfig:
        for m in self.models:
            if m.name == name:
                return m
        raise ConfigError([f"no model named {name!r} in config (have {[m.name for m in self.models]})"])

    def validate(self, require_catalog: bool = False) -> None:
        problems = []
        if require_catalog:
            if not self.catalog:
                problems.append("catalog: path is required")
            elif not Path(self.catalog).is_file():
                problems.append(f"catalog: file not found: {self.catalog}")
        try:
            self.region.to_filter()
        except ValueError as exc:
            problems.append(f"region: {exc}")
        if self.cell_size <= 0:
            problems.append("cell_size must be positive")
        if self.period_days < 1:
            problems.append("period_days must be >= 1")
        if self.active_bins < 1:
            problems.append("active_bins must be >= 1")
        if self.epsilon <= 0:
            problems.append("epsilon must be positive")
        if self.lookback < 1:
            problems.append("lookback must be >= 1")
        if not 0.0 < self.split_fraction < 1.0:
            problems.append("split_fraction must lie in (0, 1)")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            problems.append("model names must be unique")
        for m in self.models:
            if m.kind not in KINDS:
                problems.append(f"model {m.name}: unknown kind {m.kind!r}")
            if m.kind == "multifoundation" and m.pattern not in PATTERNS:
                problems.append(f"model {m.name}: pattern must be one of {PATTERNS}")
            if m.kind in ("gnncoder", "multifoundation") and m.gat_layers not in (1, 2, 3):
                problems.append(f"model {m.name}: gat_layers must be 1, 2 or 3")
            for s in m.streams:
                if not Path(s).is_file():
                    problems.append(f"model {m.name}: stream file not found: {s}")
        if self.train.epochs < 0:
            problems.append("train.epochs must be >= 0")
        if self.train.lr <= 0:
            problems.append("train.lr must be positive")
        if not self.nowcast.spans or not self.nowcast.weights:
            problems.append("nowcast: spans and weights must be non-empty")
        if any(not 0.0 <= w <= 1.0 for w in self.nowcast.weights):
            problems.append("nowcast: weights must lie in [0, 1]")
        if problems:
            raise ConfigError(problems)


def _build(cls, data: dict, where: str, problems: list):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        problems.append(f"{where}: unknown keys {unknown}")
    return {k: v for k, v in data.items() if k in known}


def config_from_dict(data: dict) -> RunConfig:
    problems: list[str] = []
    top = _build(RunConfig, data, "config", problems)
    try:
        if "region" in top:
            top["region"] = RegionConfig(**_build(RegionConfig, top["region"], "region", problems))
        if "features" in top:
            top["features"] = FeatureSpec(**_build(FeatureSpec, top["features"], "features", problems))
        if "models" in top:
            top["models"] = [ModelConfig(**_build(ModelConfig, m, "models[]", problems)) for m in top["models"]]
        if "train" in top:
            top["train"] = TrainConfig(**_build(TrainConfig, top["train"], "train", problems))
        if "nowcast" in top:
            top["nowcast"] = NowcastConfig(**_build(NowcastConfig, top["nowcast"], "nowcast", problems))
        cfg = RunConfig(**top)
    except (TypeError, ValueError) as exc:
        problems.append(str(exc))
        cfg = None
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    cfg = config_from_dict(data)
    # relative paths in a config file are taken relative to that file
    base = Path(path).resolve().parent
    if cfg.catalog and not Path(cfg.catalog).is_absolute():
        cfg.catalog = str(base / cfg.catalog)
    for m in cfg.models:
        m.streams = [s if Path(s).is_absolute() else str(base / s) for s in m.streams]
    return cfg
