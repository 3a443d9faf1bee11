"""Experiment drivers shared by the acceptance suite and the scripts in ``scripts/``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .catalog import read_catalog
from .cli import cmd_build, cmd_eval, cmd_features, cmd_ingest, cmd_predict, cmd_train
from .config import RunConfig
from .evaluation import MetricReport, evaluate_stream, report
from .features import FeatureSpec, make_windows
from .gridding import SplitSpec, load_series
from .graph import build_bin_graph, load_graph
from .models import (
    Architecture,
    ForecastStream,
    TrainConfig,
    load_stream,
    multifoundation_train,
    new_bundle,
    predict,
    train,
)
from .synthetic import ar1_panel

logger = logging.getLogger(__name__)


@dataclass
class SanityResult:
    rho: float
    expected_persistence_nnse: float
    reports: dict[str, MetricReport] = field(default_factory=dict)


def ar1_sanity(
    rho: float = 0.8,
    n_bins: int = 100,
    n_periods: int = 500,
    lookback: int = 12,
    hidden: int = 16,
    epochs: int = 5,
    lr: float = 3e-3,
    seed: int = 0,
) -> SanityResult:
    """Train every model family on an AR(1) panel and score the test split.

    One-step persistence has NSE ``2 rho - 1``, hence NNSE ``1 / (3 - 2 rho)``.
    """
    series = ar1_panel(n_bins=n_bins, n_periods=n_periods, rho=rho, seed=seed)
    boundary = SplitSpec.from_fraction(0.8, series.n_periods).boundary_index
    train_set, test_set = make_windows(series, FeatureSpec(), lookback, boundary)
    graph = build_bin_graph(series.grid, series.active_bins, 0.15)
    cfg = TrainConfig(epochs=epochs, lr=lr, seed=seed)
    out = SanityResult(rho, 1.0 / (3.0 - 2.0 * rho))
    for kind in ("persistence", "mean", "lstm", "gnncoder"):
        arch = Architecture(kind=kind, lookback=lookback, hidden=hidden, gat_width=hidden)
        g = graph if arch.uses_graph else None
        bundle, _ = train(new_bundle(arch, seed), train_set, g, cfg)
        out.reports[kind] = evaluate_stream(predict(bundle, test_set, g, name=kind), series, boundary)
    return out


@dataclass
class PlantedResult:
    pattern: str
    final_train_loss: float
    test_nnse: float
    stream_weights: dict[str, float]


def planted_stream(pattern: str = "lstm", epochs: int | None = None, seed: int = 0) -> PlantedResult:
    """Combiner fed the ground truth among two noise streams; it should learn to copy the truth."""
    series = ar1_panel(n_bins=25, n_periods=200, n_cols=5, seed=seed + 3)
    boundary = 160
    train_set, test_set = make_windows(series, FeatureSpec(), 6, boundary)
    graph = build_bin_graph(series.grid, series.active_bins, 0.15)
    bins = np.repeat(series.active_bins, series.n_periods)
    periods = np.tile(series.period_indices, series.n_bins)
    rng = np.random.default_rng(seed)
    streams = [
        ForecastStream("noise_gauss", bins, periods, rng.normal(0, 0.3, bins.size)),
        ForecastStream("truth", bins, periods, series.values.reshape(-1)),
        ForecastStream("noise_uniform", bins, periods, rng.uniform(-1, 1, bins.size)),
    ]
    if epochs is None:
        # graph models take one step per 8 periods, so they need more passes
        epochs = 400 if pattern == "gat" else 40
    g = graph if pattern == "gat" else None
    bundle, _ = multifoundation_train(
        streams, train_set, pattern, g, TrainConfig(epochs=epochs, seed=seed), hidden=8, gat_width=8
    )
    test_report = evaluate_stream(predict(bundle, test_set, g, streams), series, boundary)
    w = bundle.params["head_W"][-len(streams) :, 0]
    return PlantedResult(
        pattern,
        bundle.provenance["final_train_loss"],
        test_report.nnse,
        {s.model: float(v) for s, v in zip(streams, w)},
    )


def socal_config(catalog: str | Path, out: str | Path, epochs: int = 10, lookback: int = 52, seed: int = 0) -> RunConfig:
    """Southern California defaults (500 bins, lookback 52) with a short training budget."""
    cfg = RunConfig(catalog=str(catalog), out=str(out), lookback=lookback)
    cfg.train = replace(cfg.train, epochs=epochs, seed=seed)
    return cfg


@dataclass
class ReproductionResult:
    n_periods: int
    n_active: int
    reports: dict[str, MetricReport]


def socal_reproduction(cfg: RunConfig) -> ReproductionResult:
    """Full pipeline on a real catalog; returns test-split reports keyed by model name."""
    cmd_ingest(cfg)
    cmd_build(cfg)
    cmd_features(cfg)
    cmd_train(cfg)
    cmd_predict(cfg)
    cmd_eval(cfg)
    series = load_series(Path(cfg.out) / "series")
    boundary = max(SplitSpec.from_fraction(cfg.split_fraction, series.n_periods).boundary_index, cfg.lookback)
    streams = [load_stream(p) for p in sorted((Path(cfg.out) / "predictions").glob("*.csv"))]
    reports = {r.model: r for r in report(streams, series, boundary)}
    return ReproductionResult(series.n_periods, series.n_bins, reports)


def feature_ablation(cfg: RunConfig, kinds=("lstm", "gnncoder")) -> dict[str, dict[str, float]]:
    """Final train loss per model kind and feature set, at a fixed seed.

    Feature sets: single, +multiplicity, +EMA, +multiplicity+EMA. Uses the
    catalog and series already built under ``cfg.out``.
    """
    series = load_series(Path(cfg.out) / "series")
    events, _ = read_catalog(Path(cfg.out) / "catalog" / "events.csv")
    boundary = SplitSpec.from_fraction(cfg.split_fraction, series.n_periods).boundary_index
    graph = load_graph(Path(cfg.out) / "graph")
    specs = {
        "single": FeatureSpec(),
        "multiplicity": FeatureSpec(use_multiplicity=True),
        "ema": FeatureSpec(use_ema=True),
        "multiplicity+ema": FeatureSpec(use_multiplicity=True, use_ema=True),
    }
    out: dict[str, dict[str, float]] = {k: {} for k in kinds}
    for name, spec in specs.items():
        train_set, _ = make_windows(series, spec, cfg.lookback, boundary, events)
        for kind in kinds:
            arch = Architecture(kind=kind, lookback=cfg.lookback, n_features=spec.n_features, feature_spec=spec.to_dict())
            g = graph if arch.uses_graph else None
            bundle, _ = train(new_bundle(arch, cfg.seed), train_set, g, cfg.train)
            out[kind][name] = bundle.provenance["final_train_loss"]
            logger.info("ablation %s %s: final train loss %.6g", kind, name, out[kind][name])
    return out

