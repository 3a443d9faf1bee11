"""Command-line pipeline: ingest -> build -> features -> train -> predict -> eval, plus nowcast-roc.

Every stage writes into ``<out>/<stage>/`` together with a ``manifest.json``
recording the config hash, input digests and toolkit version. Outputs carry no
timestamps, so rerunning a stage on unchanged inputs rewrites identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import worker_count
from .catalog import filter_region, read_catalog, write_catalog
from .config import ConfigError, RunConfig, load_config
from .evaluation import report, write_detail, write_series_comparison, write_table
from .features import load_samples, make_windows, save_samples
from .gridding import (
    SpatialGrid,
    SplitSpec,
    build_series,
    load_series,
    normalize,
    save_series,
    select_active_bins,
)
from .graph import build_bin_graph, degree_stats, load_graph, save_graph
from .models import (
    Architecture,
    ForecastStream,
    load_bundle,
    load_forecast_streams,
    load_stream,
    new_bundle,
    predict,
    save_bundle,
    save_stream,
    train,
)
from .nowcast import large_event_labels, monthly_small_rate, nowcast_curve, optimize_filter, roc_skill

logger = logging.getLogger("quakecast")


class MissingUpstream(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _input_name(path: Path, out) -> str:
    try:
        return str(path.resolve().relative_to(Path(out).resolve()))
    except ValueError:
        return path.name


def _write_manifest(directory: Path, stage: str, cfg: RunConfig, inputs: list[Path], extra=None) -> None:
    doc = {
        "stage": stage,
        "config_hash": cfg.digest(),
        "toolkit_version": __version__,
        "inputs": {_input_name(p, cfg.out): _sha256(p) for p in inputs},
    }
    if extra:
        doc.update(extra)
    (directory / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(path: Path, command: str) -> Path:
    if not path.exists():
        raise MissingUpstream(f"{path} not found; run `quakecast {command}` first")
    return path


def _stage_dir(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.out) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- stages ----------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig) -> Path:
    cfg.validate(require_catalog=True)
    events, stats = read_catalog(cfg.catalog)
    kept = filter_region(events, cfg.region.to_filter())
    d = _stage_dir(cfg, "catalog")
    write_catalog(kept, d / "events.csv")
    _write_manifest(
        d,
        "ingest",
        cfg,
        [Path(cfg.catalog)],
        {
            "rows": stats.total_rows,
            "parsed": stats.parsed,
            "skipped": stats.skipped,
            "clamped_magnitudes": stats.clamped_magnitudes,
            "in_region": len(kept),
        },
    )
    logger.info("ingest: %d rows, %d skipped, %d in region", stats.total_rows, stats.skipped, len(kept))
    return d


def cmd_build(cfg: RunConfig) -> Path:
    cfg.validate()
    events_path = _require(Path(cfg.out) / "catalog" / "events.csv", "ingest")
    events, _ = read_catalog(events_path)
    r = cfg.region
    grid = SpatialGrid.from_extent(r.lat_min, r.lat_max, r.lon_min, r.lon_max, cfg.cell_size)
    region = r.to_filter()
    full = build_series(events, grid, region.t_start, region.t_end, cfg.period_days)
    k = min(cfg.active_bins, grid.n_bins)
    active = full.select(select_active_bins(full, k))
    boundary = SplitSpec.from_fraction(cfg.split_fraction, active.n_periods).boundary_index
    series = normalize(active, boundary if cfg.normalize_train_only else None)
    d = _stage_dir(cfg, "series")
    save_series(series, d)
    graph = build_bin_graph(grid, series.active_bins, cfg.epsilon)
    gd = _stage_dir(cfg, "graph")
    save_graph(graph, gd)
    degrees, n_comp = degree_stats(graph)
    merges = sum(t == "merge" for t in graph.edge_origin)
    _write_manifest(
        d, "build", cfg, [events_path], {"n_bins_total": grid.n_bins, "n_active": len(series.active_bins), "n_periods": series.n_periods}
    )
    _write_manifest(gd, "build", cfg, [events_path], {"n_nodes": graph.n_nodes, "n_edges": len(graph.edges), "merge_edges": merges, "components": n_comp, "max_degree": int(degrees.max(initial=0))})
    logger.info("build: %d periods, %d active bins, %d edges (%d merge)", series.n_periods, series.n_bins, len(graph.edges), merges)
    return d


def cmd_features(cfg: RunConfig) -> Path:
    cfg.validate()
    series_dir = _require(Path(cfg.out) / "series", "build")
    _require(series_dir / "metadata.json", "build")
    series = load_series(series_dir)
    events = None
    if cfg.features.use_multiplicity:
        events, _ = read_catalog(_require(Path(cfg.out) / "catalog" / "events.csv", "ingest"))
    boundary = SplitSpec.from_fraction(cfg.split_fraction, series.n_periods).boundary_index
    train_set, test_set = make_windows(series, cfg.features, cfg.lookback, boundary, events)
    d = _stage_dir(cfg, "features")
    save_samples(train_set, test_set, d)
    _write_manifest(d, "features", cfg, [series_dir / "values.csv"], {"n_train": len(train_set), "n_test": len(test_set)})
    logger.info("features: %d train / %d test samples", len(train_set), len(test_set))
    return d


def _load_samples(cfg):
    return load_samples(_require(Path(cfg.out) / "features" / "samples.json", "features").parent)


def _load_graph(cfg):
    return load_graph(_require(Path(cfg.out) / "graph" / "edges.txt", "build").parent)


def _architecture(m, samples) -> Architecture:
    return Architecture(
        kind=m.kind,
        lookback=samples.lookback,
        n_features=samples.n_features,
        hidden=m.hidden,
        gat_width=m.gat_width,
        gat_layers=m.gat_layers,
        residual=m.residual,
        pattern=m.pattern,
        streams=tuple(s.model for s in load_forecast_streams(m.streams)) if m.streams else (),
        feature_spec=samples.spec.to_dict(),
    )


def _train_one(cfg: RunConfig, m, train_set, graph) -> Path:
    arch = _architecture(m, train_set)
    streams = load_forecast_streams(m.streams) if m.streams else []
    bundle, trace = train(new_bundle(arch, cfg.train.seed, len(train_set.bins)), train_set, graph if arch.uses_graph else None, cfg.train, streams)
    d = _stage_dir(cfg, f"models/{m.name}")
    inputs = [Path(cfg.out) / "features" / "features.csv", *map(Path, m.streams)]
    bundle.provenance.update(
        stage="train",
        config_hash=cfg.digest(),
        toolkit_version=__version__,
        inputs={_input_name(p, cfg.out): _sha256(p) for p in inputs},
    )
    digest = save_bundle(bundle, d)
    with open(d / "loss_trace.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,loss\n")
        for k, v in enumerate(trace):
            fh.write(f"{k},{v:.17g}\n")
    logger.info("train %s: final loss %s, digest %s", m.name, bundle.provenance.get("final_train_loss"), digest[:12])
    return d


def cmd_train(cfg: RunConfig, model: str | None = None) -> list[Path]:
    cfg.validate()
    train_set, _ = _load_samples(cfg)
    selected = [cfg.model(model)] if model else cfg.models
    graph = _load_graph(cfg) if any(m.kind == "gnncoder" or m.pattern == "gat" for m in selected) else None
    workers = min(worker_count(1), len(selected))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda m: _train_one(cfg, m, train_set, graph), selected))
    return [_train_one(cfg, m, train_set, graph) for m in selected]


def cmd_predict(cfg: RunConfig, model: str | None = None) -> list[Path]:
    """Predict every train and test target of the selected models into ``predictions/<name>.csv``."""
    cfg.validate()
    train_set, test_set = _load_samples(cfg)
    selected = [cfg.model(model)] if model else cfg.models
    graph = None
    out = []
    d = _stage_dir(cfg, "predictions")
    for m in selected:
        bdir = _require(Path(cfg.out) / "models" / m.name / "manifest.json", f"train --model {m.name}").parent
        bundle = load_bundle(bdir)
        if bundle.arch.uses_graph and graph is None:
            graph = _load_graph(cfg)
        streams = load_forecast_streams(m.streams) if m.streams else []
        parts = [predict(bundle, s, graph, streams, name=m.name) for s in (train_set, test_set) if len(s)]
        stream = ForecastStream(
            m.name,
            np.concatenate([p.bins for p in parts]),
            np.concatenate([p.periods for p in parts]),
            np.concatenate([p.values for p in parts]),
        )
        path = d / f"{m.name}.csv"
        save_stream(stream, path)
        out.append(path)
    _write_manifest(d, "predict", cfg, sorted(Path(cfg.out, "models").glob("*/params.bin")))
    return out


def truth_stream(series, name="truth") -> ForecastStream:
    bins = np.repeat(series.active_bins, series.n_periods)
    periods = np.tile(series.period_indices, series.n_bins)
    return ForecastStream(name, bins, periods, series.values.reshape(-1))


def cmd_eval(cfg: RunConfig, extra_streams=(), with_truth=False, bin_averaged=False) -> Path:
    cfg.validate()
    series = load_series(_require(Path(cfg.out) / "series" / "metadata.json", "build").parent)
    boundary = SplitSpec.from_fraction(cfg.split_fraction, series.n_periods).boundary_index
    # test samples start no earlier than the first full lookback window
    boundary = max(boundary, cfg.lookback)
    pred_dir = Path(cfg.out) / "predictions"
    paths = sorted(pred_dir.glob("*.csv")) if pred_dir.exists() else []
    paths += [Path(p) for p in extra_streams]
    streams = [load_stream(p) for p in paths]
    if with_truth:
        streams.append(truth_stream(series))
    if not streams:
        raise MissingUpstream("no prediction streams found; run `quakecast predict` first")
    reports = report(streams, series, boundary + series.period_offset)
    d = _stage_dir(cfg, "eval")
    write_table(reports, d / "table.csv", bin_averaged)
    write_detail(reports, d / "detail.json")
    write_series_comparison(streams, series, boundary + series.period_offset, d / "series.csv")
    _write_manifest(d, "eval", cfg, paths + [Path(cfg.out) / "series" / "values.csv"])
    for r in reports:
        logger.info("eval %-24s MSE %.6g  MAE %.6g  NNSE %.4f", r.model, r.mse, r.mae, r.nnse)
    return d


def cmd_nowcast_roc(cfg: RunConfig) -> Path:
    cfg.validate()
    events_path = _require(Path(cfg.out) / "catalog" / "events.csv", "ingest")
    events, _ = read_catalog(events_path)
    region = cfg.region.to_filter()
    nc = cfg.nowcast
    months, rate = monthly_small_rate(events, region, nc.mag_threshold)
    labels = large_event_labels(events, months, nc.large_mag, nc.horizon_months)
    train_end = int(len(months) * nc.train_fraction)
    search = optimize_filter(rate, labels, nc.spans, nc.weights, train_end)
    curve = nowcast_curve(rate, search.best, train_end)
    roc = roc_skill(curve[:train_end], labels[:train_end])
    d = _stage_dir(cfg, "nowcast")
    with open(d / "surface.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ema_span", "correction_weight", "skill"])
        for i, s in enumerate(search.spans):
            for j, lam in enumerate(search.weights):
                w.writerow([s, repr(lam), "%.17g" % search.surface[i, j]])
    with open(d / "roc.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "false_positive_rate", "true_positive_rate"])
        for t, f, p in zip(roc.thresholds, roc.false_positive_rates, roc.true_positive_rates):
            w.writerow(["%.17g" % t, "%.17g" % f, "%.17g" % p])
    series_dir = d / "series"
    series_dir.mkdir(exist_ok=True)
    (series_dir / "values.csv").write_text(",".join("%.17g" % v for v in curve) + "\n", encoding="utf-8")
    with open(d / "monthly.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["month", "small_rate", "nowcast", "label"])
        for m, r_, c, lab in zip(months, rate, curve, labels):
            w.writerow([m.strftime("%Y-%m"), int(r_), "%.17g" % c, int(lab)])
    meta = {
        "months": [m.strftime("%Y-%m") for m in months],
        "ema_span": search.best.ema_span,
        "correction_weight": search.best.correction_weight,
        "skill": search.best_skill,
        "train_months": train_end,
    }
    (series_dir / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(d, "nowcast-roc", cfg, [events_path], {"best": meta | {"months": len(months)}})
    logger.info("nowcast-roc: best span %d, weight %g, skill %.4f", search.best.ema_span, search.best.correction_weight, search.best_skill)
    return d


# -- entry point -----------------------------------------------------------------

COMMANDS = ("ingest", "build", "features", "train", "predict", "eval", "nowcast-roc")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="training seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--catalog", help="catalog CSV (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="quakecast", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train", "predict"):
            p.add_argument("--model", help="only this model from the config")
        if name == "eval":
            p.add_argument("--stream", action="append", default=[], help="extra forecast stream file")
            p.add_argument("--with-truth", action="store_true", help="also score the observed series replayed as a stream")
            p.add_argument("--bin-averaged", action="store_true", help="report per-bin averaged NNSE instead of pooled")
    return ap


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.catalog is not None:
        cfg.catalog = args.catalog
    return cfg


def _fail(kind: str, message: str, code: int, details=None) -> int:
    doc = {"error": kind, "message": message}
    if details:
        doc["details"] = details
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "ingest":
            cmd_ingest(cfg)
        elif args.command == "build":
            cmd_build(cfg)
        elif args.command == "features":
            cmd_features(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.model)
        elif args.command == "predict":
            cmd_predict(cfg, args.model)
        elif args.command == "eval":
            cmd_eval(cfg, args.stream, args.with_truth, args.bin_averaged)
        elif args.command == "nowcast-roc":
            cmd_nowcast_roc(cfg)
    except ConfigError as exc:
        return _fail("config", "invalid configuration", 2, exc.problems)
    except MissingUpstream as exc:
        return _fail("missing-upstream", str(exc), 3)
    except (ValueError, FloatingPointError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
