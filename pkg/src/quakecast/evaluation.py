"""Nash-Sutcliffe efficiency and error metrics, pooled over (bin, period) pairs."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gridding import BinSeriesSet
from .models import ForecastStream


class DegenerateSeries(ValueError):
    """Observed series is constant, so NSE has a zero denominator."""


def _pair(observed, predicted):
    o = np.asarray(observed, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if o.shape != p.shape:
        raise ValueError(f"length mismatch: {o.size} observed vs {p.size} predicted")
    if o.size == 0:
        raise ValueError("empty input")
    return o, p


def nse(observed, predicted) -> float:
    """``1 - sum((O - P)^2) / sum((O - mean(O))^2)``."""
    o, p = _pair(observed, predicted)
    if o.size < 2:
        raise ValueError("NSE needs at least two observations")
    resid = o - o.mean()
    denom = float(np.dot(resid, resid))
    if denom == 0.0:
        raise DegenerateSeries("observed series is constant")
    err = o - p
    return 1.0 - float(np.dot(err, err)) / denom


def nnse(nse_value: float) -> float:
    """Maps NSE in (-inf, 1] onto (0, 1]; 0.5 means as good as the observed mean."""
    return 1.0 / (2.0 - nse_value)


def mse(observed, predicted) -> float:
    o, p = _pair(observed, predicted)
    return float(np.mean((o - p) ** 2))


def mae(observed, predicted) -> float:
    o, p = _pair(observed, predicted)
    return float(np.mean(np.abs(o - p)))


@dataclass
class BinMetrics:
    bin_index: int
    n: int
    mse: float
    mae: float
    nse: float | None
    nnse: float | None


@dataclass
class MetricReport:
    model: str
    split: str
    n: int
    mse: float
    mae: float
    nse: float
    nnse: float
    degenerate_bins: int
    bin_mean_nnse: float | None = None
    per_bin: list[BinMetrics] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def evaluate_stream(
    stream: ForecastStream,
    truth: BinSeriesSet,
    boundary: int,
    split_name: str = "test",
    end: int | None = None,
) -> MetricReport:
    """Metrics of ``stream`` against ``truth`` over global periods ``[boundary, end)`` of every active bin.

    Constant-observation bins get no NSE and are counted in ``degenerate_bins``;
    they still count towards MSE/MAE and the pooled NSE.
    """
    first = boundary - truth.period_offset
    last = truth.n_periods if end is None else end - truth.period_offset
    if not 0 <= first < last <= truth.n_periods:
        raise ValueError(f"evaluation range [{boundary}, {end}) is outside the truth series")
    periods = np.arange(first, last)
    n_bins = truth.n_bins
    bins = np.repeat(truth.active_bins, len(periods))
    glob = np.tile(periods + truth.period_offset, n_bins)
    obs = truth.values[:, first:last]
    pred = stream.lookup(bins, glob).reshape(n_bins, len(periods))

    per_bin, nnses, degenerate = [], [], 0
    for r, b in enumerate(truth.active_bins):
        try:
            e = nse(obs[r], pred[r])
            nn = nnse(e)
            nnses.append(nn)
        except DegenerateSeries:
            e = nn = None
            degenerate += 1
        per_bin.append(BinMetrics(int(b), len(periods), mse(obs[r], pred[r]), mae(obs[r], pred[r]), e, nn))
    pooled = nse(obs, pred)
    return MetricReport(
        model=stream.model,
        split=split_name,
        n=int(obs.size),
        mse=mse(obs, pred),
        mae=mae(obs, pred),
        nse=pooled,
        nnse=nnse(pooled),
        degenerate_bins=degenerate,
        bin_mean_nnse=float(np.mean(nnses)) if nnses else None,
        per_bin=per_bin,
    )


def report(
    streams: Sequence[ForecastStream],
    truth: BinSeriesSet,
    boundary: int,
    split_name: str = "test",
) -> list[MetricReport]:
    """One report per stream, sorted by pooled MSE descending (best model last)."""
    reports = [evaluate_stream(s, truth, boundary, split_name) for s in streams]
    return sorted(reports, key=lambda r: (-r.mse, r.model))


def write_table(reports: Sequence[MetricReport], path: str | Path, bin_averaged: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "MSE", "MAE", "NNSE"])
        for r in reports:
            value = r.bin_mean_nnse if bin_averaged else r.nnse
            w.writerow([r.model, "%.6g" % r.mse, "%.6g" % r.mae, "%.6g" % value if value is not None else ""])


def write_detail(reports: Sequence[MetricReport], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_series_comparison(
    streams: Sequence[ForecastStream], truth: BinSeriesSet, boundary: int, path: str | Path
) -> None:
    """Long-format truth-vs-prediction table for plotting: ``bin_index,period_index,observed,<model>...``."""
    first = boundary - truth.period_offset
    periods = np.arange(first, truth.n_periods)
    glob = periods + truth.period_offset
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_index", "period_index", "observed", *[s.model for s in streams]])
        for r, b in enumerate(truth.active_bins):
            preds = [s.lookup(np.full(len(glob), b), glob) for s in streams]
            for k, p in enumerate(glob):
                w.writerow([int(b), int(p), "%.17g" % truth.values[r, periods[k]], *("%.17g" % v[k] for v in preds)])
