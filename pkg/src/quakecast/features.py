"""Supervised lookback windows plus Multiplicity and EMA features.

Feature row ``s`` of a bin summarises data up to and including period ``s``:

* column 0: normalized log-energy at ``s``
* one column per Multiplicity window: count of events above the magnitude
  threshold in the ``n`` periods ending at ``s`` (i.e. ``multiplicity(t=s+1)``),
  divided by the training-span maximum of that column
* one column per EMA span: EMA of the normalized log-energy at ``s``

A sample targeting period ``t`` sees rows ``t-L .. t-1`` only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .catalog import CatalogEvent, EventArrays, to_arrays
from .gridding import BinSeriesSet, assign_bins, period_index

MULTIPLICITY_THRESHOLD = 3.29
DEFAULT_MULTIPLICITY_WEEKS = (2, 14, 52, 130, 260)
DEFAULT_EMA_SPANS = (5, 10, 25, 75, 150)


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    use_multiplicity: bool = False
    multiplicity_threshold: float = MULTIPLICITY_THRESHOLD
    multiplicity_windows: tuple[int, ...] = DEFAULT_MULTIPLICITY_WEEKS
    use_ema: bool = False
    ema_spans: tuple[int, ...] = DEFAULT_EMA_SPANS

    def __post_init__(self):
        object.__setattr__(self, "multiplicity_windows", tuple(int(w) for w in self.multiplicity_windows))
        object.__setattr__(self, "ema_spans", tuple(int(s) for s in self.ema_spans))
        for name, seq in (("multiplicity_windows", self.multiplicity_windows), ("ema_spans", self.ema_spans)):
            if any(v <= 0 for v in seq):
                raise FeatureError(f"{name} must be positive")
            if list(seq) != sorted(seq):
                raise FeatureError(f"{name} must be sorted ascending")

    @property
    def columns(self) -> list[str]:
        cols = ["log_energy"]
        if self.use_multiplicity:
            cols += [f"multiplicity_{w}w" for w in self.multiplicity_windows]
        if self.use_ema:
            cols += [f"ema_{s}" for s in self.ema_spans]
        return cols

    @property
    def n_features(self) -> int:
        return len(self.columns)

    def to_dict(self):
        return asdict(self)


def ema(series: Sequence[float], span: int) -> np.ndarray:
    """Exponential moving average with ``alpha = 2 / (span + 1)``, seeded by the first sample."""
    if span < 1:
        raise FeatureError("span must be >= 1")
    x = np.asarray(series, dtype=float)
    out = np.empty_like(x)
    if x.size == 0:
        return out
    alpha = 2.0 / (span + 1.0)
    # the last axis is time, so a [bins, periods] matrix is smoothed row-wise
    acc = x[..., 0]
    out[..., 0] = acc
    for t in range(1, x.shape[-1]):
        acc = alpha * x[..., t] + (1.0 - alpha) * acc
        out[..., t] = acc
    return out


def window_periods(window_weeks: int, period_days: int = 14) -> int:
    days = window_weeks * 7
    if days < period_days:
        raise FeatureError(f"window of {window_weeks} weeks is shorter than one period")
    if days % period_days:
        raise FeatureError(f"window of {window_weeks} weeks is not a whole number of periods")
    return days // period_days


def multiplicity(
    events_by_bin: Mapping[int, Sequence[tuple[int, float]]],
    bin_index: int,
    t: int,
    window_weeks: int,
    threshold: float = MULTIPLICITY_THRESHOLD,
    period_days: int = 14,
) -> int:
    """Events in ``bin_index`` with magnitude above ``threshold`` in the window ending just before period ``t``.

    ``events_by_bin`` maps a bin to its ``(period_index, magnitude)`` pairs.
    Periods before the start of data simply contribute nothing.
    """
    n = window_periods(window_weeks, period_days)
    return sum(1 for p, m in events_by_bin.get(bin_index, ()) if t - n <= p < t and m > threshold)


def events_by_bin(events: Sequence[CatalogEvent] | EventArrays, series_set: BinSeriesSet) -> dict[int, list]:
    """Group events into ``bin -> [(period_index, magnitude), ...]`` for the series' grid and period clock."""
    arr = events if isinstance(events, EventArrays) else to_arrays(events)
    bins = assign_bins(arr.latitude, arr.longitude, series_set.grid)
    p = period_index(arr.seconds, series_set.t_start, series_set.period_days)
    out: dict[int, list] = {}
    for b, pi, m in zip(bins.tolist(), p.tolist(), arr.magnitude.tolist()):
        out.setdefault(b, []).append((pi, m))
    return out


def exceedance_counts(events, series_set: BinSeriesSet, threshold: float = MULTIPLICITY_THRESHOLD) -> np.ndarray:
    """Matrix ``[active bin, period]`` of events strictly above ``threshold``."""
    arr = events if isinstance(events, EventArrays) else to_arrays(events)
    big = arr.magnitude > threshold
    bins = assign_bins(arr.latitude[big], arr.longitude[big], series_set.grid)
    p = period_index(arr.seconds[big], series_set.t_start, series_set.period_days) - series_set.period_offset
    row_of = {int(b): r for r, b in enumerate(series_set.active_bins)}
    out = np.zeros((series_set.n_bins, series_set.n_periods), dtype=np.int64)
    for b, pi in zip(bins.tolist(), p.tolist()):
        r = row_of.get(b)
        if r is not None and 0 <= pi < series_set.n_periods:
            out[r, pi] += 1
    return out


def trailing_sums(counts: np.ndarray, n: int) -> np.ndarray:
    """``out[:, t] = counts[:, t-n:t].sum()`` with zero padding, for ``t = 0..P``."""
    c = np.concatenate([np.zeros((counts.shape[0], 1), dtype=counts.dtype), np.cumsum(counts, axis=1)], axis=1)
    lagged = np.concatenate([np.zeros((counts.shape[0], n), dtype=c.dtype), c], axis=1)[:, : c.shape[1]]
    return c - lagged


def feature_cube(
    series_set: BinSeriesSet,
    spec: FeatureSpec,
    split_boundary: int,
    events=None,
) -> tuple[np.ndarray, dict]:
    """Per-bin feature matrix ``[bin, period, feature]`` and the scaling used."""
    values = series_set.values
    cols = [values]
    scaling = {}
    if spec.use_multiplicity:
        if events is None:
            raise FeatureError("multiplicity features need the event catalog")
        exceed = exceedance_counts(events, series_set, spec.multiplicity_threshold)
        for w in spec.multiplicity_windows:
            n = window_periods(w, series_set.period_days)
            m = trailing_sums(exceed, n)[:, 1:].astype(float)
            top = float(m[:, :split_boundary].max()) if split_boundary > 0 else 0.0
            scale = top if top > 0 else 1.0
            scaling[f"multiplicity_{w}w"] = scale
            cols.append(np.minimum(m / scale, 1.0))
    if spec.use_ema:
        for s in spec.ema_spans:
            cols.append(ema(values, s))
    return np.stack(cols, axis=-1), scaling


@dataclass(frozen=True)
class SampleWindow:
    bin: int
    t_target: int
    lookback: np.ndarray
    target: float


@dataclass
class SampleSet:
    """Windows over a shared feature cube.

    Sample ``k`` targets local period ``targets[k]`` of bin row ``rows[k]``.
    Samples are ordered period-major (all bins for one period, then the next),
    which lets graph models take a whole period at once.
    """

    cube: np.ndarray
    truth: np.ndarray
    bins: np.ndarray
    lookback: int
    rows: np.ndarray
    targets: np.ndarray
    period_offset: int = 0
    spec: FeatureSpec = field(default_factory=FeatureSpec)
    split_boundary: int = 0
    scaling: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    @property
    def n_features(self) -> int:
        return self.cube.shape[-1]

    @property
    def target_periods(self) -> np.ndarray:
        """Distinct local target periods, ascending."""
        return np.unique(self.targets)

    def windows(self, idx=None) -> np.ndarray:
        """Lookback tensors ``[n, L, F]`` for the selected samples."""
        idx = slice(None) if idx is None else idx
        rows, ts = self.rows[idx], self.targets[idx]
        steps = ts[:, None] - self.lookback + np.arange(self.lookback)[None, :]
        return self.cube[rows[:, None], steps]

    def y(self, idx=None) -> np.ndarray:
        idx = slice(None) if idx is None else idx
        return self.truth[self.rows[idx], self.targets[idx]]

    def sample_bins(self, idx=None) -> np.ndarray:
        idx = slice(None) if idx is None else idx
        return self.bins[self.rows[idx]]

    def global_periods(self, idx=None) -> np.ndarray:
        idx = slice(None) if idx is None else idx
        return self.targets[idx] + self.period_offset

    def period_windows(self, t: int) -> np.ndarray:
        """``[n_bins, L, F]`` lookbacks of every bin for local target period ``t``."""
        return self.cube[:, t - self.lookback : t]

    def window(self, k: int) -> SampleWindow:
        return SampleWindow(
            bin=int(self.bins[self.rows[k]]),
            t_target=int(self.targets[k] + self.period_offset),
            lookback=self.windows(np.array([k]))[0],
            target=float(self.truth[self.rows[k], self.targets[k]]),
        )


def make_windows(
    series_set: BinSeriesSet,
    spec: FeatureSpec,
    lookback: int,
    split_boundary: int,
    events=None,
) -> tuple[SampleSet, SampleSet]:
    """One sample per (bin, t) with ``t >= lookback``; train iff ``t < split_boundary``."""
    n_periods = series_set.n_periods
    if lookback >= n_periods:
        raise FeatureError(f"lookback {lookback} must be smaller than the period count {n_periods}")
    if lookback < 1:
        raise FeatureError("lookback must be >= 1")
    cube, scaling = feature_cube(series_set, spec, split_boundary, events)
    n_bins = series_set.n_bins

    def build(ts):
        ts = np.asarray(ts, dtype=np.int64)
        return SampleSet(
            cube=cube,
            truth=series_set.values,
            bins=np.asarray(series_set.active_bins, dtype=np.int64),
            lookback=lookback,
            rows=np.tile(np.arange(n_bins), len(ts)),
            targets=np.repeat(ts, n_bins),
            period_offset=series_set.period_offset,
            spec=spec,
            split_boundary=split_boundary,
            scaling=scaling,
        )

    ts = np.arange(lookback, n_periods)
    return build(ts[ts < split_boundary]), build(ts[ts >= split_boundary])


# -- persistence ---------------------------------------------------------------


def save_samples(train: SampleSet, test: SampleSet, directory: str | Path) -> None:
    """Write the feature cube in long form plus a JSON sidecar.

    ``features.csv`` has one row per (bin, period): ``bin_index,period_index,<features...>``
    and ``truth.csv`` the targets; windows are rebuilt from ``lookback`` and the
    target period lists in ``samples.json``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cols = train.spec.columns
    with open(d / "features.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["bin_index", "period_index", *cols]) + "\n")
        for r, b in enumerate(train.bins):
            for p in range(train.cube.shape[1]):
                vals = ",".join("%.17g" % v for v in train.cube[r, p])
                fh.write(f"{int(b)},{p + train.period_offset},{vals}\n")
    with open(d / "truth.csv", "w", encoding="utf-8", newline="\n") as fh:
        for row in train.truth:
            fh.write(",".join("%.17g" % v for v in row) + "\n")
    sidecar = {
        "columns": cols,
        "lookback": train.lookback,
        "split_boundary": train.split_boundary,
        "period_offset": train.period_offset,
        "n_periods": int(train.cube.shape[1]),
        "bins": [int(b) for b in train.bins],
        "spec": train.spec.to_dict(),
        "scaling": train.scaling,
        "train_target_periods": [int(t) for t in train.target_periods],
        "test_target_periods": [int(t) for t in test.target_periods],
    }
    (d / "samples.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_samples(directory: str | Path) -> tuple[SampleSet, SampleSet]:
    d = Path(directory)
    side = json.loads((d / "samples.json").read_text(encoding="utf-8"))
    n_bins, n_periods, n_feat = len(side["bins"]), side["n_periods"], len(side["columns"])
    cube = np.zeros((n_bins, n_periods, n_feat))
    row_of = {b: r for r, b in enumerate(side["bins"])}
    with open(d / "features.csv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            parts = line.rstrip("\n").split(",")
            r = row_of[int(parts[0])]
            p = int(parts[1]) - side["period_offset"]
            cube[r, p] = [float(v) for v in parts[2:]]
    truth = np.array(
        [[float(v) for v in line.split(",")] for line in (d / "truth.csv").read_text(encoding="utf-8").splitlines() if line],
        dtype=float,
    ).reshape(n_bins, n_periods)
    spec_d = dict(side["spec"])
    spec = FeatureSpec(**spec_d)
    bins = np.asarray(side["bins"], dtype=np.int64)

    def build(ts):
        ts = np.asarray(ts, dtype=np.int64)
        return SampleSet(
            cube=cube,
            truth=truth,
            bins=bins,
            lookback=side["lookback"],
            rows=np.tile(np.arange(n_bins), len(ts)),
            targets=np.repeat(ts, n_bins),
            period_offset=side["period_offset"],
            spec=spec,
            split_boundary=side["split_boundary"],
            scaling=side["scaling"],
        )

    return build(side["train_target_periods"]), build(side["test_target_periods"])
