"""Spatial gridding and biweekly log-energy series.

Each bin-period cell holds the log of the summed Gutenberg-Richter energy
proxy of its events::

    LogEn = (1 / 1.5) * log10( sum_quakes 10 ** (1.5 * m) )

which equals ``m`` for a single event. Cells without events hold 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import CatalogEvent, EventArrays, parse_time, to_arrays

DEFAULT_T_START = datetime(1986, 1, 1, tzinfo=timezone.utc)
ENERGY_EXPONENT = 1.5
EMPTY_BIN_VALUE = 0.0


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialGrid:
    lat_min: float
    lon_min: float
    cell_size: float
    n_rows: int
    n_cols: int

    @classmethod
    def from_extent(cls, lat_min, lat_max, lon_min, lon_max, cell_size=0.1):
        n_rows = int(round((lat_max - lat_min) / cell_size))
        n_cols = int(round((lon_max - lon_min) / cell_size))
        if n_rows < 1 or n_cols < 1:
            raise GridError("grid extent smaller than one cell")
        for n, span, name in ((n_rows, lat_max - lat_min, "latitude"), (n_cols, lon_max - lon_min, "longitude")):
            if abs(n * cell_size - span) > 1e-9 * max(1.0, abs(span)):
                raise GridError(f"{name} extent {span!r} is not a whole number of {cell_size} cells")
        return cls(float(lat_min), float(lon_min), float(cell_size), n_rows, n_cols)

    @property
    def n_bins(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def lat_max(self) -> float:
        return self.lat_min + self.n_rows * self.cell_size

    @property
    def lon_max(self) -> float:
        return self.lon_min + self.n_cols * self.cell_size

    def lat_edge(self, row):
        return self.lat_min + row * self.cell_size

    def lon_edge(self, col):
        return self.lon_min + col * self.cell_size

    def row_col(self, index):
        return divmod(int(index), self.n_cols)

    def center(self, index) -> tuple[float, float]:
        r, c = self.row_col(index)
        return (self.lat_min + (r + 0.5) * self.cell_size, self.lon_min + (c + 0.5) * self.cell_size)

    def centers(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        rows, cols = np.divmod(idx, self.n_cols)
        return np.column_stack(
            [self.lat_min + (rows + 0.5) * self.cell_size, self.lon_min + (cols + 0.5) * self.cell_size]
        )

    def to_dict(self):
        return {
            "lat_min": self.lat_min,
            "lon_min": self.lon_min,
            "cell_size": self.cell_size,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
        }


def _cell_coordinate(values, origin, cell, n, name):
    """Floor-divide coordinates into cell numbers.

    The result is nudged so it agrees exactly with the edge definition
    ``origin + k * cell <= v < origin + (k + 1) * cell`` despite rounding in the
    division.
    """
    v = np.asarray(values, dtype=float)
    k = np.floor((v - origin) / cell).astype(np.int64)
    k = np.where(v < origin + k * cell, k - 1, k)
    k = np.where(v >= origin + (k + 1) * cell, k + 1, k)
    bad = (k < 0) | (k >= n)
    if np.any(bad):
        first = float(v[bad].flat[0]) if v.ndim else float(v)
        raise GridError(f"{name} {first!r} outside grid extent")
    return k


def assign_bins(latitude, longitude, grid: SpatialGrid) -> np.ndarray:
    rows = _cell_coordinate(latitude, grid.lat_min, grid.cell_size, grid.n_rows, "latitude")
    cols = _cell_coordinate(longitude, grid.lon_min, grid.cell_size, grid.n_cols, "longitude")
    return rows * grid.n_cols + cols


def assign_bin(event: CatalogEvent, grid: SpatialGrid) -> int:
    """Row-major bin index of the cell containing the event's epicenter."""
    return int(assign_bins(np.array([event.latitude]), np.array([event.longitude]), grid)[0])


def log_energy(magnitudes: Sequence[float]) -> float:
    """Log-energy of a group of events; 0 for an empty group.

    Uses max-exponent factoring so 10**(1.5 m) never overflows.
    """
    m = np.asarray(magnitudes, dtype=float)
    if m.size == 0:
        return EMPTY_BIN_VALUE
    if not np.all(np.isfinite(m)):
        raise GridError("non-finite magnitude")
    top = m.max()
    total = np.sum(10.0 ** (ENERGY_EXPONENT * (m - top)))
    return float(top + math.log10(total) / ENERGY_EXPONENT)


def _grouped_log_energy(keys: np.ndarray, magnitudes: np.ndarray, n_keys: int) -> np.ndarray:
    out = np.full(n_keys, EMPTY_BIN_VALUE)
    if keys.size == 0:
        return out
    top = np.full(n_keys, -np.inf)
    np.maximum.at(top, keys, magnitudes)
    total = np.zeros(n_keys)
    np.add.at(total, keys, 10.0 ** (ENERGY_EXPONENT * (magnitudes - top[keys])))
    hit = total > 0
    out[hit] = top[hit] + np.log10(total[hit]) / ENERGY_EXPONENT
    return out


@dataclass
class BinSeriesSet:
    """Per-bin biweekly series. Rows follow ``active_bins``; columns are periods.

    ``period_offset`` is the global index of column 0, so views produced by
    :func:`split` keep their original period numbering. ``norm_constant`` is the
    divisor applied to raw log-energy (1.0 before normalization).
    """

    grid: SpatialGrid
    active_bins: np.ndarray
    t_start: datetime
    period_days: int
    values: np.ndarray
    raw_event_counts: np.ndarray
    norm_constant: float = 1.0
    period_offset: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_periods(self) -> int:
        return self.values.shape[1]

    @property
    def period_indices(self) -> np.ndarray:
        return np.arange(self.period_offset, self.period_offset + self.n_periods)

    @property
    def times(self) -> list[datetime]:
        step = timedelta(days=self.period_days)
        return [self.t_start + p * step for p in self.period_indices]

    def row_of(self, bin_index: int) -> int:
        hits = np.flatnonzero(self.active_bins == bin_index)
        if hits.size == 0:
            raise KeyError(f"bin {bin_index} is not active")
        return int(hits[0])

    def select(self, bins: Sequence[int]) -> BinSeriesSet:
        all_bins = list(self.active_bins)
        rows = [all_bins.index(b) for b in bins]
        return replace(
            self,
            active_bins=np.asarray(bins, dtype=np.int64),
            values=self.values[rows],
            raw_event_counts=self.raw_event_counts[rows],
        )


def period_count(t_start: datetime, t_end: datetime, period_days: int = 14) -> int:
    return int((t_end - t_start) // timedelta(days=period_days))


def period_index(seconds: np.ndarray, t_start: datetime, period_days: int = 14) -> np.ndarray:
    """Global period index of POSIX-second timestamps (may be negative or beyond the span)."""
    return np.floor_divide(np.asarray(seconds, dtype=np.int64) - int(t_start.timestamp()), period_days * 86400)


def build_series(
    events: Sequence[CatalogEvent] | EventArrays,
    grid: SpatialGrid,
    t_start: datetime = DEFAULT_T_START,
    t_end: datetime | None = None,
    period_days: int = 14,
) -> BinSeriesSet:
    """Build raw log-energy and event-count matrices for every grid bin.

    Period ``p`` covers ``[t_start + p*period, t_start + (p+1)*period)``; only
    whole periods inside ``[t_start, t_end)`` are kept.
    """
    arrays = events if isinstance(events, EventArrays) else to_arrays(events)
    if t_end is None:
        raise GridError("t_end is required")
    n_periods = period_count(t_start, t_end, period_days)
    if n_periods < 1:
        raise GridError("time span shorter than one period")

    p = period_index(arrays.seconds, t_start, period_days)
    keep = (p >= 0) & (p < n_periods)
    bins = assign_bins(arrays.latitude[keep], arrays.longitude[keep], grid)
    keys = bins * n_periods + p[keep]
    n_keys = grid.n_bins * n_periods
    values = _grouped_log_energy(keys, arrays.magnitude[keep], n_keys).reshape(grid.n_bins, n_periods)
    counts = np.bincount(keys, minlength=n_keys).reshape(grid.n_bins, n_periods)
    return BinSeriesSet(
        grid=grid,
        active_bins=np.arange(grid.n_bins, dtype=np.int64),
        t_start=t_start,
        period_days=period_days,
        values=values,
        raw_event_counts=counts.astype(np.int64),
    )


def select_active_bins(series_set: BinSeriesSet, k: int) -> list[int]:
    """The ``k`` bins with most events, by count descending then bin index ascending."""
    if not 0 <= k <= series_set.n_bins:
        raise GridError(f"k={k} outside [0, {series_set.n_bins}]")
    totals = series_set.raw_event_counts.sum(axis=1)
    order = np.lexsort((series_set.active_bins, -totals))
    return [int(b) for b in series_set.active_bins[order[:k]]]


def normalize(series_set: BinSeriesSet, train_periods: int | None = None) -> BinSeriesSet:
    """Divide by the global max-abs value.

    With ``train_periods`` the constant comes from the first ``train_periods``
    columns only (ablation mode; test values may then exceed 1 in magnitude).
    """
    ref = series_set.values if train_periods is None else series_set.values[:, :train_periods]
    scale = float(np.max(np.abs(ref))) if ref.size else 0.0
    if scale == 0.0:
        raise GridError("all-zero series: nothing to normalize")
    return replace(
        series_set,
        values=series_set.values / scale,
        norm_constant=series_set.norm_constant * scale,
    )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    boundary_index: int

    @classmethod
    def from_fraction(cls, train_fraction: float, n_periods: int) -> SplitSpec:
        if not 0.0 < train_fraction < 1.0:
            raise GridError("train_fraction must lie in (0, 1)")
        return cls(train_fraction, int(math.floor(train_fraction * n_periods)))


def split(series_set: BinSeriesSet, spec: SplitSpec) -> tuple[BinSeriesSet, BinSeriesSet]:
    """Chronological train/test views; both share the underlying arrays."""
    b = spec.boundary_index
    if not 0 < b < series_set.n_periods:
        raise GridError(f"split boundary {b} not strictly inside 0..{series_set.n_periods}")
    train = replace(series_set, values=series_set.values[:, :b], raw_event_counts=series_set.raw_event_counts[:, :b])
    test = replace(
        series_set,
        values=series_set.values[:, b:],
        raw_event_counts=series_set.raw_event_counts[:, b:],
        period_offset=series_set.period_offset + b,
    )
    return train, test


# -- persistence ---------------------------------------------------------------


def _write_matrix(path: Path, matrix: np.ndarray, fmt: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in matrix:
            fh.write(",".join(fmt % v for v in row))
            fh.write("\n")


def _read_matrix(path: Path, dtype, n_cols: int) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([dtype(tok) for tok in line.split(",")])
    if not rows:
        return np.zeros((0, n_cols), dtype=dtype)
    return np.array(rows, dtype=dtype)


def save_series(series_set: BinSeriesSet, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "grid": series_set.grid.to_dict(),
        "t_start": series_set.t_start.strftime("%Y-%m-%dT%H:%M:%SZ"),
        "period_days": series_set.period_days,
        "period_offset": series_set.period_offset,
        "n_periods": series_set.n_periods,
        "norm_constant": series_set.norm_constant,
        "active_bins": [int(b) for b in series_set.active_bins],
        "extra": series_set.meta,
    }
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_matrix(d / "values.csv", series_set.values, "%.17g")
    _write_matrix(d / "counts.csv", series_set.raw_event_counts, "%d")


def load_series(directory: str | Path) -> BinSeriesSet:
    d = Path(directory)
    meta = json.loads((d / "metadata.json").read_text(encoding="utf-8"))
    n_periods = meta["n_periods"]
    return BinSeriesSet(
        grid=SpatialGrid(**meta["grid"]),
        active_bins=np.asarray(meta["active_bins"], dtype=np.int64),
        t_start=parse_time(meta["t_start"]),
        period_days=meta["period_days"],
        values=_read_matrix(d / "values.csv", float, n_periods),
        raw_event_counts=_read_matrix(d / "counts.csv", int, n_periods).astype(np.int64),
        norm_constant=meta["norm_constant"],
        period_offset=meta["period_offset"],
        meta=meta.get("extra", {}),
    )
