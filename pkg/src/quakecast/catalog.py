"""Catalog ingestion: parse USGS-style CSV exports and filter them to a study region."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("time", "latitude", "longitude", "depth", "mag")


class CatalogError(ValueError):
    pass


@dataclass(frozen=True, order=False)
class CatalogEvent:
    time: datetime
    latitude: float
    longitude: float
    depth: float
    magnitude: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise CatalogError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise CatalogError(f"longitude out of range: {self.longitude}")
        if not self.magnitude >= 0.0:
            raise CatalogError(f"magnitude must be >= 0, got {self.magnitude}")


@dataclass(frozen=True)
class RegionFilter:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    t_start: datetime
    t_end: datetime

    def __post_init__(self):
        problems = []
        if not self.lat_min < self.lat_max:
            problems.append("lat_min must be < lat_max")
        if not self.lon_min < self.lon_max:
            problems.append("lon_min must be < lon_max")
        if not self.t_start < self.t_end:
            problems.append("t_start must be < t_end")
        if problems:
            raise CatalogError("; ".join(problems))

    def contains(self, event: CatalogEvent) -> bool:
        return (
            self.lat_min <= event.latitude < self.lat_max
            and self.lon_min <= event.longitude < self.lon_max
            and self.t_start <= event.time < self.t_end
        )


@dataclass
class ParseStats:
    total_rows: int = 0
    parsed: int = 0
    skipped: int = 0
    clamped_magnitudes: int = 0


def parse_time(text: str) -> datetime:
    """Parse an ISO-8601 timestamp to an aware UTC datetime, truncated to whole seconds.

    Naive timestamps are taken to be UTC, as in USGS exports.
    """
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    t = datetime.fromisoformat(text)
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc).replace(microsecond=0)


def format_time(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_catalog(source: TextIO | str) -> tuple[list[CatalogEvent], ParseStats]:
    """Read a comma-separated catalog with a USGS export header.

    Accepts an open text stream or the text itself. Rows that fail to parse are
    skipped and counted; negative magnitudes are clamped to 0 and counted.
    Returns events sorted by time (stable for equal timestamps) and the counts.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source, skipinitialspace=True)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CatalogError("catalog is empty: no header row") from None
    index = {name: i for i, name in enumerate(header)}
    for col in REQUIRED_COLUMNS:
        if col not in index:
            raise CatalogError(f"missing required column: {col!r}")
    cols = [index[c] for c in REQUIRED_COLUMNS]

    stats = ParseStats()
    events = []
    for row in reader:
        if not row or all(not cell.strip() for cell in row):
            continue
        stats.total_rows += 1
        try:
            t_s, lat_s, lon_s, dep_s, mag_s = (row[i] for i in cols)
            t = parse_time(t_s)
            lat, lon, depth, mag = (float(s) for s in (lat_s, lon_s, dep_s, mag_s))
            if not all(math.isfinite(v) for v in (lat, lon, depth, mag)):
                raise ValueError("non-finite field")
            if mag < 0.0:
                mag = 0.0
                stats.clamped_magnitudes += 1
            events.append(CatalogEvent(t, lat, lon, depth, mag))
        except (ValueError, IndexError) as exc:
            stats.skipped += 1
            logger.debug("skipping row %d: %s", stats.total_rows, exc)
    events.sort(key=lambda e: e.time)
    stats.parsed = len(events)
    if stats.skipped:
        logger.info("parsed %d events, skipped %d rows", stats.parsed, stats.skipped)
    return events, stats


def read_catalog(path: str | Path) -> tuple[list[CatalogEvent], ParseStats]:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_catalog(fh)


def write_catalog(events: Iterable[CatalogEvent], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS)
        for e in events:
            w.writerow([format_time(e.time), repr(e.latitude), repr(e.longitude), repr(e.depth), repr(e.magnitude)])


def filter_region(events: Iterable[CatalogEvent], region: RegionFilter) -> list[CatalogEvent]:
    # half-open on every upper edge so bin boundaries never double-assign
    return [e for e in events if region.contains(e)]


@dataclass(frozen=True)
class EventArrays:
    """Columnar view of an event list, used by the vectorized binning code."""

    seconds: np.ndarray  # int64 POSIX seconds
    latitude: np.ndarray
    longitude: np.ndarray
    depth: np.ndarray
    magnitude: np.ndarray

    def __len__(self):
        return len(self.seconds)


def to_arrays(events: Iterable[CatalogEvent]) -> EventArrays:
    events = list(events)
    return EventArrays(
        seconds=np.array([int(e.time.timestamp()) for e in events], dtype=np.int64),
        latitude=np.array([e.latitude for e in events], dtype=float),
        longitude=np.array([e.longitude for e in events], dtype=float),
        depth=np.array([e.depth for e in events], dtype=float),
        magnitude=np.array([e.magnitude for e in events], dtype=float),
    )
