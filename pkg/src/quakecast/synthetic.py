"""Deterministic synthetic data: the bundled mini-catalog and AR(1) panels."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from importlib import resources

import numpy as np

from .catalog import CatalogEvent, read_catalog
from .gridding import BinSeriesSet, SpatialGrid, normalize

MINI_REGION = dict(lat_min=33.0, lat_max=33.4, lon_min=-116.5, lon_max=-116.0)
MINI_T_START = datetime(2000, 1, 1, tzinfo=timezone.utc)
MINI_PERIODS = 60
MINI_T_END = MINI_T_START + timedelta(days=14 * MINI_PERIODS)


def mini_catalog_events(seed: int = 7, n_background: int = 150, n_sequences: int = 5) -> list[CatalogEvent]:
    """~200 events over a 4 x 5 grid of 0.1 degree bins and 60 biweekly periods.

    Background events fall preferentially in a few hot bins; a handful of
    mainshock-aftershock sequences add clustered, larger events so the data
    exercises multiplicity counts and the nowcast labels.
    """
    rng = np.random.default_rng(seed)
    n_rows, n_cols = 4, 5
    weights = rng.gamma(0.7, size=n_rows * n_cols)
    weights /= weights.sum()
    span = (MINI_T_END - MINI_T_START).total_seconds()

    def place(bin_index):
        r, c = divmod(int(bin_index), n_cols)
        lat = MINI_REGION["lat_min"] + 0.1 * (r + rng.uniform(0.02, 0.98))
        lon = MINI_REGION["lon_min"] + 0.1 * (c + rng.uniform(0.02, 0.98))
        return round(lat, 4), round(lon, 4)

    def magnitude(m_min=0.8, b=0.6):
        return round(m_min + rng.exponential(1.0 / (b * np.log(10))), 2)

    events = []
    for b in rng.choice(n_rows * n_cols, size=n_background, p=weights):
        t = MINI_T_START + timedelta(seconds=int(rng.uniform(0, span)))
        lat, lon = place(b)
        events.append(CatalogEvent(t, lat, lon, round(rng.uniform(1, 15), 2), magnitude()))
    for _ in range(n_sequences):
        b = rng.choice(n_rows * n_cols, p=weights)
        t0 = MINI_T_START + timedelta(seconds=int(rng.uniform(0, span * 0.95)))
        lat, lon = place(b)
        events.append(CatalogEvent(t0, lat, lon, round(rng.uniform(3, 12), 2), round(rng.uniform(3.4, 4.6), 2)))
        for _ in range(rng.integers(4, 12)):
            dt = timedelta(seconds=int(rng.exponential(10 * 86400)))
            if t0 + dt >= MINI_T_END:
                continue
            alat, alon = place(b)
            events.append(CatalogEvent(t0 + dt, alat, alon, round(rng.uniform(2, 12), 2), magnitude(1.0)))
    events.sort(key=lambda e: e.time)
    return events


def mini_catalog_path():
    return resources.files("quakecast") / "data" / "mini_catalog.csv"


def load_mini_catalog() -> list[CatalogEvent]:
    with resources.as_file(mini_catalog_path()) as p:
        events, _ = read_catalog(p)
    return events


def ar1_panel(
    n_bins: int = 100,
    n_periods: int = 500,
    rho: float = 0.8,
    seed: int = 0,
    n_cols: int = 10,
    burn_in: int = 200,
) -> BinSeriesSet:
    """Independent zero-mean AR(1) series on a grid of bins, normalized to max-abs 1.

    One-step persistence has expected NSE ``2*rho - 1``; the optimal linear
    predictor ``rho * x[t-1]`` reaches ``rho**2``.
    """
    rng = np.random.default_rng(seed)
    x = np.zeros((n_bins, n_periods + burn_in))
    noise = rng.normal(size=x.shape) * np.sqrt(1.0 - rho * rho)
    x[:, 0] = rng.normal(size=n_bins)
    for t in range(1, x.shape[1]):
        x[:, t] = rho * x[:, t - 1] + noise[:, t]
    x = x[:, burn_in:]
    n_rows = -(-n_bins // n_cols)
    grid = SpatialGrid(0.0, 0.0, 0.1, n_rows, n_cols)
    raw = BinSeriesSet(
        grid=grid,
        active_bins=np.arange(n_bins, dtype=np.int64),
        t_start=datetime(2000, 1, 1, tzinfo=timezone.utc),
        period_days=14,
        values=x,
        raw_event_counts=np.zeros_like(x, dtype=np.int64),
    )
    return normalize(raw)
