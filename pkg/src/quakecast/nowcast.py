"""Two-parameter nowcast filter on the monthly small-earthquake rate, tuned by ROC skill.

The filter smooths the monthly count of small events with an EMA and scales it
by a rate correction ``c(t) ** lam``, where ``c(t)`` is the long-run mean rate
over the training span divided by the recent mean rate (last ``ema_span``
months, current month included), clamped to ``[0.1, 10]``. Eras of poor
small-event detection therefore get boosted; ``lam = 0`` gives the plain EMA.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Sequence

import numpy as np

from ._parallel import worker_count
from .catalog import CatalogEvent, RegionFilter
from .features import MULTIPLICITY_THRESHOLD, ema

CORRECTION_CLAMP = (0.1, 10.0)
DEFAULT_LARGE_MAG = 6.0
DEFAULT_HORIZON_MONTHS = 36


class SkillError(ValueError):
    pass


@dataclass(frozen=True)
class NowcastFilterParams:
    ema_span: int
    correction_weight: float = 0.0

    def __post_init__(self):
        if self.ema_span < 1:
            raise ValueError("ema_span must be >= 1")
        if not 0.0 <= self.correction_weight <= 1.0:
            raise ValueError("correction_weight must lie in [0, 1]")


@dataclass
class RocCurve:
    thresholds: np.ndarray
    true_positive_rates: np.ndarray
    false_positive_rates: np.ndarray
    skill: float


def month_index(t: datetime, origin: datetime) -> int:
    return (t.year - origin.year) * 12 + (t.month - origin.month)


def month_starts(t_start: datetime, t_end: datetime) -> list[datetime]:
    """Calendar month starts from the month of ``t_start`` up to (excluding) ``t_end``."""
    out = []
    y, m = t_start.year, t_start.month
    while True:
        s = datetime(y, m, 1, tzinfo=timezone.utc)
        if s >= t_end:
            break
        out.append(s)
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    return out


def monthly_small_rate(
    events: Sequence[CatalogEvent],
    region: RegionFilter,
    mag_threshold: float = MULTIPLICITY_THRESHOLD,
) -> tuple[list[datetime], np.ndarray]:
    months = month_starts(region.t_start, region.t_end)
    counts = np.zeros(len(months), dtype=np.int64)
    origin = months[0] if months else region.t_start
    for e in events:
        if e.magnitude > mag_threshold and region.contains(e):
            k = month_index(e.time, origin)
            if 0 <= k < len(months):
                counts[k] += 1
    return months, counts


def large_event_labels(
    events: Sequence[CatalogEvent],
    months: Sequence[datetime],
    large_mag: float = DEFAULT_LARGE_MAG,
    horizon: int = DEFAULT_HORIZON_MONTHS,
) -> np.ndarray:
    """1 for months followed by an event of magnitude >= ``large_mag`` within the next ``horizon`` months."""
    n = len(months)
    hit = np.zeros(n + horizon + 1, dtype=bool)
    if n:
        for e in events:
            if e.magnitude >= large_mag:
                k = month_index(e.time, months[0])
                if 0 <= k < len(hit):
                    hit[k] = True
    c = np.concatenate([[0], np.cumsum(hit)])
    t = np.arange(n)
    # events in months t+1 .. t+horizon
    return (c[np.minimum(t + horizon + 1, len(hit))] - c[t + 1] > 0).astype(np.int64)


def rate_correction(rate: np.ndarray, span: int, train_end: int | None = None) -> np.ndarray:
    rate = np.asarray(rate, dtype=float)
    global_mean = rate[:train_end].mean()
    c = np.concatenate([[0.0], np.cumsum(rate)])
    t = np.arange(len(rate))
    lo = np.maximum(0, t - span + 1)
    trailing = (c[t + 1] - c[lo]) / (t + 1 - lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(trailing > 0, global_mean / np.where(trailing > 0, trailing, 1.0), CORRECTION_CLAMP[1])
    return np.clip(corr, *CORRECTION_CLAMP)


def nowcast_curve(rate: Sequence[float], params: NowcastFilterParams, train_end: int | None = None) -> np.ndarray:
    rate = np.asarray(rate, dtype=float)
    if len(rate) <= params.ema_span:
        raise ValueError(f"series of length {len(rate)} must exceed ema_span {params.ema_span}")
    smooth = ema(rate, params.ema_span)
    if params.correction_weight == 0.0:
        return smooth
    return smooth * rate_correction(rate, params.ema_span, train_end) ** params.correction_weight


def roc_skill(nowcast: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC curve of the rule "alarm iff nowcast >= threshold", swept over distinct nowcast values.

    Skill is the trapezoidal area under (FPR, TPR). The curve starts at an
    infinite threshold, (0, 0), and ends at the smallest value, (1, 1).
    """
    x = np.asarray(nowcast, dtype=float)
    y = np.asarray(labels).astype(bool)
    if x.shape != y.shape:
        raise ValueError("nowcast and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SkillError("labels are all one class; ROC skill undefined")
    order = np.argsort(-x, kind="stable")
    xs, ys = x[order], y[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    # last index of each run of equal values: alarms include every tie
    last = np.flatnonzero(np.r_[xs[1:] != xs[:-1], True])
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    skill = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(np.r_[np.inf, xs[last]], tpr, fpr, skill)


@dataclass
class FilterSearch:
    best: NowcastFilterParams
    best_skill: float
    spans: list[int]
    weights: list[float]
    surface: np.ndarray  # [span, weight]


def optimize_filter(
    rate: Sequence[float],
    labels: Sequence[int],
    spans: Sequence[int],
    weights: Sequence[float] = (0.0,),
    train_end: int | None = None,
) -> FilterSearch:
    """Exhaustive grid search maximizing ROC skill over the first ``train_end`` months.

    Ties go to the smaller span, then the smaller weight.
    """
    spans = sorted(int(s) for s in spans)
    weights = sorted(float(w) for w in weights)
    if not spans or not weights:
        raise ValueError("parameter grid is empty")
    labels = np.asarray(labels)
    end = len(labels) if train_end is None else train_end

    def score(point):
        s, w = point
        curve = nowcast_curve(rate, NowcastFilterParams(s, w), train_end)
        return roc_skill(curve[:end], labels[:end]).skill

    grid = list(itertools.product(spans, weights))
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            skills = list(pool.map(score, grid))
    else:
        skills = [score(p) for p in grid]
    surface = np.array(skills).reshape(len(spans), len(weights))
    best_k = 0
    for k, s in enumerate(skills):
        if s > skills[best_k]:
            best_k = k
    s, w = grid[best_k]
    return FilterSearch(NowcastFilterParams(s, w), skills[best_k], spans, weights, surface)
