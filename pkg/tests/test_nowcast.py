from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, strategies as st

from quakecast.catalog import CatalogEvent, RegionFilter
from quakecast.features import ema
from quakecast.nowcast import (
    NowcastFilterParams,
    SkillError,
    large_event_labels,
    month_starts,
    monthly_small_rate,
    nowcast_curve,
    optimize_filter,
    rate_correction,
    roc_skill,
)

UTC = timezone.utc
T0 = datetime(1990, 1, 1, tzinfo=UTC)
T1 = datetime(1995, 1, 1, tzinfo=UTC)
REGION = RegionFilter(32.0, 36.0, -120.0, -114.0, T0, T1)


def random_events(seed, n=400):
    rng = np.random.default_rng(seed)
    span = (T1 - T0).total_seconds()
    return [
        CatalogEvent(
            T0 + timedelta(seconds=int(rng.uniform(0, span))),
            float(rng.uniform(32, 36)),
            float(rng.uniform(-120, -114)),
            5.0,
            float(np.round(rng.exponential(1.0), 2)),
        )
        for _ in range(n)
    ]


def test_month_starts():
    months = month_starts(datetime(1999, 11, 15, tzinfo=UTC), datetime(2000, 3, 1, tzinfo=UTC))
    assert [m.strftime("%Y-%m") for m in months] == ["1999-11", "1999-12", "2000-01", "2000-02"]


def test_empty_catalog_rate_is_zero():
    months, rate = monthly_small_rate([], REGION)
    assert len(months) == 60 and not rate.any()


def test_rate_matches_bucketing_oracle():
    events = random_events(0)
    months, rate = monthly_small_rate(events, REGION, 0.5)
    oracle = np.zeros(len(months), dtype=int)
    for e in events:
        if e.magnitude > 0.5:
            oracle[(e.time.year - 1990) * 12 + e.time.month - 1] += 1
    np.testing.assert_array_equal(rate, oracle)


def test_threshold_below_everything_counts_all():
    events = random_events(1)
    _, rate = monthly_small_rate(events, REGION, -1.0)
    assert rate.sum() == len(events)


def test_large_event_labels_oracle():
    events = random_events(2)
    months = month_starts(T0, T1)
    labels = large_event_labels(events, months, large_mag=4.0, horizon=6)
    big = [(e.time.year - 1990) * 12 + e.time.month - 1 for e in events if e.magnitude >= 4.0]
    for t in range(len(months)):
        assert labels[t] == int(any(t < k <= t + 6 for k in big))


# -- filter ----------------------------------------------------------------------


def test_lambda_zero_is_plain_ema(rng):
    rate = rng.poisson(5, size=120).astype(float)
    np.testing.assert_array_equal(nowcast_curve(rate, NowcastFilterParams(12, 0.0)), ema(rate, 12))


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
def test_constant_rate_gives_constant_nowcast(lam):
    np.testing.assert_allclose(nowcast_curve(np.full(80, 4.0), NowcastFilterParams(12, lam)), 4.0, atol=1e-12)


def test_correction_clamps_and_handles_zero_rate():
    rate = np.r_[np.zeros(10), np.full(10, 100.0), np.ones(100)]
    c = rate_correction(rate, 5)
    assert c[:10].tolist() == [10.0] * 10
    assert c.min() >= 0.1 and c.max() <= 10.0


def test_correction_uses_trailing_window(rng):
    rate = rng.poisson(3, size=50).astype(float)
    c = rate_correction(rate, 4, train_end=40)
    g = rate[:40].mean()
    for t in range(50):
        trailing = rate[max(0, t - 3) : t + 1].mean()
        expected = 10.0 if trailing == 0 else np.clip(g / trailing, 0.1, 10.0)
        assert c[t] == pytest.approx(expected, rel=1e-12)


def test_series_must_exceed_span():
    with pytest.raises(ValueError):
        nowcast_curve(np.ones(12), NowcastFilterParams(12))


def test_params_validation():
    with pytest.raises(ValueError):
        NowcastFilterParams(0)
    with pytest.raises(ValueError):
        NowcastFilterParams(6, 1.5)


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_lambda_zero_scales_with_rate(seed, k):
    rate = np.random.default_rng(seed).poisson(4, size=60).astype(float)
    p = NowcastFilterParams(6, 0.0)
    np.testing.assert_allclose(nowcast_curve(rate * k, p), k * nowcast_curve(rate, p), rtol=1e-12, atol=1e-12)


# -- ROC -------------------------------------------------------------------------


def test_hand_trapezoid_six_points():
    curve = roc_skill([0.9, 0.8, 0.7, 0.6, 0.5, 0.4], [1, 0, 1, 1, 0, 0])
    # (0,0) (0,1/3) (1/3,1/3) (1/3,2/3) (1/3,1) (2/3,1) (1,1): area 1/9 + 1/3 + 1/3
    assert curve.skill == pytest.approx(7 / 9, abs=1e-15)
    np.testing.assert_allclose(curve.false_positive_rates, [0, 0, 1 / 3, 1 / 3, 1 / 3, 2 / 3, 1])
    np.testing.assert_allclose(curve.true_positive_rates, [0, 1 / 3, 1 / 3, 2 / 3, 1, 1, 1])


def test_ties_alarm_together():
    curve = roc_skill([0.9, 0.9, 0.5, 0.5, 0.1, 0.1], [1, 0, 1, 0, 1, 0])
    assert curve.skill == pytest.approx(0.5, abs=1e-15)
    assert len(curve.thresholds) == 4


def test_perfect_separator():
    labels = np.array([0, 1, 1, 0, 0, 1, 0])
    assert roc_skill(labels.astype(float), labels).skill == 1.0


def test_random_nowcast_is_chance(rng):
    skill = roc_skill(rng.uniform(size=10_000), rng.integers(0, 2, size=10_000)).skill
    assert abs(skill - 0.5) < 0.05


def test_one_class_labels_rejected():
    with pytest.raises(SkillError):
        roc_skill([0.1, 0.2], [1, 1])


@given(st.lists(st.tuples(st.integers(-500, 500).map(lambda k: k / 100), st.integers(0, 1)), min_size=2, max_size=80))
def test_roc_properties(points):
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    if y.min() == y.max():
        return
    c = roc_skill(x, y)
    assert (c.false_positive_rates[0], c.true_positive_rates[0]) == (0.0, 0.0)
    assert (c.false_positive_rates[-1], c.true_positive_rates[-1]) == (1.0, 1.0)
    assert np.all(np.diff(c.false_positive_rates) >= 0) and np.all(np.diff(c.true_positive_rates) >= 0)
    assert np.all(np.diff(c.thresholds) < 0)
    assert 0.0 <= c.skill <= 1.0
    # strictly monotone transforms leave the skill unchanged
    assert roc_skill(np.exp(x) * 3 + 1, y).skill == c.skill


# -- optimizer -------------------------------------------------------------------


def planted_span_36(seed=0, n=480):
    rng = np.random.default_rng(seed)
    intensity = 5 + 3 * np.sin(np.arange(n) / 25.0) + rng.normal(0, 0.5, size=n).cumsum() * 0.05
    rate = rng.poisson(np.clip(intensity, 0.5, None)).astype(float)
    smooth = ema(rate, 36)
    labels = (smooth > np.median(smooth)).astype(int)
    return rate, labels


def test_optimizer_recovers_planted_span():
    rate, labels = planted_span_36()
    search = optimize_filter(rate, labels, [6, 12, 24, 36, 48, 60], [0.0])
    assert search.best.ema_span == 36
    assert search.best_skill == 1.0
    assert search.surface.shape == (6, 1)


def test_single_point_grid():
    rate, labels = planted_span_36()
    search = optimize_filter(rate, labels, [12], [0.5])
    assert search.best == NowcastFilterParams(12, 0.5)


def test_ties_prefer_smaller_span_then_weight():
    rate = np.full(50, 3.0)
    labels = np.r_[np.zeros(25, int), np.ones(25, int)]
    search = optimize_filter(rate, labels, [12, 6], [1.0, 0.0])
    assert search.best == NowcastFilterParams(6, 0.0)
    assert np.all(search.surface == 0.5)


def test_degenerate_labels_surface():
    with pytest.raises(SkillError):
        optimize_filter(np.arange(30.0), np.zeros(30, int), [6])


def test_threads_do_not_change_result(monkeypatch):
    rate, labels = planted_span_36(1)
    monkeypatch.setenv("QUAKECAST_THREADS", "1")
    a = optimize_filter(rate, labels, [6, 12, 36], [0.0, 0.5, 1.0], 400)
    monkeypatch.setenv("QUAKECAST_THREADS", "4")
    b = optimize_filter(rate, labels, [6, 12, 36], [0.0, 0.5, 1.0], 400)
    np.testing.assert_array_equal(a.surface, b.surface)
    assert a.best == b.best
