from dataclasses import replace

import numpy as np
import pytest

from quakecast import autodiff as ad
from quakecast.features import FeatureSpec, make_windows
from quakecast.graph import build_bin_graph
from quakecast.models import (
    Architecture,
    CoverageError,
    ForecastStream,
    TrainConfig,
    TrainingDiverged,
    bundle_digest,
    load_bundle,
    load_stream,
    multifoundation_train,
    new_bundle,
    predict,
    save_bundle,
    save_stream,
    train,
)
from quakecast.synthetic import ar1_panel


@pytest.fixture(scope="module")
def panel():
    s = ar1_panel(n_bins=9, n_periods=80, n_cols=3, seed=2)
    train_set, test_set = make_windows(s, FeatureSpec(), 6, 64)
    return s, train_set, test_set, build_bin_graph(s.grid, s.active_bins, 0.15)


def arch(kind, **kw):
    return Architecture(kind=kind, lookback=6, hidden=8, gat_width=8, **kw)


def test_persistence_predicts_last_value(panel):
    s, _, test_set, _ = panel
    bundle, trace = train(new_bundle(arch("persistence")), test_set)
    stream = predict(bundle, test_set)
    assert trace == []
    for k in range(len(test_set)):
        b, t = stream.bins[k], stream.periods[k]
        assert stream.values[k] == s.values[s.row_of(b), t - 1]


def test_mean_baseline_uses_training_span(panel):
    s, train_set, test_set, _ = panel
    bundle, _ = train(new_bundle(arch("mean")), train_set)
    stream = predict(bundle, test_set)
    expected = s.values[:, :64].mean(axis=1)
    np.testing.assert_allclose(stream.lookup(s.active_bins, np.full(9, 70)), expected, rtol=1e-15)


@pytest.mark.parametrize("kind", ["lstm", "gnncoder"])
def test_training_reduces_loss(panel, kind):
    _, train_set, _, graph = panel
    bundle, trace = train(new_bundle(arch(kind), 0), train_set, graph, TrainConfig(epochs=8, lr=5e-3, seed=0))
    assert len(trace) == 8
    assert bundle.provenance["final_train_loss"] < bundle.provenance["initial_train_loss"]


@pytest.mark.parametrize("kind", ["lstm", "gnncoder"])
def test_training_is_deterministic(panel, kind, tmp_path):
    _, train_set, _, graph = panel
    digests = []
    for k in range(2):
        b, _ = train(new_bundle(arch(kind), 3), train_set, graph, TrainConfig(epochs=2, seed=3))
        digests.append(save_bundle(b, tmp_path / str(k)))
    assert digests[0] == digests[1] == bundle_digest(tmp_path / "0")


def test_seed_changes_result(panel):
    _, train_set, _, _ = panel
    a, _ = train(new_bundle(arch("lstm"), 0), train_set, None, TrainConfig(epochs=1, seed=0))
    b, _ = train(new_bundle(arch("lstm"), 1), train_set, None, TrainConfig(epochs=1, seed=1))
    assert not np.array_equal(a.params["head_W"], b.params["head_W"])


def test_divergence_reported(panel):
    _, train_set, _, _ = panel
    bad = replace(train_set, truth=np.where(train_set.truth > 0.5, np.inf, train_set.truth))
    with pytest.raises(TrainingDiverged) as info:
        train(new_bundle(arch("lstm")), bad, None, TrainConfig(epochs=2))
    assert not np.isfinite(info.value.trace[-1])


def test_gnncoder_needs_graph(panel):
    _, train_set, _, _ = panel
    with pytest.raises(ValueError, match="graph"):
        train(new_bundle(arch("gnncoder")), train_set, None, TrainConfig(epochs=1))


def test_lookback_mismatch_rejected(panel):
    s, _, test_set, _ = panel
    short_train, _ = make_windows(s, FeatureSpec(), 5, 64)
    bundle, _ = train(new_bundle(Architecture(kind="lstm", lookback=5, hidden=4)), short_train, None, TrainConfig(epochs=0))
    with pytest.raises(ad.ShapeError):
        predict(bundle, test_set)


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture(kind="transformer", lookback=4)
    with pytest.raises(ValueError):
        Architecture(kind="gnncoder", lookback=4, gat_layers=4)
    with pytest.raises(ValueError):
        Architecture(kind="multifoundation", lookback=4, pattern="tcn")


def test_multifoundation_without_streams_is_plain_model(panel):
    _, train_set, test_set, graph = panel
    cfg = TrainConfig(epochs=2, seed=4)
    plain, _ = train(new_bundle(arch("lstm"), 4), train_set, None, cfg)
    combo, _ = multifoundation_train([], train_set, "lstm", None, cfg, hidden=8, gat_width=8)
    np.testing.assert_array_equal(predict(plain, test_set).values, predict(combo, test_set).values)
    gplain, _ = train(new_bundle(arch("gnncoder"), 4), train_set, graph, cfg)
    gcombo, _ = multifoundation_train([], train_set, "gat", graph, cfg, hidden=8, gat_width=8)
    np.testing.assert_array_equal(predict(gplain, test_set, graph).values, predict(gcombo, test_set, graph).values)


def test_multifoundation_rejects_coverage_gap(panel):
    _, train_set, _, _ = panel
    partial = ForecastStream("partial", train_set.sample_bins()[:-1], train_set.global_periods()[:-1], np.zeros(len(train_set) - 1))
    with pytest.raises(CoverageError, match="missing 1 pairs"):
        multifoundation_train([partial], train_set, "lstm")


def test_bundle_round_trip_predicts_identically(panel, tmp_path):
    _, train_set, test_set, graph = panel
    bundle, _ = train(new_bundle(arch("gnncoder"), 0), train_set, graph, TrainConfig(epochs=1))
    save_bundle(bundle, tmp_path)
    back = load_bundle(tmp_path)
    assert back.arch == bundle.arch
    np.testing.assert_array_equal(predict(back, test_set, graph).values, predict(bundle, test_set, graph).values)


# -- streams ---------------------------------------------------------------------


def test_stream_lookup_and_gaps():
    s = ForecastStream("m", [1, 1, 2], [10, 11, 10], [0.1, 0.2, 0.3])
    np.testing.assert_array_equal(s.lookup([2, 1], [10, 11]), [0.3, 0.2])
    with pytest.raises(CoverageError, match=r"\(bin 2, period 11\)"):
        s.lookup([2], [11])


def test_stream_rejects_duplicates():
    with pytest.raises(ValueError):
        ForecastStream("m", [1, 1], [3, 3], [0.0, 1.0])


def test_stream_round_trip_exact(tmp_path, rng):
    s = ForecastStream("tft", np.arange(50) % 7, np.arange(50), rng.normal(size=50) / 3)
    save_stream(s, tmp_path / "tft.csv")
    back = load_stream(tmp_path / "tft.csv")
    assert back.model == "tft"
    np.testing.assert_array_equal(back.values, s.values)
    np.testing.assert_array_equal(back.periods, s.periods)


def test_stream_header_checked(tmp_path):
    (tmp_path / "x.csv").write_text("a,b,c\n")
    with pytest.raises(ValueError, match="header"):
        load_stream(tmp_path / "x.csv")
