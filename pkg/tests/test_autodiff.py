import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcheck import dense_error, gat_error, gnncoder_error, lstm_error
from quakecast import autodiff as ad
from quakecast.models import Architecture, init_params, lstm_backward, lstm_forward


@pytest.mark.parametrize("activation", ["identity", "relu", "tanh", "elu", "sigmoid"])
@pytest.mark.parametrize("seed", range(3))
def test_dense_gradients(activation, seed):
    tol = 1e-6 if activation == "identity" else 1e-4
    assert dense_error(seed, activation) < tol


@pytest.mark.parametrize("seed", range(3))
def test_lstm_gradients(seed):
    assert lstm_error(seed, T=20) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_gat_gradients(seed):
    assert gat_error(seed) < 1e-4


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_gnncoder_stack_gradients(layers):
    assert gnncoder_error(0, layers=layers) < 1e-4


def test_gnncoder_with_streams_gradients():
    assert gnncoder_error(1, n_streams=2) < 1e-4


def test_lstm_model_gradients():
    rng = np.random.default_rng(5)
    arch = Architecture(kind="multifoundation", pattern="lstm", lookback=6, n_features=2, hidden=4, streams=("a",))
    params = init_params(arch, 5)
    X = rng.normal(size=(3, 6, 2))
    st_ = rng.normal(size=(3, 1))
    R = rng.normal(size=3)
    _, cache = lstm_forward(X, params, arch, st_)
    g = lstm_backward(R, cache, arch)
    for name, p in params.items():
        num = ad.numerical_gradient(lambda: float(np.sum(lstm_forward(X, params, arch, st_)[0] * R)), p)
        assert ad.max_relative_error(g[name], num) < 1e-4, name


def test_relu_subgradient_zero_at_kink():
    y, cache = ad.dense_forward(np.zeros((1, 2)), np.eye(2), np.zeros(2), "relu")
    gx, _, _ = ad.dense_backward(np.ones((1, 2)), cache)
    np.testing.assert_array_equal(gx, 0.0)


def test_sigmoid_extremes_finite():
    s = ad.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_dense_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.dense_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


# -- attention -------------------------------------------------------------------


def test_attention_rows_sum_to_one(rng):
    index = ad.AttentionIndex.from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)])
    _, alpha, _ = ad.gat_forward(rng.normal(size=(6, 3)), rng.normal(size=(3, 4)), rng.normal(size=8), index)
    sums = np.bincount(index.centre, weights=alpha, minlength=6)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
    assert np.all(alpha > 0)


def test_attention_only_over_neighbours(rng):
    # changing a non-neighbour's features leaves node 0 unchanged
    index = ad.AttentionIndex.from_edges(4, [(0, 1), (2, 3), (1, 2)])
    h = rng.normal(size=(4, 3))
    W, a = rng.normal(size=(3, 3)), rng.normal(size=6)
    out, _, _ = ad.gat_forward(h, W, a, index)
    h2 = h.copy()
    h2[3] += 5.0
    out2, _, _ = ad.gat_forward(h2, W, a, index)
    np.testing.assert_array_equal(out[0], out2[0])
    assert not np.allclose(out[2], out2[2])


def test_attention_matches_dense_reference(rng):
    n = 5
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]
    index = ad.AttentionIndex.from_edges(n, edges)
    h, W, a = rng.normal(size=(n, 3)), rng.normal(size=(3, 2)), rng.normal(size=4)
    out, _, _ = ad.gat_forward(h, W, a, index)
    adj = np.eye(n, dtype=bool)
    for i, j in edges:
        adj[i, j] = adj[j, i] = True
    z = h @ W
    ref = np.zeros((n, 2))
    for i in range(n):
        nb = np.flatnonzero(adj[i])
        e = np.array([a @ np.r_[z[i], z[j]] for j in nb])
        e = np.where(e > 0, e, 0.2 * e)
        w = np.exp(e - e.max())
        w /= w.sum()
        agg = (w[:, None] * z[nb]).sum(axis=0)
        ref[i] = np.where(agg > 0, agg, np.expm1(agg))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_isolated_node_without_self_loops_rejected():
    with pytest.raises(ad.ShapeError):
        ad.AttentionIndex.from_edges(3, [(0, 1)], self_loops=False)


# -- loss, optimiser, init -------------------------------------------------------


def test_mse_loss_gradient(rng):
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    loss, g = ad.mse_loss(p, t)
    assert loss == pytest.approx(np.mean((p - t) ** 2))
    num = ad.numerical_gradient(lambda: ad.mse_loss(p, t)[0], p)
    assert ad.max_relative_error(g, num) < 1e-6


def test_adam_matches_hand_formula():
    params = {"w": np.array([1.0, -2.0])}
    state = ad.AdamState(lr=0.1)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.2])
    ad.adam_step(params, {"w": g1}, state)
    ad.adam_step(params, {"w": g2}, state)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    w1 = np.array([1.0, -2.0]) - 0.1 * (0.1 * g1 / 0.1) / (np.sqrt(0.001 * g1**2 / 0.001) + 1e-8)
    expected = w1 - 0.1 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    np.testing.assert_allclose(params["w"], expected, rtol=1e-14)
    assert state.step == 2


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([3.0])}
    ad.adam_step(params, {"w": np.array([42.0])}, ad.AdamState(lr=1e-3))
    assert params["w"][0] == pytest.approx(3.0 - 1e-3, abs=1e-10)


def test_adam_rejects_nonfinite_naming_block():
    with pytest.raises(ad.NonFiniteGradient, match="'bad'"):
        ad.adam_step({"bad": np.zeros(2)}, {"bad": np.array([np.nan, 0.0])}, ad.AdamState())


def test_glorot_bounds_and_determinism():
    a = ad.glorot_uniform(np.random.default_rng(0), 30, 20)
    b = ad.glorot_uniform(np.random.default_rng(0), 30, 20)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a).max() <= np.sqrt(6 / 50)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_relative_error_symmetric_and_bounded(x, y):
    e = ad.max_relative_error([x], [y])
    assert e == ad.max_relative_error([y], [x])
    assert 0.0 <= e <= 2.0


def test_params_round_trip(tmp_path, rng):
    params = {"b": rng.normal(size=3), "a": rng.normal(size=(2, 4)), "s": np.array(1.5)}
    digest = ad.save_params(params, tmp_path, {"note": "x"})
    back, doc = ad.load_params(tmp_path)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    assert doc["params_sha256"] == digest and doc["note"] == "x"
    assert ad.save_params(back, tmp_path / "again") == digest
