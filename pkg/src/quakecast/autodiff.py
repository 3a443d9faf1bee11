"""Reverse-mode kernels for the pattern models.

Every forward function returns ``(output, cache)`` and has a matching
``*_backward(grad_output, cache)`` returning the input gradient and the
parameter gradients. Leading batch axes are allowed everywhere. All math is
float64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy import sparse

LEAKY_SLOPE = 0.2
LSTM_GATES = ("i", "f", "o", "g")


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


# -- initialisation ------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


# -- activations ---------------------------------------------------------------


def _act(name, x):
    if name == "identity":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    if name == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, x, y):
    """Derivative of the activation given pre-activation ``x`` and output ``y``."""
    if name == "identity":
        return np.ones_like(x)
    if name == "relu":
        return (x > 0).astype(float)
    if name == "tanh":
        return 1.0 - y * y
    if name == "elu":
        return np.where(x > 0, 1.0, y + 1.0)
    if name == "sigmoid":
        return y * (1.0 - y)
    raise ValueError(f"unknown activation {name!r}")


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- dense ---------------------------------------------------------------------


def dense_forward(x, W, b, activation="identity"):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: input {x.shape} vs weights {W.shape}, bias {b.shape}")
    pre = x @ W + b
    y = _act(activation, pre)
    return y, (x, W, pre, y, activation)


def dense_backward(grad_y, cache):
    x, W, pre, y, activation = cache
    g = grad_y * _act_grad(activation, pre, y)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return g @ W.T, x2.T @ g2, g2.sum(axis=0)


# -- LSTM ----------------------------------------------------------------------


def init_lstm(rng, in_dim, hidden):
    params = {}
    for gate in LSTM_GATES:
        params[f"W_{gate}"] = glorot_uniform(rng, in_dim + hidden, hidden)
    for gate in LSTM_GATES:
        params[f"b_{gate}"] = np.zeros(hidden)
    return params


def _stacked(params):
    W = np.concatenate([params[f"W_{g}"] for g in LSTM_GATES], axis=1)
    b = np.concatenate([params[f"b_{g}"] for g in LSTM_GATES])
    return W, b


def lstm_step(x_t, h_prev, c_prev, params, _stacked_wb=None):
    """One LSTM step with the canonical gates.

    ``i, f, o = sigmoid([x, h] W_* + b_*)``, ``g = tanh(...)``,
    ``c = f*c_prev + i*g``, ``h = o * tanh(c)``.
    """
    W, b = _stacked_wb if _stacked_wb is not None else _stacked(params)
    H = h_prev.shape[-1]
    if x_t.shape[-1] + H != W.shape[0]:
        raise ShapeError(f"lstm: input width {x_t.shape[-1]} + hidden {H} != {W.shape[0]}")
    xh = np.concatenate([x_t, h_prev], axis=-1)
    z = xh @ W + b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    o = sigmoid(z[..., 2 * H : 3 * H])
    g = np.tanh(z[..., 3 * H :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (xh, c_prev, i, f, o, g, tc)


def lstm_step_backward(dh, dc, cache, W):
    xh, c_prev, i, f, o, g, tc = cache
    H = dh.shape[-1]
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g * g)], axis=-1
    )
    dxh = dz @ W.T
    dW = xh.reshape(-1, xh.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
    db = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
    n_in = xh.shape[-1] - H
    return dxh[..., :n_in], dxh[..., n_in:], dc_prev, dW, db


def lstm_forward(xs, params, h0=None, c0=None):
    """Unroll over axis -2 of ``xs`` (``[..., T, in]``); returns all hidden states ``[..., T, H]``."""
    xs = np.asarray(xs, dtype=float)
    H = params["b_i"].shape[0]
    batch = xs.shape[:-2]
    h = np.zeros(batch + (H,)) if h0 is None else h0
    c = np.zeros(batch + (H,)) if c0 is None else c0
    Wb = _stacked(params)
    hs, caches = [], []
    for t in range(xs.shape[-2]):
        h, c, cache = lstm_step(xs[..., t, :], h, c, params, Wb)
        hs.append(h)
        caches.append(cache)
    return np.stack(hs, axis=-2), (caches, Wb, xs.shape)


def lstm_backward(grad_hs, cache):
    """Backpropagation through time; ``grad_hs`` has the shape of the hidden-state output."""
    caches, (W, _), x_shape = cache
    H = grad_hs.shape[-1]
    dxs = np.zeros(x_shape)
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[1])
    dh = np.zeros(grad_hs.shape[:-2] + (H,))
    dc = np.zeros_like(dh)
    for t in reversed(range(len(caches))):
        dx, dh, dc, dW_t, db_t = lstm_step_backward(dh + grad_hs[..., t, :], dc, caches[t], W)
        dxs[..., t, :] = dx
        dW += dW_t
        db += db_t
    grads = {}
    for k, gate in enumerate(LSTM_GATES):
        grads[f"W_{gate}"] = dW[:, k * H : (k + 1) * H]
        grads[f"b_{gate}"] = db[k * H : (k + 1) * H]
    return dxs, grads


# -- graph attention -----------------------------------------------------------


@dataclass
class AttentionIndex:
    """Neighbourhood structure for attention: one entry per (centre, member) pair, sorted by centre."""

    n_nodes: int
    centre: np.ndarray
    member: np.ndarray
    starts: np.ndarray
    centre_scatter: sparse.csr_matrix = field(repr=False)
    member_scatter: sparse.csr_matrix = field(repr=False)

    @classmethod
    def from_edges(cls, n_nodes, edges, self_loops=True):
        pairs = set()
        for i, j in edges:
            if i == j:
                continue
            pairs.add((int(i), int(j)))
            pairs.add((int(j), int(i)))
        if self_loops:
            pairs.update((i, i) for i in range(n_nodes))
        arr = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
        centre, member = arr[:, 0], arr[:, 1]
        counts = np.bincount(centre, minlength=n_nodes)
        if np.any(counts == 0):
            raise ShapeError(f"node {int(np.argmin(counts))} has an empty attention neighbourhood")
        starts = np.r_[0, np.cumsum(counts)[:-1]]
        E = len(centre)
        ones = np.ones(E)
        cs = sparse.csr_matrix((ones, (centre, np.arange(E))), shape=(n_nodes, E))
        ms = sparse.csr_matrix((ones, (member, np.arange(E))), shape=(n_nodes, E))
        return cls(n_nodes, centre, member, starts, cs, ms)

    @classmethod
    def from_graph(cls, graph, self_loops=True):
        return cls.from_edges(graph.n_nodes, graph.edges, self_loops)


def _scatter(matrix, vals):
    """Sum ``vals[..., E, k]`` into nodes with a ``[N, E]`` incidence matrix."""
    v = np.moveaxis(vals, -2, 0)
    out = matrix @ v.reshape(v.shape[0], -1)
    return np.moveaxis(out.reshape((matrix.shape[0],) + v.shape[1:]), 0, -2)


def _scatter_scores(matrix, vals):
    """Like :func:`_scatter` for edge scores ``[..., E]`` -> ``[..., N]``."""
    flat = vals.reshape(-1, vals.shape[-1])
    return (matrix @ flat.T).T.reshape(vals.shape[:-1] + (matrix.shape[0],))


def gat_forward(h, W, a, index: AttentionIndex, slope=LEAKY_SLOPE, activation="elu"):
    """Single-head graph attention.

    ``alpha_ij = softmax_j(LeakyReLU(a . [W h_i || W h_j]))`` over the
    neighbourhood of ``i`` (itself included when the index has self loops), and
    ``h'_i = act(sum_j alpha_ij W h_j)``. Returns ``(h', alpha, cache)`` with
    ``alpha`` aligned to ``index.centre`` / ``index.member``.
    """
    h = np.asarray(h, dtype=float)
    d_out = W.shape[1]
    if h.shape[-2] != index.n_nodes:
        raise ShapeError(f"gat: {h.shape[-2]} node rows for a graph of {index.n_nodes} nodes")
    if h.shape[-1] != W.shape[0] or a.shape != (2 * d_out,):
        raise ShapeError(f"gat: features {h.shape}, W {W.shape}, a {a.shape}")
    z = h @ W
    s_centre = z @ a[:d_out]
    s_member = z @ a[d_out:]
    e = s_centre[..., index.centre] + s_member[..., index.member]
    lr = np.where(e > 0, e, slope * e)
    top = np.maximum.reduceat(lr, index.starts, axis=-1)
    ex = np.exp(lr - top[..., index.centre])
    den = np.add.reduceat(ex, index.starts, axis=-1)
    alpha = ex / den[..., index.centre]
    z_member = z[..., index.member, :]
    agg = _scatter(index.centre_scatter, alpha[..., None] * z_member)
    out = _act(activation, agg)
    cache = (h, W, a, index, slope, activation, z, z_member, e, alpha, agg, out)
    return out, alpha, cache


def gat_backward(grad_out, cache):
    h, W, a, index, slope, activation, z, z_member, e, alpha, agg, out = cache
    d_out = W.shape[1]
    g_agg = grad_out * _act_grad(activation, agg, out)
    g_msg = g_agg[..., index.centre, :]
    g_alpha = np.sum(g_msg * z_member, axis=-1)
    g_z = _scatter(index.member_scatter, alpha[..., None] * g_msg)
    weighted = np.add.reduceat(alpha * g_alpha, index.starts, axis=-1)
    g_lr = alpha * (g_alpha - weighted[..., index.centre])
    g_e = g_lr * np.where(e > 0, 1.0, slope)
    g_sc = _scatter_scores(index.centre_scatter, g_e)
    g_sm = _scatter_scores(index.member_scatter, g_e)
    g_z = g_z + g_sc[..., None] * a[:d_out] + g_sm[..., None] * a[d_out:]
    zf = z.reshape(-1, d_out)
    g_a = np.concatenate([g_sc.reshape(-1) @ zf, g_sm.reshape(-1) @ zf])
    g_W = h.reshape(-1, h.shape[-1]).T @ g_z.reshape(-1, d_out)
    g_h = g_z @ W.T
    return g_h, g_W, g_a


# -- loss and optimiser --------------------------------------------------------


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("mse of empty input")
    r = pred - target
    return float(np.mean(r * r)), 2.0 * r / r.size


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: Mapping[str, np.ndarray], state: AdamState) -> tuple[dict, AdamState]:
    """Bias-corrected Adam update of every block that has a gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter block {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- finite differences --------------------------------------------------------


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f()
        flat[k] = old - h
        down = f()
        flat[k] = old
        gflat[k] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


# -- serialization -------------------------------------------------------------


def save_params(params: Mapping[str, np.ndarray], directory: str | Path, manifest: dict | None = None) -> str:
    """Write ``params.bin`` (little-endian float64 blocks) and ``manifest.json``; returns the sha256 of the blob."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blocks, offset, blob = [], 0, bytearray()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob += arr.tobytes()
        offset += arr.size
    digest = hashlib.sha256(bytes(blob)).hexdigest()
    (d / "params.bin").write_bytes(bytes(blob))
    doc = dict(manifest or {})
    doc["blocks"] = blocks
    doc["params_sha256"] = digest
    (d / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return digest


def load_params(directory: str | Path) -> tuple[dict, dict]:
    d = Path(directory)
    doc = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    flat = np.frombuffer((d / "params.bin").read_bytes(), dtype="<f8")
    params = {}
    for blk in doc["blocks"]:
        size = int(np.prod(blk["shape"], dtype=np.int64))
        params[blk["name"]] = flat[blk["offset"] : blk["offset"] + size].reshape(blk["shape"]).astype(float)
    return params, doc
