"""Pattern models, their training loop and forecast streams.

GNNCoder
    per-node dense encoder over the flattened lookback, ``k`` graph-attention
    layers (each wrapped in a residual connection), dense decoder and a linear
    head emitting one value per node.
LSTM
    LSTM over the lookback; the final hidden state goes through a linear head.
MultiFoundationPattern
    either pattern above, with the target-period forecasts of external
    streams concatenated to the representation the head reads. With zero
    streams it is exactly the plain pattern model.
Baselines
    persistence (last observed value) and per-bin training mean.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .features import SampleSet
from .graph import BinGraph

logger = logging.getLogger(__name__)

KINDS = ("gnncoder", "lstm", "persistence", "mean", "multifoundation")
PATTERNS = ("lstm", "gat")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    kind: str
    lookback: int
    n_features: int = 1
    hidden: int = 32
    gat_width: int = 32
    gat_layers: int = 1
    residual: bool = True
    pattern: str | None = None
    streams: tuple[str, ...] = ()
    feature_spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "multifoundation" and self.pattern not in PATTERNS:
            raise ValueError(f"multifoundation needs pattern in {PATTERNS}")
        if self.uses_graph and self.gat_layers not in (1, 2, 3):
            raise ValueError("gat_layers must be 1, 2 or 3")
        if self.uses_graph and self.residual and self.gat_width != self.hidden:
            raise ValueError("residual GAT layers need gat_width == hidden")
        object.__setattr__(self, "streams", tuple(self.streams))

    @property
    def core(self) -> str:
        """The network family actually run: gnncoder, lstm, persistence or mean."""
        if self.kind == "multifoundation":
            return "gnncoder" if self.pattern == "gat" else "lstm"
        return self.kind

    @property
    def uses_graph(self) -> bool:
        return self.kind == "gnncoder" or (self.kind == "multifoundation" and self.pattern == "gat")

    def to_dict(self):
        d = asdict(self)
        d["streams"] = list(self.streams)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["streams"] = tuple(d.get("streams", ()))
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    graph_batch_periods: int = 8
    lr: float = 1e-3
    seed: int = 0


@dataclass
class ModelBundle:
    arch: Architecture
    params: dict
    provenance: dict = field(default_factory=dict)
    bins: np.ndarray | None = None


# -- networks --------------------------------------------------------------------


def init_params(arch: Architecture, seed: int, n_bins: int | None = None) -> dict:
    rng = np.random.default_rng(seed)
    S = len(arch.streams)
    p = {}
    if arch.core == "gnncoder":
        d_in = arch.lookback * arch.n_features
        p["enc_W"] = ad.glorot_uniform(rng, d_in, arch.hidden)
        p["enc_b"] = np.zeros(arch.hidden)
        width = arch.hidden
        for k in range(arch.gat_layers):
            p[f"gat{k}_W"] = ad.glorot_uniform(rng, width, arch.gat_width)
            p[f"gat{k}_a"] = ad.glorot_uniform(rng, 2 * arch.gat_width, 1, shape=(2 * arch.gat_width,))
            width = arch.gat_width
        p["dec_W"] = ad.glorot_uniform(rng, width, arch.hidden)
        p["dec_b"] = np.zeros(arch.hidden)
        p["head_W"] = ad.glorot_uniform(rng, arch.hidden + S, 1)
        p["head_b"] = np.zeros(1)
    elif arch.core == "lstm":
        for name, value in ad.init_lstm(rng, arch.n_features, arch.hidden).items():
            p[f"lstm_{name}"] = value
        p["head_W"] = ad.glorot_uniform(rng, arch.hidden + S, 1)
        p["head_b"] = np.zeros(1)
    elif arch.core == "mean":
        # filled in by train()
        p["bin_means"] = np.zeros(n_bins or 0)
    return p


def _head(features, streams, params):
    x = features if streams is None or streams.shape[-1] == 0 else np.concatenate([features, streams], axis=-1)
    y, cache = ad.dense_forward(x, params["head_W"], params["head_b"])
    return y[..., 0], cache


def gnncoder_forward(X, params, arch: Architecture, index: ad.AttentionIndex, streams=None):
    """``X``: ``[..., N, L*F]`` flattened lookbacks for every node -> predictions ``[..., N]``."""
    if X.shape[-2] != index.n_nodes:
        raise ad.ShapeError(f"{X.shape[-2]} node inputs for a graph of {index.n_nodes} nodes")
    h, enc = ad.dense_forward(X, params["enc_W"], params["enc_b"], "relu")
    gats = []
    for k in range(arch.gat_layers):
        out, _, cache = ad.gat_forward(h, params[f"gat{k}_W"], params[f"gat{k}_a"], index)
        h = h + out if arch.residual else out
        gats.append(cache)
    d, dec = ad.dense_forward(h, params["dec_W"], params["dec_b"], "relu")
    y, head = _head(d, streams, params)
    return y, (enc, gats, dec, head)


def gnncoder_backward(grad_y, cache, arch: Architecture) -> dict:
    enc, gats, dec, head = cache
    g = {}
    gx, g["head_W"], g["head_b"] = ad.dense_backward(grad_y[..., None], head)
    gh, g["dec_W"], g["dec_b"] = ad.dense_backward(gx[..., : arch.hidden], dec)
    for k in reversed(range(arch.gat_layers)):
        g_in, g[f"gat{k}_W"], g[f"gat{k}_a"] = ad.gat_backward(gh, gats[k])
        gh = gh + g_in if arch.residual else g_in
    _, g["enc_W"], g["enc_b"] = ad.dense_backward(gh, enc)
    return g


def lstm_forward(X, params, arch: Architecture, streams=None):
    """``X``: ``[..., L, F]`` -> predictions ``[...]``."""
    if X.shape[-2] != arch.lookback or X.shape[-1] != arch.n_features:
        raise ad.ShapeError(f"window {X.shape[-2:]} does not match lookback {arch.lookback} x {arch.n_features}")
    lp = {k[5:]: v for k, v in params.items() if k.startswith("lstm_")}
    hs, lcache = ad.lstm_forward(X, lp)
    y, head = _head(hs[..., -1, :], streams, params)
    return y, (lcache, head, hs.shape)


def lstm_backward(grad_y, cache, arch: Architecture) -> dict:
    lcache, head, hs_shape = cache
    g = {}
    gx, g["head_W"], g["head_b"] = ad.dense_backward(grad_y[..., None], head)
    grad_hs = np.zeros(hs_shape)
    grad_hs[..., -1, :] = gx[..., : arch.hidden]
    _, lg = ad.lstm_backward(grad_hs, lcache)
    g.update({f"lstm_{k}": v for k, v in lg.items()})
    return g


# -- forecast streams ----------------------------------------------------------


@dataclass
class ForecastStream:
    model: str
    bins: np.ndarray
    periods: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.int64)
        self.periods = np.asarray(self.periods, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        keys = self.bins * (1 << 32) + self.periods
        if len(np.unique(keys)) != len(keys):
            raise ValueError(f"stream {self.model!r} has duplicate (bin, period) rows")

    def lookup(self, bins, periods) -> np.ndarray:
        """Values at the requested pairs; raises :class:`CoverageError` listing any gaps."""
        bins = np.asarray(bins, dtype=np.int64)
        periods = np.asarray(periods, dtype=np.int64)
        key = self.bins * (1 << 32) + self.periods
        order = np.argsort(key, kind="stable")
        ordered = key[order]
        want = bins * (1 << 32) + periods
        if len(ordered):
            pos = np.minimum(np.searchsorted(ordered, want), len(ordered) - 1)
            ok = ordered[pos] == want
        else:
            pos, ok = np.zeros(len(want), np.int64), np.zeros(len(want), bool)
        if not np.all(ok):
            gaps = list(zip(bins[~ok].tolist(), periods[~ok].tolist()))
            shown = ", ".join(f"(bin {b}, period {p})" for b, p in gaps[:10])
            more = f" and {len(gaps) - 10} more" if len(gaps) > 10 else ""
            raise CoverageError(f"stream {self.model!r} is missing {len(gaps)} pairs: {shown}{more}")
        return self.values[order][pos]


STREAM_HEADER = ["model", "bin_index", "period_index", "value"]


def save_stream(stream: ForecastStream, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STREAM_HEADER)
        for b, p, v in zip(stream.bins, stream.periods, stream.values):
            w.writerow([stream.model, int(b), int(p), "%.17g" % v])


def load_stream(path: str | Path) -> ForecastStream:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != STREAM_HEADER:
            raise ValueError(f"{path}: expected header {','.join(STREAM_HEADER)}")
        names, bins, periods, values = set(), [], [], []
        for row in reader:
            if not row:
                continue
            names.add(row[0])
            bins.append(int(row[1]))
            periods.append(int(row[2]))
            values.append(float(row[3]))
    if len(names) > 1:
        raise ValueError(f"{path}: more than one model name in a stream file: {sorted(names)}")
    name = names.pop() if names else Path(path).stem
    return ForecastStream(name, np.array(bins), np.array(periods), np.array(values))


def load_forecast_streams(paths: Sequence[str | Path]) -> list[ForecastStream]:
    return [load_stream(p) for p in paths]


def _stream_inputs(streams: Sequence[ForecastStream], bins, periods) -> np.ndarray:
    if not streams:
        return np.zeros((len(bins), 0))
    return np.column_stack([s.lookup(bins, periods) for s in streams])


# -- batching --------------------------------------------------------------------


class _Batches:
    """Turns a sample set into network inputs for one architecture."""

    def __init__(self, arch, samples: SampleSet, graph: BinGraph | None, streams):
        self.arch = arch
        self.samples = samples
        self.streams = list(streams or [])
        if [s.model for s in self.streams] != list(arch.streams):
            raise ValueError(f"streams {[s.model for s in self.streams]} do not match architecture {list(arch.streams)}")
        self.index = None
        if arch.uses_graph:
            if graph is None:
                raise ValueError(f"{arch.kind} needs a bin graph")
            if not np.array_equal(np.asarray(graph.bins), samples.bins):
                raise ad.ShapeError("graph nodes and sample bins differ")
            self.index = ad.AttentionIndex.from_graph(graph)
        # precompute stream values for every sample in sample order
        self.stream_values = _stream_inputs(self.streams, samples.sample_bins(), samples.global_periods())

    @property
    def per_period(self) -> bool:
        return self.arch.core == "gnncoder"

    def units(self) -> np.ndarray:
        """Units shuffled during training: periods for graph models, samples otherwise."""
        if self.per_period:
            return np.arange(len(self.samples.target_periods))
        return np.arange(len(self.samples))

    def batch(self, units):
        s = self.samples
        if self.per_period:
            n = len(s.bins)
            idx = (units[:, None] * n + np.arange(n)[None, :]).reshape(-1)
            X = s.windows(idx).reshape(len(units), n, -1)
            y = s.y(idx).reshape(len(units), n)
            st = self.stream_values[idx].reshape(len(units), n, -1)
            return X, y, st, idx
        return s.windows(units), s.y(units), self.stream_values[units], units

    def forward(self, params, X, st):
        if self.per_period:
            return gnncoder_forward(X, params, self.arch, self.index, st)
        return lstm_forward(X, params, self.arch, st)

    def backward(self, grad, cache):
        if self.per_period:
            return gnncoder_backward(grad, cache, self.arch)
        return lstm_backward(grad, cache, self.arch)

    def predict_all(self, params, chunk=512) -> np.ndarray:
        units = self.units()
        out = np.empty(len(self.samples))
        step = max(1, chunk // (len(self.samples.bins) if self.per_period else 1))
        for k in range(0, len(units), step):
            X, _, st, idx = self.batch(units[k : k + step])
            y, _ = self.forward(params, X, st)
            out[idx] = y.reshape(-1)
        return out


# -- training --------------------------------------------------------------------


def new_bundle(arch: Architecture, seed: int = 0, n_bins: int | None = None) -> ModelBundle:
    return ModelBundle(arch, init_params(arch, seed, n_bins), {"seed": seed})


def persistence_baseline(window: np.ndarray) -> np.ndarray:
    """Last observed log-energy of each lookback window ``[..., L, F]``."""
    return np.asarray(window)[..., -1, 0]


def mean_baseline(train_series: np.ndarray) -> np.ndarray:
    """Per-bin mean of the training-span series ``[bin, period]``."""
    return np.asarray(train_series, dtype=float).mean(axis=1)


def train(
    bundle: ModelBundle,
    samples: SampleSet,
    graph: BinGraph | None = None,
    config: TrainConfig | None = None,
    streams: Sequence[ForecastStream] | None = None,
) -> tuple[ModelBundle, list[float]]:
    """Minimise MSE with Adam; returns the trained bundle and per-epoch mean batch loss.

    Graph models take ``graph_batch_periods`` whole-graph periods per step;
    the LSTM takes ``batch_size`` samples per step. Order is shuffled per epoch
    from ``config.seed``, so a rerun is bit-identical on one platform.
    """
    cfg = config or TrainConfig()
    arch = bundle.arch
    if len(samples) == 0:
        raise ValueError("no training samples")
    prov = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "graph_batch_periods": cfg.graph_batch_periods,
        "n_train_samples": len(samples),
    }
    bins = np.asarray(samples.bins)
    if arch.core in ("persistence", "mean"):
        params = dict(bundle.params)
        if arch.core == "mean":
            params["bin_means"] = mean_baseline(samples.truth[:, : samples.split_boundary])
        trained = ModelBundle(arch, params, {**bundle.provenance, **prov, "final_train_loss": None}, bins)
        return trained, []

    batches = _Batches(arch, samples, graph, streams)
    params = {k: v.copy() for k, v in bundle.params.items()}
    y_all = samples.y()
    initial = float(np.mean((batches.predict_all(params) - y_all) ** 2))
    prov["initial_train_loss"] = initial
    state = ad.AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    step = cfg.graph_batch_periods if batches.per_period else cfg.batch_size
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        units = rng.permutation(batches.units())
        total, count = 0.0, 0
        for k in range(0, len(units), step):
            X, y, st, _ = batches.batch(units[k : k + step])
            pred, cache = batches.forward(params, X, st)
            loss, grad = ad.mse_loss(pred, y)
            if not np.isfinite(loss):
                trace.append(loss)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", trace)
            grads = batches.backward(grad, cache)
            params, state = ad.adam_step(params, grads, state)
            total += loss * y.size
            count += y.size
        trace.append(total / count)
        logger.debug("epoch %d loss %.6g", epoch, trace[-1])
    prov["final_train_loss"] = float(np.mean((batches.predict_all(params) - y_all) ** 2)) if cfg.epochs else initial
    prov["loss_trace"] = trace
    return ModelBundle(arch, params, {**bundle.provenance, **prov}, bins), trace


def multifoundation_train(
    streams: Sequence[ForecastStream],
    samples: SampleSet,
    pattern: str = "lstm",
    graph: BinGraph | None = None,
    config: TrainConfig | None = None,
    **arch_kwargs,
) -> tuple[ModelBundle, list[float]]:
    """Train a pattern model whose head also reads each stream's target-period forecast."""
    cfg = config or TrainConfig()
    arch = Architecture(
        kind="multifoundation",
        pattern=pattern,
        lookback=samples.lookback,
        n_features=samples.n_features,
        streams=tuple(s.model for s in streams),
        feature_spec=samples.spec.to_dict(),
        **arch_kwargs,
    )
    # fail on coverage gaps before any training work
    _stream_inputs(streams, samples.sample_bins(), samples.global_periods())
    return train(new_bundle(arch, cfg.seed), samples, graph, cfg, streams)


def predict(
    bundle: ModelBundle,
    samples: SampleSet,
    graph: BinGraph | None = None,
    streams: Sequence[ForecastStream] | None = None,
    name: str | None = None,
) -> ForecastStream:
    arch = bundle.arch
    if samples.lookback != arch.lookback or samples.n_features != arch.n_features:
        raise ad.ShapeError(
            f"samples are {samples.lookback}x{samples.n_features}, model expects {arch.lookback}x{arch.n_features}"
        )
    if arch.core == "persistence":
        values = persistence_baseline(samples.windows())
    elif arch.core == "mean":
        if bundle.bins is not None and not np.array_equal(bundle.bins, samples.bins):
            raise ad.ShapeError("mean baseline was fitted on different bins")
        values = bundle.params["bin_means"][samples.rows]
    else:
        values = _Batches(arch, samples, graph, streams).predict_all(bundle.params)
    return ForecastStream(name or arch.kind, samples.sample_bins(), samples.global_periods(), values)


# -- persistence -----------------------------------------------------------------


def save_bundle(bundle: ModelBundle, directory: str | Path) -> str:
    manifest = {
        "architecture": bundle.arch.to_dict(),
        "provenance": bundle.provenance,
        "bins": None if bundle.bins is None else [int(b) for b in bundle.bins],
    }
    return ad.save_params(bundle.params, directory, manifest)


def load_bundle(directory: str | Path) -> ModelBundle:
    params, doc = ad.load_params(directory)
    bins = doc.get("bins")
    return ModelBundle(
        Architecture.from_dict(doc["architecture"]),
        params,
        doc.get("provenance", {}),
        None if bins is None else np.asarray(bins, dtype=np.int64),
    )


def bundle_digest(directory: str | Path) -> str:
    return json.loads((Path(directory) / "manifest.json").read_text(encoding="utf-8"))["params_sha256"]
