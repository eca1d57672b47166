"""GraphSAGE / GraphConv surrogate with jumping-knowledge concatenation.

All arithmetic is float64. Message-passing layers come first, their outputs
are concatenated (JK) and fed through dense layers to a 3-vector per node.
Neighbour sums are evaluated in an order fixed by edge weight rather than
node label, so eval-mode predictions commute bit-for-bit with node
relabelling whenever each node's incident weights are distinct.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .autodiff import StaleTapeError, Tape
from .mesh import MeshGraph

KINDS = ("graphsage", "graphconv", "dense")
ACTIVATIONS = ("relu", "none")
MP_KINDS = ("graphsage", "graphconv")

CHECKPOINT_MAGIC = b"PGNM"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("layer dims must be positive")


def default_layers(in_dim=7, hidden=64, n_sage=3, n_conv=2, head_hidden=64, out_dim=3):
    mp = [LayerSpec("graphsage", in_dim if i == 0 else hidden, hidden) for i in range(n_sage)]
    mp += [LayerSpec("graphconv", hidden, hidden) for _ in range(n_conv)]
    jk = hidden * len(mp)
    return mp + [LayerSpec("dense", jk, head_hidden), LayerSpec("dense", head_hidden, out_dim, "none")]


def validate_layers(layers):
    n_mp = 0
    while n_mp < len(layers) and layers[n_mp].kind in MP_KINDS:
        n_mp += 1
    head = layers[n_mp:]
    if n_mp == 0 or not head:
        raise ValueError("need at least one message-passing layer followed by dense layers")
    if any(l.kind != "dense" for l in head):
        raise ValueError("message-passing layers must precede all dense layers")
    for a, b in zip(layers[:n_mp - 1], layers[1:n_mp]):
        if a.out_dim != b.in_dim:
            raise ValueError("consecutive message-passing layers are not dimension-compatible")
    if head[0].in_dim != sum(l.out_dim for l in layers[:n_mp]):
        raise ValueError("first dense layer must take the JK concatenation of all message-passing outputs")
    for a, b in zip(head[:-1], head[1:]):
        if a.out_dim != b.in_dim:
            raise ValueError("consecutive dense layers are not dimension-compatible")
    if head[-1].out_dim != 3:
        raise ValueError("output layer must produce 3 values per node")
    return n_mp


# --- neighbour aggregation ---------------------------------------------------------

class NeighbourAggregator:
    """out[v] = sum_u c(v, u) x[u] over graph neighbours, c fixed per mode.

    mode ``sum``: c = e(u, v); ``weighted_mean``: c = e(u, v) / sum_u e(u, v);
    ``mean``: c = 1 / deg(v). Isolated nodes aggregate to zero.
    """

    def __init__(self, graph: MeshGraph, mode="sum"):
        n = graph.n_nodes
        u, v = graph.edges[:, 0], graph.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        w = np.concatenate([graph.edge_weight, graph.edge_weight])
        order = np.lexsort((cols, -w, rows))
        rows, cols, w = rows[order], cols[order], w[order]
        starts = np.unique(rows, return_index=True)[1]
        if mode == "sum":
            coef = w
        elif mode == "weighted_mean":
            total = np.add.reduceat(w, starts) if len(w) else np.zeros(0)
            coef = w / np.repeat(total, np.diff(np.append(starts, len(w))))
        elif mode == "mean":
            deg = np.diff(np.append(starts, len(w)))
            coef = np.repeat(1.0 / deg, deg)
        else:
            raise ValueError(f"unknown aggregation mode {mode!r}")
        self.n = n
        self.rows, self.cols, self.coef = rows, cols, coef
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        # entries stay in weight order; csr products accumulate each row in storage order
        self._a = sparse.csr_matrix((coef, cols, np.cumsum(indptr)), shape=(n, n))
        self._t = sparse.csr_matrix((coef, (cols, rows)), shape=(n, n))

    def forward(self, x):
        """x is (N, d) or batched (B, N, d)."""
        return _restore(np.asarray(self._a @ _node_major(x)), x.shape)

    def transpose(self, g):
        return _restore(np.asarray(self._t @ _node_major(g)), g.shape)


def _node_major(x):
    if x.ndim == 2:
        return x
    return x.transpose(1, 0, 2).reshape(x.shape[1], -1)


def _restore(flat, shape):
    if len(shape) == 2:
        return flat
    b, n, d = shape
    return flat.reshape(n, b, d).transpose(1, 0, 2)


class GraphOperators:
    def __init__(self, graph: MeshGraph):
        self.graph = graph
        self.n_nodes = graph.n_nodes
        self._aggs = {}

    def get(self, mode):
        if mode not in self._aggs:
            self._aggs[mode] = NeighbourAggregator(self.graph, mode)
        return self._aggs[mode]


def operators(graph):
    if isinstance(graph, GraphOperators):
        return graph
    ops = graph.__dict__.get("_operators")
    if ops is None:
        ops = GraphOperators(graph)
        object.__setattr__(graph, "_operators", ops)
    return ops


# --- model ------------------------------------------------------------------------

@dataclass(eq=False)
class SurrogateModel:
    layers: list
    params: list                       # one dict of arrays per layer
    dropout: float = 0.1
    sage_aggregation: str = "weighted_mean"  # or "mean"
    jk_mode: str = "concat"
    feat_mean: np.ndarray = field(default_factory=lambda: np.zeros(7))
    feat_std: np.ndarray = field(default_factory=lambda: np.ones(7))
    version: int = 0

    def __post_init__(self):
        self.n_mp = validate_layers(self.layers)
        if self.jk_mode != "concat":
            raise ValueError("only concat jumping knowledge is supported")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def named_parameters(self):
        for i, p in enumerate(self.params):
            for name in _param_names(self.layers[i].kind):
                yield i, name, p[name]

    @property
    def n_params(self):
        return sum(a.size for _, _, a in self.named_parameters())

    def normalize(self, features):
        return (features - self.feat_mean) / self.feat_std

    def set_normalization(self, features):
        """z-score statistics from stacked training features; constant columns keep std 1."""
        f = np.concatenate([np.atleast_2d(x) for x in features], axis=0)
        mean = f.mean(axis=0)
        std = f.std(axis=0)
        std[std < 1e-12] = 1.0
        self.feat_mean, self.feat_std = mean, std

    def bump(self):
        self.version += 1

    def copy(self):
        return SurrogateModel(list(self.layers), [{k: v.copy() for k, v in p.items()} for p in self.params],
                              self.dropout, self.sage_aggregation, self.jk_mode,
                              self.feat_mean.copy(), self.feat_std.copy(), self.version)


def _param_names(kind):
    return ("W_self", "W_neigh", "bias") if kind in MP_KINDS else ("W", "b")


def init_params(layers=None, seed=0, dropout=0.1, sage_aggregation="weighted_mean") -> SurrogateModel:
    """Glorot-uniform weights, zero biases."""
    layers = list(layers or default_layers())
    validate_layers(layers)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = []
    for spec in layers:
        limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        p = {}
        for name in _param_names(spec.kind):
            if name in ("bias", "b"):
                p[name] = np.zeros(spec.out_dim)
            else:
                p[name] = rng.uniform(-limit, limit, size=(spec.in_dim, spec.out_dim))
        params.append(p)
    return SurrogateModel(layers, params, dropout, sage_aggregation,
                          feat_mean=np.zeros(layers[0].in_dim), feat_std=np.ones(layers[0].in_dim))


@dataclass
class ForwardCache:
    tape: Tape
    out: object
    param_vars: list
    version: int
    dropout_mask: np.ndarray | None


def _mp_layer(tape, kind, agg, h, pv, act):
    neigh = tape.aggregate(agg, h)
    z = tape.add(tape.matmul(h, pv["W_self"]), tape.matmul(neigh, pv["W_neigh"]), pv["bias"])
    return tape.relu(z) if act == "relu" else z


def graphsage_forward(H, graph, W_self, W_neigh, bias, activation="relu", aggregation="weighted_mean"):
    """act(H W_self + mean_w(H_neigh) W_neigh + bias) with an edge-weighted mean."""
    return _single_layer(H, graph, W_self, W_neigh, bias, activation, aggregation)


def graphconv_forward(H, graph, W_self, W_neigh, bias, activation="relu"):
    """act(H W_self + (sum_u e_uv H_u) W_neigh + bias)."""
    return _single_layer(H, graph, W_self, W_neigh, bias, activation, "sum")


def _single_layer(H, graph, W_self, W_neigh, bias, activation, mode):
    ops = operators(graph)
    H = np.asarray(H, dtype=np.float64)
    if H.ndim not in (2, 3) or H.shape[-2] != ops.n_nodes:
        raise ShapeError("H must have one row per node")
    if W_self.shape[0] != H.shape[1] or W_neigh.shape[0] != H.shape[1]:
        raise ShapeError("weight input dim does not match feature dim")
    tape = Tape()
    pv = {"W_self": tape.leaf(W_self), "W_neigh": tape.leaf(W_neigh), "bias": tape.leaf(bias)}
    return _mp_layer(tape, None, ops.get(mode), tape.leaf(H), pv, activation).value


def forward(model: SurrogateModel, graph, features, training=False, rng=None, dropout_mask=None,
            normalize=True):
    """Predicted (N, 3) displacements and the cache needed by ``backward``.

    ``features`` are raw node features, (N, F) or a batch (B, N, F) of
    samples on the same graph; they are z-scored with the model's statistics
    unless ``normalize`` is False. Dropout acts on the input of the final
    layer in training mode only; pass ``dropout_mask`` to fix it.
    """
    ops = operators(graph)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[-2] != ops.n_nodes:
        raise ShapeError(f"features have {x.shape[-2] if x.ndim >= 2 else 0} rows, graph has {ops.n_nodes} nodes")
    if x.shape[-1] != model.layers[0].in_dim:
        raise ShapeError("feature width does not match the first layer")
    if normalize:
        x = model.normalize(x)

    tape = Tape(model.version)
    pvars = [{k: tape.leaf(v, f"{i}.{k}") for k, v in p.items()} for i, p in enumerate(model.params)]
    h = tape.leaf(x)
    jk = []
    for i in range(model.n_mp):
        spec = model.layers[i]
        mode = model.sage_aggregation if spec.kind == "graphsage" else "sum"
        h = _mp_layer(tape, spec.kind, ops.get(mode), h, pvars[i], spec.activation)
        jk.append(h)
    h = tape.concat(jk) if len(jk) > 1 else jk[0]
    mask = None
    last = len(model.layers) - 1
    for i in range(model.n_mp, len(model.layers)):
        spec = model.layers[i]
        if i == last and training and model.dropout > 0:
            mask = dropout_mask
            if mask is None:
                rng = rng if rng is not None else np.random.default_rng()
                keep = rng.random(h.value.shape) >= model.dropout
                mask = keep / (1.0 - model.dropout)
            h = tape.scale(h, mask)
        z = tape.add(tape.matmul(h, pvars[i]["W"]), pvars[i]["b"])
        h = tape.relu(z) if spec.activation == "relu" else z
    return h.value, ForwardCache(tape, h, pvars, model.version, mask)


def backward(model: SurrogateModel, cache: ForwardCache, grad_out, frozen=()):
    """Gradients of a scalar loss w.r.t. every parameter, given dL/d(pred).

    Layers listed in ``frozen`` get exactly-zero gradients.
    """
    if cache.version != model.version:
        raise StaleTapeError("forward cache predates the current parameters")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.out.value.shape:
        raise ShapeError("loss gradient shape does not match the prediction")
    cache.tape.backward(cache.out, grad_out)
    grads = []
    for i, pv in enumerate(cache.param_vars):
        g = {}
        for k, var in pv.items():
            if i in frozen or var.grad is None:
                g[k] = np.zeros_like(var.value)
            else:
                g[k] = var.grad
        grads.append(g)
    return grads


def predict(model, graph, features):
    return forward(model, graph, features)[0]


# --- checkpoint -----------------------------------------------------------------------

_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
_ACT_CODE = {a: i for i, a in enumerate(ACTIVATIONS)}
_AGG_CODE = {"weighted_mean": 0, "mean": 1}


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def checkpoint_bytes(model: SurrogateModel, train_state=None):
    """Binary checkpoint; ``train_state`` is an optional dict with keys
    epoch, best_val, step, lr, m, v (m/v mirror ``model.params``)."""
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(model.layers))]
    for spec in model.layers:
        out.append(struct.pack("<BIIB", _KIND_CODE[spec.kind], spec.in_dim, spec.out_dim, _ACT_CODE[spec.activation]))
    out.append(struct.pack("<dBB", model.dropout, 0, _AGG_CODE[model.sage_aggregation]))
    nf = len(model.feat_mean)
    out.append(struct.pack("<I", nf))
    out.append(_f64(model.feat_mean) + _f64(model.feat_std))
    for _, _, arr in model.named_parameters():
        out.append(_f64(arr))
    if train_state is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<BQdQd", 1, train_state["epoch"], train_state["best_val"],
                               train_state["step"], train_state["lr"]))
        for key in ("m", "v"):
            for i, p in enumerate(model.params):
                for name in _param_names(model.layers[i].kind):
                    out.append(_f64(train_state[key][i][name]))
    return b"".join(out)


class CheckpointError(ValueError):
    pass


def checkpoint_from_bytes(data):
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    def arr(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + 8 * n > len(data):
            raise CheckpointError("truncated checkpoint")
        a = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
        return a

    version, n_layers = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        k, i, o, a = take("<BIIB")
        layers.append(LayerSpec(KINDS[k], i, o, ACTIVATIONS[a]))
    dropout, _jk, agg = take("<dBB")
    (nf,) = take("<I")
    mean, std = arr((nf,)), arr((nf,))

    def param_block():
        ps = []
        for spec in layers:
            p = {}
            for name in _param_names(spec.kind):
                shape = (spec.out_dim,) if name in ("bias", "b") else (spec.in_dim, spec.out_dim)
                p[name] = arr(shape)
            ps.append(p)
        return ps

    params = param_block()
    agg_name = {v: k for k, v in _AGG_CODE.items()}[agg]
    model = SurrogateModel(layers, params, dropout, agg_name, "concat", mean, std)
    (has_state,) = take("<B")
    state = None
    if has_state:
        epoch, best_val, step, lr = take("<QdQd")
        state = {"epoch": epoch, "best_val": best_val, "step": step, "lr": lr,
                 "m": param_block(), "v": param_block()}
    if pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return model, state


def save_checkpoint(model, path, train_state=None):
    Path(path).write_bytes(checkpoint_bytes(model, train_state))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
