"""Reverse-mode automatic differentiation over small layered networks.

Everything is float64 numpy. A Graph is an ordered chain of nodes, each node
applying one op kind to the previous node's output. Parameters live in a
ParameterStore keyed by "<node index>.<name>"; composing graphs re-keys them.

Supported op kinds: dense, conv2d (stride 1, odd kernel >= 3), maxpool2
(2x2, stride 2), upsample2 (nearest neighbor 2x2), relu, elu, sigmoid,
softmax, batchnorm (inference mode, fixed statistics), dropout (training
mode only), flatten, reshape.

Inputs are batched with a leading sample axis; a single sample whose shape
equals the graph input shape is auto-promoted to a batch of one.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when a tensor shape violates an op's shape rule."""


class NonDifferentiableError(RuntimeError):
    """Raised when a backward pass reaches an op with no gradient rule."""


def _as_f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("tensor contains NaN or Inf")
    return a


# ---------------------------------------------------------------------------
# Graph structure
# ---------------------------------------------------------------------------

@dataclass
class Node:
    kind: str
    attrs: dict
    # local param name -> ParameterStore key
    params: dict = field(default_factory=dict)
    in_shape: tuple = ()
    out_shape: tuple = ()


class ParameterStore:
    """Mapping of parameter key -> float64 array, with per-key trainable flags."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, key: str, value, trainable: bool = True) -> None:
        if key in self._values:
            raise KeyError(f"duplicate parameter key: {key}")
        self._values[key] = _as_f64(value)
        self._trainable[key] = bool(trainable)

    def __getitem__(self, key: str) -> np.ndarray:
        return self._values[key]

    def __setitem__(self, key: str, value) -> None:
        if key not in self._values:
            raise KeyError(key)
        self._values[key] = _as_f64(value)

    def __contains__(self, key: str) -> bool:
        return key in self._values

    def __len__(self) -> int:
        return len(self._values)

    def keys(self):
        return self._values.keys()

    def items(self):
        return self._values.items()

    def is_trainable(self, key: str) -> bool:
        return self._trainable[key]

    def set_trainable(self, key: str, flag: bool) -> None:
        if key not in self._trainable:
            raise KeyError(key)
        self._trainable[key] = bool(flag)

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, v in self._values.items():
            out.add(k, v.copy(), self._trainable[k])
        return out


class Graph:
    """A chain of ops applied to an input of fixed per-sample shape."""

    def __init__(self, input_shape):
        self.input_shape = tuple(int(d) for d in input_shape)
        if any(d <= 0 for d in self.input_shape):
            raise ShapeError("input shape dims must be positive")
        self.nodes: list[Node] = []

    @property
    def output_shape(self) -> tuple:
        return self.nodes[-1].out_shape if self.nodes else self.input_shape

    def add(self, kind: str, **attrs) -> "Graph":
        if kind not in _OPS:
            raise ValueError(f"unknown op kind: {kind}")
        idx = len(self.nodes)
        in_shape = self.output_shape
        try:
            out_shape, param_shapes = _OPS[kind].shapes(in_shape, attrs)
        except ShapeError as e:
            raise ShapeError(f"node {idx} ({kind}): {e}") from None
        params = {name: f"{idx}.{name}" for name in param_shapes}
        self.nodes.append(Node(kind, dict(attrs), params, in_shape, out_shape))
        return self

    def param_shapes(self) -> dict:
        """Store key -> shape for every parameter the graph declares."""
        out = {}
        for node in self.nodes:
            _, shapes = _OPS[node.kind].shapes(node.in_shape, node.attrs)
            for name, shape in shapes.items():
                out[node.params[name]] = shape
        return out

    def prefix(self, n_nodes: int) -> "Graph":
        """First n_nodes as a graph sharing this graph's parameter keys."""
        g = Graph(self.input_shape)
        g.nodes = self.nodes[:n_nodes]
        return g


def strip_softmax(graph: Graph) -> Graph:
    """The graph without a trailing softmax node, for raw class scores."""
    if graph.nodes and graph.nodes[-1].kind == "softmax":
        return graph.prefix(len(graph.nodes) - 1)
    return graph


def compose(*segments) -> tuple[Graph, ParameterStore]:
    """Chain (graph, store) segments into one graph with a merged store.

    Parameter keys are re-prefixed "s<segment>." so segments cannot collide.
    Adjacent output/input shapes must match.
    """
    if not segments:
        raise ValueError("compose needs at least one segment")
    graph = Graph(segments[0][0].input_shape)
    store = ParameterStore()
    for j, (g, s) in enumerate(segments):
        if g.input_shape != graph.output_shape:
            raise ShapeError(
                f"segment {j} expects input {g.input_shape}, "
                f"previous segment produces {graph.output_shape}"
            )
        for node in g.nodes:
            rekeyed = {name: f"s{j}.{key}" for name, key in node.params.items()}
            graph.nodes.append(dataclasses.replace(node, params=rekeyed))
            for name, key in node.params.items():
                store.add(rekeyed[name], s[key], s.is_trainable(key))
    return graph, store


# ---------------------------------------------------------------------------
# Op definitions: shapes / init / forward / backward
# ---------------------------------------------------------------------------

class _Op:
    has_params = False

    @staticmethod
    def shapes(in_shape, attrs):
        raise NotImplementedError

    @staticmethod
    def init(name, shape, rng):
        return np.zeros(shape)

    @staticmethod
    def forward(x, p, attrs, training, rng):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, dy):
        raise NotImplementedError


def _glorot(shape, fan_in, fan_out, rng):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class _Dense(_Op):
    has_params = True

    @staticmethod
    def shapes(in_shape, attrs):
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got {in_shape}")
        units = int(attrs["units"])
        if units <= 0:
            raise ShapeError("units must be positive")
        return (units,), {"w": (in_shape[0], units), "b": (units,)}

    @staticmethod
    def init(name, shape, rng):
        if name == "w":
            return _glorot(shape, shape[0], shape[1], rng)
        return np.zeros(shape)

    @staticmethod
    def forward(x, p, attrs, training, rng):
        return x @ p["w"] + p["b"], (x, p["w"])

    @staticmethod
    def backward(ctx, dy):
        x, w = ctx
        return dy @ w.T, {"w": x.T @ dy, "b": dy.sum(axis=0)}


class _Conv2d(_Op):
    has_params = True

    @staticmethod
    def shapes(in_shape, attrs):
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d expects (channels, h, w), got {in_shape}")
        k = int(attrs.get("k", 3))
        if k < 3 or k % 2 == 0:
            raise ShapeError("kernel size must be an odd integer >= 3")
        filters = int(attrs["filters"])
        pad = attrs.get("padding", "same")
        c, h, w = in_shape
        if pad == "same":
            oh, ow = h, w
        elif pad == "valid":
            oh, ow = h - k + 1, w - k + 1
            if oh <= 0 or ow <= 0:
                raise ShapeError(f"kernel {k} too large for input {in_shape}")
        else:
            raise ShapeError(f"unknown padding {pad!r}")
        return (filters, oh, ow), {"w": (filters, c, k, k), "b": (filters,)}

    @staticmethod
    def init(name, shape, rng):
        if name == "w":
            f, c, k, _ = shape
            return _glorot(shape, c * k * k, f * k * k, rng)
        return np.zeros(shape)

    @staticmethod
    def _pad(x, k, padding):
        if padding == "same":
            p = k // 2
            return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        return x

    @staticmethod
    def forward(x, p, attrs, training, rng):
        w, b = p["w"], p["b"]
        f, c, k, _ = w.shape
        padding = attrs.get("padding", "same")
        xp = _Conv2d._pad(x, k, padding)
        n = x.shape[0]
        oh, ow = xp.shape[2] - k + 1, xp.shape[3] - k + 1
        # im2col: windows (n, c, oh, ow, k, k) -> (n, oh*ow, c*k*k)
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * k * k)
        y = cols @ w.reshape(f, -1).T + b
        y = y.transpose(0, 2, 1).reshape(n, f, oh, ow)
        return y, (cols, x.shape, w, attrs)

    @staticmethod
    def backward(ctx, dy):
        cols, x_shape, w, attrs = ctx
        f, c, k, _ = w.shape
        padding = attrs.get("padding", "same")
        n, _, oh, ow = dy.shape
        dy2 = dy.reshape(n, f, oh * ow).transpose(0, 2, 1)  # (n, ohw, f)
        dw = np.einsum("npf,npc->fc", dy2, cols).reshape(w.shape)
        db = dy2.sum(axis=(0, 1))
        dcols = dy2 @ w.reshape(f, -1)  # (n, ohw, c*k*k)
        dcols = dcols.reshape(n, oh, ow, c, k, k)
        # col2im: scatter-add each kernel offset back onto the padded input
        ph = k // 2 if padding == "same" else 0
        dxp = np.zeros((n, c, x_shape[2] + 2 * ph, x_shape[3] + 2 * ph))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, ph:ph + x_shape[2], ph:ph + x_shape[3]] if ph else dxp
        return dx, {"w": dw, "b": db}


class _MaxPool2(_Op):
    @staticmethod
    def shapes(in_shape, attrs):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2 expects (channels, h, w), got {in_shape}")
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {in_shape}")
        return (c, h // 2, w // 2), {}

    @staticmethod
    def forward(x, p, attrs, training, rng):
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)  # first max wins on ties
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    @staticmethod
    def backward(ctx, dy):
        idx, x_shape = ctx
        n, c, h, w = x_shape
        dwin = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(x_shape), {}


class _Upsample2(_Op):
    @staticmethod
    def shapes(in_shape, attrs):
        if len(in_shape) != 3:
            raise ShapeError(f"upsample2 expects (channels, h, w), got {in_shape}")
        c, h, w = in_shape
        return (c, 2 * h, 2 * w), {}

    @staticmethod
    def forward(x, p, attrs, training, rng):
        y = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
        return y, x.shape

    @staticmethod
    def backward(ctx, dy):
        n, c, h, w = ctx
        dx = dy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return dx, {}


class _Relu(_Op):
    @staticmethod
    def shapes(in_shape, attrs):
        return in_shape, {}

    @staticmethod
    def forward(x, p, attrs, training, rng):
        return np.maximum(x, 0.0), x

    @staticmethod
    def backward(ctx, dy):
        # subgradient at 0 is 0
        return dy * (ctx > 0), {}


class _Elu(_Op):
    @staticmethod
    def shapes(in_shape, attrs):
        return in_shape, {}

    @staticmethod
    def forward(x, p, attrs, training, rng):
        alpha = float(attrs.get("alpha", 1.0))
        neg = alpha * np.expm1(np.minimum(x, 0.0))
        y = np.where(x > 0, x, neg)
        return y, (x, neg, alpha)

    @staticmethod
    def backward(ctx, dy):
        x, neg, alpha = ctx
        return dy * np.where(x > 0, 1.0, neg + alpha), {}


class _Sigmoid(_Op):
    @staticmethod
    def shapes(in_shape, attrs):
        return in_shape, {}

    @staticmethod
    def forward(x, p, attrs, training, rng):
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return y, y

    @staticmethod
    def backward(ctx, dy):
        return dy * ctx * (1.0 - ctx), {}


class _Softmax(_Op):
    @staticmethod
    def shapes(in_shape, attrs):
        if len(in_shape) != 1:
            raise ShapeError(f"softmax expects a flat input, got {in_shape}")
        return in_shape, {}

    @staticmethod
    def forward(x, p, attrs, training, rng):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    @staticmethod
    def backward(ctx, dy):
        y = ctx
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True)), {}


class _BatchNorm(_Op):
    """Inference-mode batch normalization with stored statistics.

    Statistics (mean, var) are non-trainable and treated as constants in the
    backward pass; scale and shift are trainable.
    """

    has_params = True
    non_trainable = ("mean", "var")

    @staticmethod
    def shapes(in_shape, attrs):
        if len(in_shape) == 1:
            c = in_shape[0]
        elif len(in_shape) == 3:
            c = in_shape[0]
        else:
            raise ShapeError(f"batchnorm expects flat or (c, h, w) input, got {in_shape}")
        shp = (c,)
        return in_shape, {"gamma": shp, "beta": shp, "mean": shp, "var": shp}

    @staticmethod
    def init(name, shape, rng):
        if name in ("gamma", "var"):
            return np.ones(shape)
        return np.zeros(shape)

    @staticmethod
    def _bcast(v, ndim):
        # broadcast per-channel vector over (n, c) or (n, c, h, w)
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    @staticmethod
    def forward(x, p, attrs, training, rng):
        eps = float(attrs.get("eps", 1e-5))
        inv = 1.0 / np.sqrt(p["var"] + eps)
        g = _BatchNorm._bcast(p["gamma"] * inv, x.ndim)
        m = _BatchNorm._bcast(p["mean"], x.ndim)
        xhat = (x - m) * _BatchNorm._bcast(inv, x.ndim)
        y = g * (x - m) + _BatchNorm._bcast(p["beta"], x.ndim)
        return y, (xhat, p["gamma"] * inv)

    @staticmethod
    def backward(ctx, dy):
        xhat, ginv = ctx
        axes = tuple(i for i in range(dy.ndim) if i != 1)
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dx = dy * _BatchNorm._bcast(ginv, dy.ndim)
        return dx, {
            "gamma": dgamma,
            "beta": dbeta,
            "mean": np.zeros_like(dbeta),
            "var": np.zeros_like(dbeta),
        }


class _Dropout(_Op):
    @staticmethod
    def shapes(in_shape, attrs):
        rate = float(attrs.get("rate", 0.5))
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        return in_shape, {}

    @staticmethod
    def forward(x, p, attrs, training, rng):
        if not training:
            return x, None
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        rate = float(attrs.get("rate", 0.5))
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * mask, mask

    @staticmethod
    def backward(ctx, dy):
        if ctx is None:
            return dy, {}
        return dy * ctx, {}


class _Flatten(_Op):
    @staticmethod
    def shapes(in_shape, attrs):
        return (int(np.prod(in_shape)),), {}

    @staticmethod
    def forward(x, p, attrs, training, rng):
        return x.reshape(x.shape[0], -1), x.shape

    @staticmethod
    def backward(ctx, dy):
        return dy.reshape(ctx), {}


class _Reshape(_Op):
    @staticmethod
    def shapes(in_shape, attrs):
        target = tuple(int(d) for d in attrs["shape"])
        if np.prod(target) != np.prod(in_shape):
            raise ShapeError(f"cannot reshape {in_shape} to {target}")
        return target, {}

    @staticmethod
    def forward(x, p, attrs, training, rng):
        target = tuple(int(d) for d in attrs["shape"])
        return x.reshape((x.shape[0],) + target), x.shape

    @staticmethod
    def backward(ctx, dy):
        return dy.reshape(ctx), {}


_OPS: dict[str, type[_Op]] = {
    "dense": _Dense,
    "conv2d": _Conv2d,
    "maxpool2": _MaxPool2,
    "upsample2": _Upsample2,
    "relu": _Relu,
    "elu": _Elu,
    "sigmoid": _Sigmoid,
    "softmax": _Softmax,
    "batchnorm": _BatchNorm,
    "dropout": _Dropout,
    "flatten": _Flatten,
    "reshape": _Reshape,
}


def init_params(graph: Graph, seed: int) -> ParameterStore:
    """Fresh ParameterStore for the graph (Glorot-uniform weights, keyed rng)."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    store = ParameterStore()
    for node in graph.nodes:
        op = _OPS[node.kind]
        _, shapes = op.shapes(node.in_shape, node.attrs)
        frozen = set(getattr(op, "non_trainable", ()))
        for name, shape in shapes.items():
            store.add(node.params[name], op.init(name, shape, rng), name not in frozen)
    return store


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _check_batch(graph: Graph, x) -> tuple[np.ndarray, bool]:
    x = _as_f64(x)
    if x.shape == graph.input_shape:
        return x[None], True
    if x.shape[1:] != graph.input_shape:
        raise ShapeError(
            f"input shape {x.shape[1:]} does not match graph input {graph.input_shape}"
        )
    return x, False


def _node_params(node: Node, store: ParameterStore) -> dict:
    return {name: store[key] for name, key in node.params.items()}


def _run(graph, store, x, training, rng, n_nodes=None):
    """Forward through the first n_nodes, keeping backward contexts."""
    nodes = graph.nodes if n_nodes is None else graph.nodes[:n_nodes]
    ctxs = []
    for i, node in enumerate(nodes):
        op = _OPS[node.kind]
        try:
            x, ctx = op.forward(x, _node_params(node, store), node.attrs, training, rng)
        except ValueError as e:
            raise type(e)(f"node {i} ({node.kind}): {e}") from None
        ctxs.append(ctx)
    return x, ctxs


def _backprop(graph, store, ctxs, dy, n_nodes=None):
    """Vector-Jacobian product back through the traced nodes."""
    nodes = graph.nodes if n_nodes is None else graph.nodes[:n_nodes]
    grads = {}
    for node, ctx in zip(reversed(nodes), reversed(ctxs)):
        op = _OPS[node.kind]
        try:
            dy, dparams = op.backward(ctx, dy)
        except NotImplementedError:
            raise NonDifferentiableError(f"non-differentiable node: {node.kind}") from None
        for name, g in dparams.items():
            key = node.params[name]
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    return dy, grads


def forward(graph: Graph, store: ParameterStore, x, training: bool = False, rng=None) -> np.ndarray:
    """Evaluate the graph. Deterministic when training is False (dropout off)."""
    xb, single = _check_batch(graph, x)
    y, _ = _run(graph, store, xb, training, rng)
    return y[0] if single else y


def vjp(graph: Graph, store: ParameterStore, x, dy, training: bool = False, rng=None):
    """(d loss/d input, d loss/d params) given d loss/d output."""
    xb, single = _check_batch(graph, x)
    y, ctxs = _run(graph, store, xb, training, rng)
    dyb = _as_f64(dy)
    if single:
        dyb = dyb[None]
    if dyb.shape != y.shape:
        raise ShapeError(f"output gradient shape {dyb.shape} != output shape {y.shape}")
    dx, grads = _backprop(graph, store, ctxs, dyb)
    return (dx[0] if single else dx), grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """A loss to evaluate at the graph output.

    kind "ce": categorical cross-entropy against integer labels in `target`.
    A trailing softmax node is folded into the loss (log-sum-exp form);
    otherwise raw outputs are treated as logits.
    kind "mse": mean squared error against `target`, averaged over every
    element (batch and coordinates).
    `scale` multiplies the loss and therefore every gradient.
    """

    kind: str
    target: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ce", "mse"):
            raise ValueError(f"unsupported loss kind: {self.kind}")


def _ce_from_logits(z, labels):
    """(mean cross-entropy, gradient wrt logits) via log-sum-exp."""
    n = z.shape[0]
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    loss = (lse - z[np.arange(n), labels]).mean()
    p = np.exp(z - m)
    p /= p.sum(axis=-1, keepdims=True)
    p[np.arange(n), labels] -= 1.0
    return loss, p / n


def _loss_eval(graph, store, x, spec: LossSpec, training=False, rng=None):
    """Returns (loss, dx, param grads). Fuses a trailing softmax for "ce"."""
    xb, _ = _check_batch(graph, x)
    if xb.shape[0] == 0:
        raise ValueError("empty batch")
    n_nodes = len(graph.nodes)
    if spec.kind == "ce" and graph.nodes and graph.nodes[-1].kind == "softmax":
        n_nodes -= 1
    y, ctxs = _run(graph, store, xb, training, rng, n_nodes=n_nodes)
    if spec.kind == "ce":
        labels = np.atleast_1d(np.asarray(spec.target))
        if labels.shape != (xb.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} != batch ({xb.shape[0]},)")
        loss, dy = _ce_from_logits(y, labels)
    else:
        t = _as_f64(spec.target)
        if t.shape == graph.output_shape:
            t = t[None]
        if t.shape != y.shape:
            raise ShapeError(f"mse target shape {t.shape} != output shape {y.shape}")
        diff = y - t
        loss = float(np.mean(diff * diff))
        dy = 2.0 * diff / diff.size
    loss = spec.scale * loss
    dy = spec.scale * dy
    dx, grads = _backprop(graph, store, ctxs, dy, n_nodes=n_nodes)
    return loss, dx, grads


def loss_value(graph: Graph, store: ParameterStore, x, spec: LossSpec) -> float:
    loss, _, _ = _loss_eval(graph, store, x, spec)
    return loss


def grad_input(graph: Graph, store: ParameterStore, x, spec: LossSpec) -> np.ndarray:
    """d loss / d input, same shape as x."""
    x = _as_f64(x)
    single = x.shape == graph.input_shape
    _, dx, _ = _loss_eval(graph, store, x, spec)
    return dx[0] if single else dx


def grad_params(graph: Graph, store: ParameterStore, x, spec: LossSpec) -> dict:
    """d loss / d params, averaged over the batch by the loss definition.

    Frozen parameters receive exactly zero gradient. Declared parameters a
    backward pass never touches are returned as zeros too.
    """
    _, _, grads = _loss_eval(graph, store, x, spec)
    out = {}
    for key, shape in graph.param_shapes().items():
        if not store.is_trainable(key):
            out[key] = np.zeros(shape)
        else:
            out[key] = grads.get(key, np.zeros(shape))
    return out


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    """Worst relative error of analytic vs central-difference gradients."""

    input_max: float
    param_max: dict

    @property
    def worst(self) -> float:
        return max([self.input_max, *self.param_max.values()])


def _rel_err(a, n):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def finite_diff_check(graph: Graph, store: ParameterStore, x, spec: LossSpec,
                      step: float = 1e-5) -> FiniteDiffReport:
    """Compare analytic gradients with central finite differences.

    Perturbs every input coordinate and every trainable parameter
    coordinate by +-step and reports the worst relative error per group.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = _as_f64(x).copy()
    if x.shape == graph.input_shape:
        x = x[None]
    _, dx, grads = _loss_eval(graph, store, x, spec)

    num_dx = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_value(graph, store, x, spec)
        flat[i] = orig - step
        lo = loss_value(graph, store, x, spec)
        flat[i] = orig
        num_dx.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    dx_arr = np.asarray(dx)
    input_max = _rel_err(dx_arr, num_dx)

    param_max = {}
    for key in sorted(graph.param_shapes()):
        if not store.is_trainable(key):
            continue
        val = store[key]
        num = np.zeros_like(val)
        flat = val.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_value(graph, store, x, spec)
            flat[i] = orig - step
            lo = loss_value(graph, store, x, spec)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        analytic = grads.get(key, np.zeros_like(val))
        param_max[key] = _rel_err(analytic, num)

    return FiniteDiffReport(input_max=input_max, param_max=param_max)
