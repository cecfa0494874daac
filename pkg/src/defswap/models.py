"""Model construction and training: victim classifiers, the denoising
autoencoder, the compression autoencoder, and reduced-input classifiers
derived from a trained compressor (full retrain, or upsample with only
the first layer trainable)."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf during training."""


@dataclass(frozen=True)
class OptimizerRecipe:
    """How to fit a model: optimizer family plus schedule sizes."""

    kind: str = "adam"
    learning_rate: float = 0.001
    batch_size: int = 200
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.9
    momentum: float = 0.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam", "rmsprop"):
            raise ValueError(f"unsupported optimizer: {self.kind}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture plus training recipe. Shape-checks the layer chain."""

    layers: tuple
    input_shape: tuple
    loss: str
    optimizer: OptimizerRecipe = field(default_factory=OptimizerRecipe)

    def __post_init__(self):
        object.__setattr__(self, "layers",
                           tuple((kind, dict(attrs)) for kind, attrs in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.loss not in ("ce", "mse"):
            raise ValueError(f"unsupported loss: {self.loss}")
        self.build_graph()  # raises ShapeError on an inconsistent chain

    def build_graph(self) -> ad.Graph:
        g = ad.Graph(self.input_shape)
        for kind, attrs in self.layers:
            g.add(kind, **attrs)
        return g

    def to_json(self) -> dict:
        return {
            "layers": [[kind, attrs] for kind, attrs in self.layers],
            "input_shape": list(self.input_shape),
            "loss": self.loss,
            "optimizer": {
                "kind": self.optimizer.kind,
                "learning_rate": self.optimizer.learning_rate,
                "batch_size": self.optimizer.batch_size,
                "epochs": self.optimizer.epochs,
                "beta1": self.optimizer.beta1,
                "beta2": self.optimizer.beta2,
                "rho": self.optimizer.rho,
                "momentum": self.optimizer.momentum,
                "eps": self.optimizer.eps,
            },
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(
            layers=tuple((kind, attrs) for kind, attrs in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            loss=d["loss"],
            optimizer=OptimizerRecipe(**d["optimizer"]),
        )

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class TrainedModel:
    spec: ModelSpec
    graph: ad.Graph
    store: ad.ParameterStore
    provenance: dict

    def __post_init__(self):
        if self.provenance.get("spec_hash") != self.spec.spec_hash():
            raise ValueError("provenance spec hash does not match the model spec")

    def outputs(self, x) -> np.ndarray:
        """Raw network outputs (probabilities or reconstructions)."""
        return ad.forward(self.graph, self.store, x)

    def predict(self, x) -> np.ndarray:
        """Class predictions; ties resolve to the lowest index."""
        return np.argmax(np.atleast_2d(self.outputs(x)), axis=-1)


# ---------------------------------------------------------------------------
# Canonical architectures
# ---------------------------------------------------------------------------

def fc_classifier_spec(input_dim: int = 784, hidden=(128,), classes: int = 10,
                       optimizer: OptimizerRecipe | None = None) -> ModelSpec:
    """Fully connected classifier: hidden relu layers, softmax output."""
    layers = []
    for h in hidden:
        layers.append(("dense", {"units": int(h)}))
        layers.append(("relu", {}))
    layers.append(("dense", {"units": int(classes)}))
    layers.append(("softmax", {}))
    return ModelSpec(tuple(layers), (input_dim,), "ce",
                     optimizer or OptimizerRecipe("adam", 0.001, 200, 20))


def dae_spec(input_dim: int = 784, optimizer: OptimizerRecipe | None = None) -> ModelSpec:
    """Denoising autoencoder 784-256-128-81-128-256-784.

    Plain dense stack with a single sigmoid on the output; the 81-wide
    layer is the bottleneck and doubles as the compressed representation.
    """
    widths = (256, 128, 81, 128, 256, input_dim)
    layers = tuple(("dense", {"units": w}) for w in widths) + (("sigmoid", {}),)
    return ModelSpec(layers, (input_dim,), "mse",
                     optimizer or OptimizerRecipe("adam", 0.001, 200, 150))


def compression_ae_spec(input_dim: int = 784, bottleneck: int = 81,
                        optimizer: OptimizerRecipe | None = None) -> ModelSpec:
    """Compression autoencoder 784-81-784: relu bottleneck, sigmoid output."""
    layers = (("dense", {"units": bottleneck}), ("relu", {}),
              ("dense", {"units": input_dim}), ("sigmoid", {}))
    return ModelSpec(layers, (input_dim,), "mse",
                     optimizer or OptimizerRecipe("adam", 0.001, 500, 100))


def reduced_classifier_spec(source: ModelSpec, reduced_dim: int) -> ModelSpec:
    """The source classifier's architecture with a smaller input layer."""
    return ModelSpec(source.layers, (reduced_dim,), source.loss, source.optimizer)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class _Optimizer:
    def __init__(self, recipe: OptimizerRecipe):
        self.r = recipe
        self.state: dict = {}
        self.t = 0

    def step(self, store: ad.ParameterStore, grads: dict) -> None:
        self.t += 1
        r = self.r
        for key in sorted(grads):
            if not store.is_trainable(key):
                continue
            g = grads[key]
            if r.kind == "sgd":
                if r.momentum:
                    v = self.state.setdefault(key, np.zeros_like(g))
                    v *= r.momentum
                    v -= r.learning_rate * g
                    store[key] = store[key] + v
                else:
                    store[key] = store[key] - r.learning_rate * g
            elif r.kind == "adam":
                m = self.state.setdefault(key + ".m", np.zeros_like(g))
                v = self.state.setdefault(key + ".v", np.zeros_like(g))
                m += (1 - r.beta1) * (g - m)
                v += (1 - r.beta2) * (g * g - v)
                mhat = m / (1 - r.beta1 ** self.t)
                vhat = v / (1 - r.beta2 ** self.t)
                store[key] = store[key] - r.learning_rate * mhat / (np.sqrt(vhat) + r.eps)
            else:  # rmsprop
                s = self.state.setdefault(key, np.zeros_like(g))
                s += (1 - r.rho) * (g * g - s)
                store[key] = store[key] - r.learning_rate * g / (np.sqrt(s) + r.eps)


def adam_update_reference(param, grad, m, v, t, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam step, kept separate as a test oracle."""
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _as_dataset(dataset) -> tuple[np.ndarray, np.ndarray]:
    x, y = dataset
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def _accuracy(graph, store, x, labels, batch: int = 512) -> float:
    hits = 0
    for i in range(0, len(x), batch):
        p = ad.forward(graph, store, x[i:i + batch])
        hits += int(np.sum(np.argmax(p, axis=-1) == labels[i:i + batch]))
    return hits / len(x)


def _mse(graph, store, x, targets, batch: int = 512) -> float:
    total = 0.0
    for i in range(0, len(x), batch):
        y = ad.forward(graph, store, x[i:i + batch])
        total += float(np.sum((y - targets[i:i + batch]) ** 2))
    return total / (len(x) * int(np.prod(graph.output_shape)))


def train(spec: ModelSpec, dataset, seed: int, eval_data=None,
          store: ad.ParameterStore | None = None) -> TrainedModel:
    """Fit the spec on (inputs, targets). Reproducible for a fixed seed.

    Passing a prepared `store` trains it in place (used for derived models
    with frozen layers); otherwise parameters are freshly initialized.
    Raises TrainingDiverged with the epoch index if the loss goes NaN.
    """
    x, y = _as_dataset(dataset)
    graph = spec.build_graph()
    if x.shape[1:] != graph.input_shape:
        raise ad.ShapeError(
            f"dataset sample shape {x.shape[1:]} != spec input {graph.input_shape}")
    if store is None:
        store = ad.init_params(graph, seed)
    opt = _Optimizer(spec.optimizer)
    shuffle_rng = np.random.Generator(
        np.random.Philox(key=np.array([seed, 1], dtype=np.uint64)))

    n = len(x)
    bs = spec.optimizer.batch_size
    curve = []
    t0 = time.perf_counter()
    for epoch in range(spec.optimizer.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for i in range(0, n, bs):
            idx = order[i:i + bs]
            spec_loss = ad.LossSpec(spec.loss, y[idx])
            loss, _, grads = ad._loss_eval(graph, store, x[idx], spec_loss)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss diverged (non-finite) at epoch {epoch}")
            opt.step(store, grads)
            total += loss * len(idx)
        curve.append(float(total / n))
    seconds = time.perf_counter() - t0

    provenance = {
        "spec_hash": spec.spec_hash(),
        "seed": int(seed),
        "train_seconds": seconds,
        "loss_curve": curve,
    }
    if spec.loss == "ce":
        provenance["final_train_accuracy"] = _accuracy(graph, store, x, y)
        if eval_data is not None:
            ex, ey = _as_dataset(eval_data)
            provenance["final_test_accuracy"] = _accuracy(graph, store, ex, ey)
    else:
        provenance["final_train_mse"] = _mse(graph, store, x, y)
        if eval_data is not None:
            ex, ey = _as_dataset(eval_data)
            provenance["final_test_mse"] = _mse(graph, store, ex, ey)
    return TrainedModel(spec, graph, store, provenance)


# ---------------------------------------------------------------------------
# DAE training pairs
# ---------------------------------------------------------------------------

def make_dae_training_set(clean_data, attack_generators, mix_ratio: float,
                          seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(possibly-perturbed inputs, clean targets) pairs.

    A fraction mix_ratio of the inputs is perturbed, cycling through the
    attack generators; the target is always the clean original.
    """
    x = np.asarray(clean_data, dtype=np.float64)
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError("mix_ratio must be in [0, 1]")
    if mix_ratio > 0 and not attack_generators:
        raise ValueError("mix_ratio > 0 requires at least one attack generator")

    inputs = x.copy()
    if mix_ratio > 0:
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 2], dtype=np.uint64)))
        chosen = np.flatnonzero(rng.random(len(x)) < mix_ratio)
        for j, gen in enumerate(attack_generators):
            part = chosen[j::len(attack_generators)]
            if len(part):
                inputs[part] = gen(x[part])
    return inputs, x.copy()


# ---------------------------------------------------------------------------
# Encoders and reduced classifiers
# ---------------------------------------------------------------------------

_ELEMENTWISE = {"relu", "elu", "sigmoid", "batchnorm", "dropout"}


def bottleneck_encoder(model: TrainedModel) -> tuple[ad.Graph, ad.ParameterStore]:
    """Prefix of an autoencoder through its narrowest layer.

    Elementwise nodes directly after the narrowest dense layer belong to
    the encoder (they shape the representation without changing its size).
    """
    sizes = [int(np.prod(n.out_shape)) for n in model.graph.nodes]
    if not sizes:
        raise ValueError("model has no layers")
    smallest = min(sizes)
    end = sizes.index(smallest) + 1
    while end < len(sizes) and sizes[end] == smallest \
            and model.graph.nodes[end].kind in _ELEMENTWISE:
        end += 1
    return model.graph.prefix(end), model.store


def encode(compressor: tuple[ad.Graph, ad.ParameterStore], x,
           batch: int = 1024) -> np.ndarray:
    g, store = compressor
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([ad.forward(g, store, x[i:i + batch])
                           for i in range(0, len(x), batch)])


@dataclass
class ReducedClassifierRecipe:
    """How to derive a reduced-input classifier from a trained compressor."""

    method: str  # "retrain" | "upsample"
    source: TrainedModel
    compressor: tuple[ad.Graph, ad.ParameterStore]
    reduced_input_shape: tuple
    upsample_variant: str = "first_layer"  # or "adapter"

    def __post_init__(self):
        self.reduced_input_shape = tuple(int(d) for d in self.reduced_input_shape)
        if self.method not in ("retrain", "upsample"):
            raise ValueError(f"unknown reduction method: {self.method}")
        if self.upsample_variant not in ("first_layer", "adapter"):
            raise ValueError(f"unknown upsample variant: {self.upsample_variant}")
        got = self.compressor[0].output_shape
        if got != self.reduced_input_shape:
            raise ad.ShapeError(
                f"compressor bottleneck {got} != declared reduced input "
                f"{self.reduced_input_shape}")


def _square_side(dim: int) -> int:
    side = int(round(dim ** 0.5))
    if side * side != dim:
        raise ad.ShapeError(f"reduced dimension {dim} is not a square image")
    return side


def derive_reduced_classifier(recipe: ReducedClassifierRecipe, dataset,
                              seed: int) -> TrainedModel:
    """Train a classifier that consumes the compressor's bottleneck output.

    retrain: the source architecture with a reduced input layer, trained
    from scratch on compressed inputs.
    upsample: reduced input reshaped to an image, nearest-neighbor
    upsampled 2x2 back to the source input size, then the source layers;
    only the first dense layer trains (default) or a fresh dense adapter
    before the upsample trains while everything original stays frozen.
    """
    x, y = _as_dataset(dataset)
    x_red = encode(recipe.compressor, x)
    red_dim = int(np.prod(recipe.reduced_input_shape))

    if recipe.method == "retrain":
        spec = reduced_classifier_spec(recipe.source.spec, red_dim)
        return train(spec, (x_red, y), seed)

    # upsample method
    src_dim = int(np.prod(recipe.source.spec.input_shape))
    side = _square_side(red_dim)
    if (2 * side) ** 2 != src_dim:
        raise ad.ShapeError(
            f"upsampled reduced input {(2 * side, 2 * side)} does not match "
            f"source input {recipe.source.spec.input_shape}")

    head: list = []
    if recipe.upsample_variant == "adapter":
        head.append(("dense", {"units": red_dim}))
    head += [("reshape", {"shape": (1, side, side)}),
             ("upsample2", {}),
             ("flatten", {})]
    layers = tuple(head) + recipe.source.spec.layers
    spec = ModelSpec(layers, (red_dim,), recipe.source.spec.loss,
                     recipe.source.spec.optimizer)
    graph = spec.build_graph()

    store = ad.init_params(graph, seed)
    offset = len(head)
    src_nodes = recipe.source.graph.nodes
    first_dense = next(i for i, n in enumerate(src_nodes) if n.params)
    for i, node in enumerate(src_nodes):
        for name, src_key in node.params.items():
            dst_key = graph.nodes[offset + i].params[name]
            store[dst_key] = recipe.source.store[src_key].copy()
            trainable = (recipe.upsample_variant == "first_layer" and i == first_dense
                         and recipe.source.store.is_trainable(src_key))
            store.set_trainable(dst_key, trainable)

    return train(spec, (x_red, y), seed, store=store)
