"""The five deployable defense configurations.

Each pipeline is a short chain of preprocessing stages in front of one of
three classifier variants: the bare full-input classifier, one retrained
on the compression bottleneck, or one retrained on the denoiser bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attacks import VictimSystem
from .models import TrainedModel, bottleneck_encoder

DEFENSE_KINDS = ("none", "dae", "cascade", "hl", "ae")

FULL = "full"
AE_REDUCED = "ae-reduced"
DAE_REDUCED = "dae-reduced"

# which classifier variant each defense feeds
_VARIANT = {
    "none": FULL,
    "dae": FULL,
    "cascade": AE_REDUCED,
    "hl": DAE_REDUCED,
    "ae": AE_REDUCED,
}

_CLASSIFIER_NAME = {
    FULL: "classifier",
    AE_REDUCED: "ae_reduced_classifier",
    DAE_REDUCED: "dae_reduced_classifier",
}


class MissingComponentError(ValueError):
    def __init__(self, component: str):
        self.component = component
        super().__init__(f"missing component: {component}")


@dataclass(frozen=True)
class DefensePipeline:
    """Preprocessing stages plus the classifier variant they feed.

    Immutable after build; stages hold their own parameter stores, so
    concurrent batch application is safe.
    """

    kind: str
    stages: tuple          # of (graph, store)
    stage_names: tuple
    classifier_variant: str

    @property
    def output_shape(self) -> tuple:
        if not self.stages:
            return self.stages_input_shape
        return self.stages[-1][0].output_shape

    @property
    def stages_input_shape(self) -> tuple:
        if not self.stages:
            return (784,)
        return self.stages[0][0].input_shape


def build_pipeline(kind: str, dae: TrainedModel | None = None,
                   compression_ae: TrainedModel | None = None,
                   classifiers: dict | None = None) -> DefensePipeline:
    """Assemble one defense, validating shapes against the classifier bank.

    classifiers maps variant name ("full" / "ae-reduced" / "dae-reduced")
    to a TrainedModel; only the variant `kind` requires must be present.
    """
    kind = kind.lower()
    if kind not in DEFENSE_KINDS:
        raise ValueError(f"unknown defense kind {kind!r}")
    classifiers = classifiers or {}

    stages: list = []
    names: list = []
    if kind == "dae":
        if dae is None:
            raise MissingComponentError("dae")
        stages.append((dae.graph, dae.store))
        names.append("dae")
    elif kind == "cascade":
        if dae is None:
            raise MissingComponentError("dae")
        if compression_ae is None:
            raise MissingComponentError("compression_ae")
        stages.append((dae.graph, dae.store))
        names.append("dae")
        stages.append(bottleneck_encoder(compression_ae))
        names.append("ae_encoder")
    elif kind == "hl":
        if dae is None:
            raise MissingComponentError("dae")
        stages.append(bottleneck_encoder(dae))
        names.append("dae_encoder")
    elif kind == "ae":
        if compression_ae is None:
            raise MissingComponentError("compression_ae")
        stages.append(bottleneck_encoder(compression_ae))
        names.append("ae_encoder")

    variant = _VARIANT[kind]
    clf = classifiers.get(variant)
    if clf is None:
        raise MissingComponentError(_CLASSIFIER_NAME[variant])

    # shape compatibility is settled here so apply() can never shape-fail
    for (a, _), (b, _) in zip(stages, stages[1:]):
        if a.output_shape != b.input_shape:
            raise ad.ShapeError(
                f"{kind}: stage output {a.output_shape} feeds input {b.input_shape}")
    tail = stages[-1][0].output_shape if stages else clf.graph.input_shape
    if tail != clf.graph.input_shape:
        raise ad.ShapeError(
            f"{kind}: pipeline output {tail} does not match "
            f"{variant} classifier input {clf.graph.input_shape}")

    return DefensePipeline(kind, tuple(stages), tuple(names), variant)


def build_all(dae: TrainedModel | None, compression_ae: TrainedModel | None,
              classifiers: dict) -> dict:
    """Every pipeline whose components are available, keyed by kind."""
    out = {}
    for kind in DEFENSE_KINDS:
        try:
            out[kind] = build_pipeline(kind, dae, compression_ae, classifiers)
        except MissingComponentError:
            pass
    return out


def apply(pipeline: DefensePipeline, batch) -> np.ndarray:
    """Run the preprocessing stages; the empty pipeline is the identity."""
    x = np.asarray(batch, dtype=np.float64)
    for graph, store in pipeline.stages:
        x = ad.forward(graph, store, x)
    return x


def classify(pipeline: DefensePipeline, classifiers: dict, batch) -> np.ndarray:
    """Predicted classes after defending; ties go to the lowest class index."""
    clf = classifiers.get(pipeline.classifier_variant)
    if clf is None:
        raise MissingComponentError(_CLASSIFIER_NAME[pipeline.classifier_variant])
    z = ad.forward(clf.graph, clf.store, apply(pipeline, batch))
    return np.argmax(np.atleast_2d(z), axis=-1)


def as_victim(pipeline: DefensePipeline, classifiers: dict) -> VictimSystem:
    """The defended system as one differentiable graph for the attacks."""
    clf = classifiers.get(pipeline.classifier_variant)
    if clf is None:
        raise MissingComponentError(_CLASSIFIER_NAME[pipeline.classifier_variant])
    return VictimSystem.from_parts(list(pipeline.stages), clf, name=pipeline.kind)


@dataclass
class Repertoire:
    """The pipelines a randomized deployment may pick from per sample."""

    pipelines: tuple
    seed: int = 0

    def __post_init__(self):
        self.pipelines = tuple(self.pipelines)
        if not self.pipelines:
            raise ValueError("repertoire must hold at least one pipeline")
        kinds = [p.kind for p in self.pipelines]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate defense kinds in repertoire: {kinds}")
        # canonical order makes selection independent of construction order
        self.pipelines = tuple(sorted(
            self.pipelines, key=lambda p: DEFENSE_KINDS.index(p.kind)))


def random_select(repertoire: Repertoire, sample_index: int) -> str:
    """Uniform draw over kinds, replayable per (seed, sample_index)."""
    rng = np.random.Generator(np.random.Philox(
        key=np.array([repertoire.seed, sample_index], dtype=np.uint64)))
    return repertoire.pipelines[rng.integers(len(repertoire.pipelines))].kind


def select_pipeline(repertoire: Repertoire, sample_index: int) -> DefensePipeline:
    kind = random_select(repertoire, sample_index)
    for p in repertoire.pipelines:
        if p.kind == kind:
            return p
    raise AssertionError("unreachable")
