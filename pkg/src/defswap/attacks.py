"""Gradient attacks against (possibly defense-prepended) classifiers.

All four algorithms work against a composite victim: per-system input
gradients and per-class outputs are arithmetically averaged, so attacking
a single system is the degenerate one-member case.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import TrainedModel


def _philox(*key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Victim systems
# ---------------------------------------------------------------------------

@dataclass
class VictimSystem:
    """A differentiable pipeline ending in class logits."""

    graph: ad.Graph
    store: ad.ParameterStore
    name: str = ""

    def __post_init__(self):
        if self.graph.nodes and self.graph.nodes[-1].kind == "softmax":
            raise ValueError("victim graph must end in logits, not softmax")

    @classmethod
    def from_model(cls, model: TrainedModel, name: str = "") -> "VictimSystem":
        return cls(ad.strip_softmax(model.graph), model.store, name)

    @classmethod
    def from_parts(cls, preprocessors, classifier: TrainedModel,
                   name: str = "") -> "VictimSystem":
        """Compose preprocessing stages (graph, store) with a classifier."""
        segments = list(preprocessors) + [
            (ad.strip_softmax(classifier.graph), classifier.store)]
        graph, store = ad.compose(*segments)
        return cls(graph, store, name)

    @property
    def n_classes(self) -> int:
        return int(self.graph.output_shape[-1])

    def logits(self, x) -> np.ndarray:
        return ad.forward(self.graph, self.store, x)

    def predict(self, x) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.logits(x)), axis=-1)


@dataclass
class CompositeVictim:
    """Victims attacked jointly; outputs and gradients are averaged."""

    systems: tuple

    def __post_init__(self):
        self.systems = tuple(self.systems)
        if not self.systems:
            raise ValueError("composite victim needs at least one system")
        shapes = {s.graph.input_shape for s in self.systems}
        classes = {s.n_classes for s in self.systems}
        if len(shapes) > 1 or len(classes) > 1:
            raise ad.ShapeError(
                f"victims disagree: input shapes {shapes}, class counts {classes}")

    @property
    def input_shape(self) -> tuple:
        return self.systems[0].graph.input_shape

    @property
    def n_classes(self) -> int:
        return self.systems[0].n_classes

    def logits(self, x) -> np.ndarray:
        out = self.systems[0].logits(x)
        for s in self.systems[1:]:
            out = out + s.logits(x)
        return out / len(self.systems)

    def predict(self, x) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.logits(x)), axis=-1)

    def grad_ce(self, x, y) -> np.ndarray:
        """Mean over systems of d cross-entropy / d input."""
        spec = ad.LossSpec("ce", np.asarray(y))
        acc = None
        for s in self.systems:
            g = ad.grad_input(s.graph, s.store, x, spec)
            acc = g if acc is None else acc + g
        return acc / len(self.systems)

    def vjp_mean(self, x, dy) -> np.ndarray:
        """Mean over systems of the input VJP for an output cotangent dy."""
        acc = None
        for s in self.systems:
            dx, _ = ad.vjp(s.graph, s.store, x, dy)
            acc = dx if acc is None else acc + dx
        return acc / len(self.systems)

    def class_jacobian(self, x_single) -> np.ndarray:
        """(classes, input_dim) Jacobian of averaged logits at one point."""
        k = self.n_classes
        rep = np.repeat(np.asarray(x_single, dtype=np.float64)[None], k, axis=0)
        return self.vjp_mean(rep, np.eye(k))


def _as_composite(victim) -> CompositeVictim:
    if isinstance(victim, CompositeVictim):
        return victim
    return CompositeVictim((victim,))


def adaptive_gradient(composite, x, y) -> np.ndarray:
    """Averaged loss gradient used by multi-system attacks."""
    return _as_composite(composite).grad_ce(x, y)


# ---------------------------------------------------------------------------
# Attack spec
# ---------------------------------------------------------------------------

ALGORITHMS = ("fgs", "pgd", "cw", "df")


@dataclass(frozen=True)
class AttackSpec:
    """Algorithm choice plus every hyperparameter any algorithm needs."""

    algorithm: str
    eps: float = 1.5              # fgs L2 budget
    eps_total: float = 0.25       # pgd L2 budget
    alpha: float = 0.01           # pgd step size
    iterations: int = 60          # pgd iteration count
    search_steps: int = 5         # cw binary-search steps
    cw_max_iters: int = 400
    learning_rate: float = 0.01   # cw optimizer
    c0: float = 0.01              # cw initial constant
    abort_early: bool = True
    batch_size: int = 8           # cw chunk size
    restarts: int = 1
    df_max_iters: int = 50
    overshoot: float = 0.02       # df boundary overshoot
    clip: tuple = (0.0, 1.0)
    sign_variant: bool = False    # fgs coordinate-sign cross-check

    def __post_init__(self):
        object.__setattr__(self, "algorithm", self.algorithm.lower())
        object.__setattr__(self, "clip", (float(self.clip[0]), float(self.clip[1])))
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        for name in ("eps", "eps_total", "alpha", "learning_rate", "c0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("iterations", "search_steps", "cw_max_iters",
                     "batch_size", "restarts", "df_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")
        if self.clip[0] >= self.clip[1]:
            raise ValueError("clip range must have lo < hi")
        if self.algorithm == "pgd" and self.alpha > self.eps_total:
            raise ValueError("pgd step alpha must not exceed eps_total")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["clip"] = list(self.clip)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AttackSpec":
        d = dict(d)
        d["clip"] = tuple(d["clip"])
        return cls(**d)


# ---------------------------------------------------------------------------
# FGS
# ---------------------------------------------------------------------------

def fgs(victim, x, y, eps: float, clip=(0.0, 1.0), sign_variant: bool = False,
        return_info: bool = False):
    """One normalized-gradient step of L2 length eps, then clip.

    The variant behind sign_variant takes eps * sign(gradient) instead
    (a coordinate-wise step whose L2 norm is eps * sqrt(d)); it exists
    for cross-checks, not for the headline contracts.
    """
    comp = _as_composite(victim)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    g = np.atleast_2d(comp.grad_ce(x, y))
    norms = np.sqrt(np.sum(g * g, axis=1))
    null = norms == 0.0
    if sign_variant:
        step = eps * np.sign(g)
        step[null] = 0.0
    else:
        safe = np.where(null, 1.0, norms)
        step = eps * g / safe[:, None]
        step[null] = 0.0
    x_adv = x + step
    preclip = np.sqrt(np.sum((x_adv - x) ** 2, axis=1))
    x_adv = np.clip(x_adv, clip[0], clip[1])
    if return_info:
        return x_adv, {"null_gradient": null, "preclip_norm": preclip}
    return x_adv


# ---------------------------------------------------------------------------
# PGD
# ---------------------------------------------------------------------------

def project_l2(z: np.ndarray, eps: float) -> np.ndarray:
    """Scale z onto the L2 ball of radius eps: eps * z / max(eps, ||z||)."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
    return eps * z / np.maximum(eps, norms)


def pgd(victim, x, y, eps_total: float = 0.25, alpha: float = 0.01,
        iters: int = 60, clip=(0.0, 1.0)) -> np.ndarray:
    """Iterated normalized-gradient steps with an L2-ball projection.

    Runs exactly `iters` iterations (no early stop); the clip to the valid
    pixel range happens once at the end.
    """
    if alpha > eps_total:
        raise ValueError("alpha must not exceed eps_total")
    comp = _as_composite(victim)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    delta = np.zeros_like(x)
    for _ in range(iters):
        g = np.atleast_2d(comp.grad_ce(x + delta, y))
        norms = np.sqrt(np.sum(g * g, axis=1))
        safe = np.where(norms == 0.0, 1.0, norms)
        step = alpha * g / safe[:, None]
        step[norms == 0.0] = 0.0  # null gradient: this step contributes nothing
        delta = project_l2(delta + step, eps_total)
    return np.clip(x + delta, clip[0], clip[1])


# ---------------------------------------------------------------------------
# CW
# ---------------------------------------------------------------------------

def _margin_terms(z: np.ndarray, y: np.ndarray):
    """(true-class logit minus best other, index of best other)."""
    n = len(z)
    zy = z[np.arange(n), y]
    masked = z.copy()
    masked[np.arange(n), y] = -np.inf
    j = np.argmax(masked, axis=1)
    return zy - masked[np.arange(n), j], j


def cw(victim, x, y, *, search_steps: int = 5, max_iters: int = 400,
       learning_rate: float = 0.01, c0: float = 0.01, abort_early: bool = True,
       batch_size: int = 8, restarts: int = 1, clip=(0.0, 1.0), seed: int = 0,
       sample_offset: int = 0, return_info: bool = False):
    """Minimum-L2 attack: minimize ||d||^2 + c * hinge(true vs best-other
    logit), optimizing a sigmoid reparametrization that keeps x+d inside
    the clip box, with a per-sample binary search over c.

    Returns the smallest successful perturbation found, or the original
    sample flagged attack-failed. Deterministic: restart randomness is
    keyed by (seed, global sample index, restart).
    """
    comp = _as_composite(victim)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    out = np.empty_like(x)
    failed = np.zeros(len(x), dtype=bool)
    for start in range(0, len(x), batch_size):
        sl = slice(start, min(start + batch_size, len(x)))
        adv, ok = _cw_chunk(comp, x[sl], y[sl], search_steps, max_iters,
                            learning_rate, c0, abort_early, restarts, clip,
                            seed, sample_offset + start)
        out[sl] = adv
        failed[sl] = ~ok
    if return_info:
        norms = np.sqrt(np.sum((out - x) ** 2, axis=1))
        return out, {"attack_failed": failed, "l2_norm": norms}
    return out


def _cw_chunk(comp, x, y, search_steps, max_iters, lr, c0, abort_early,
              restarts, clip, seed, idx0):
    b, d = x.shape
    lo, hi = clip
    span = hi - lo
    shrink = 1e-6
    xn = np.clip((x - lo) / span, shrink, 1.0 - shrink)
    w_base = 0.5 * np.log(xn / (1.0 - xn))

    best_adv = x.copy()
    best_norm = np.full(b, np.inf)
    succeeded = np.zeros(b, dtype=bool)

    for restart in range(restarts):
        if restart == 0:
            w0_restart = w_base
        else:
            noise = np.stack([
                _philox(seed, ((idx0 + i) << 20) + restart).normal(0.0, 0.1, size=d)
                for i in range(b)])
            w0_restart = w_base + noise
        c = np.full(b, c0)
        c_lo = np.zeros(b)
        c_hi = np.full(b, np.inf)

        for _ in range(search_steps):
            w = w0_restart.copy()
            m = np.zeros_like(w)
            v = np.zeros_like(w)
            best_obj = np.full(b, np.inf)
            stall = np.zeros(b, dtype=int)
            active = np.ones(b, dtype=bool)
            success_run = np.zeros(b, dtype=bool)

            for t in range(1, max_iters + 1):
                s = _stable_sigmoid(2.0 * w)
                x_adv = lo + span * s
                delta = x_adv - x
                z = np.atleast_2d(comp.logits(x_adv))
                margin, j = _margin_terms(z, y)
                miscls = np.argmax(z, axis=1) != y
                norms = np.sqrt(np.sum(delta * delta, axis=1))

                better = miscls & (norms < best_norm)
                if np.any(better):
                    best_adv[better] = x_adv[better]
                    best_norm[better] = norms[better]
                    succeeded |= better
                success_run |= miscls

                obj = norms * norms + c * np.maximum(margin, 0.0)
                active &= np.isfinite(obj)  # non-finite: abandon for this run
                improved = obj < best_obj
                best_obj = np.minimum(best_obj, obj)
                stall = np.where(improved, 0, stall + 1)
                if abort_early:
                    active &= stall < 40
                if not np.any(active):
                    break

                dy = np.zeros_like(z)
                hinge = margin > 0
                rows = np.arange(b)[hinge]
                dy[rows, y[hinge]] = c[hinge]
                dy[rows, j[hinge]] = -c[hinge]
                dx = np.atleast_2d(comp.vjp_mean(x_adv, dy))
                dw = (2.0 * delta + dx) * 2.0 * span * s * (1.0 - s)

                m += (1 - 0.9) * (dw - m)
                v += (1 - 0.999) * (dw * dw - v)
                step = lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
                w[active] -= step[active]

            c_hi = np.where(success_run, np.minimum(c_hi, c), c_hi)
            c_lo = np.where(success_run, c_lo, np.maximum(c_lo, c))
            c = np.where(np.isfinite(c_hi), 0.5 * (c_lo + c_hi), c * 10.0)

    return best_adv, succeeded


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------

def deepfool(victim, x, y, max_iters: int = 50, overshoot: float = 0.02,
             clip=(0.0, 1.0), return_info: bool = False):
    """Walk to the nearest linearized class boundary until the overshot
    candidate is misclassified, then return it clipped.

    The boundary choice minimizes |f_k - f_y| / ||grad f_k - grad f_y||^2
    over k != y, with the squared norm in both the selection and the step.
    """
    comp = _as_composite(victim)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    out = np.empty_like(x)
    iters_used = np.zeros(len(x), dtype=int)
    degenerate = np.zeros(len(x), dtype=bool)
    for i in range(len(x)):
        out[i], iters_used[i], degenerate[i] = _deepfool_single(
            comp, x[i], int(y[i]), max_iters, overshoot, clip)
    if return_info:
        return out, {"iterations": iters_used, "degenerate": degenerate}
    return out


def _deepfool_single(comp, x0, label, max_iters, overshoot, clip):
    r = np.zeros_like(x0)
    degenerate = False
    it = 0
    while it < max_iters:
        candidate = np.clip(x0 + (1.0 + overshoot) * r, clip[0], clip[1])
        if int(comp.predict(candidate)[0]) != label:
            break
        # gradients at the box-projected iterate: an unprojected working
        # point drifts outside the pixel box and stops matching the
        # clipped candidate the loop is judged on
        xi = np.clip(x0 + r, clip[0], clip[1])
        z = comp.logits(xi)
        jac = comp.class_jacobian(xi)
        diffs = z - z[label]
        wdiffs = jac - jac[label]
        sq = np.sum(wdiffs * wdiffs, axis=1)
        # a vanished boundary gradient makes that class unreachable, not close
        ratios = np.where(sq > 0, np.abs(diffs) / np.where(sq > 0, sq, 1.0), np.inf)
        ratios[label] = np.inf
        l = int(np.argmin(ratios))
        if not np.isfinite(ratios[l]):
            degenerate = True  # all boundary gradients vanished
            break
        r = r + (np.abs(diffs[l]) / sq[l]) * wdiffs[l]
        it += 1
    final = np.clip(x0 + (1.0 + overshoot) * r, clip[0], clip[1])
    return final, it, degenerate


# ---------------------------------------------------------------------------
# Attack sets
# ---------------------------------------------------------------------------

@dataclass
class AttackSet:
    """A perturbed dataset with per-sample bookkeeping.

    success and predicted_class are judged on the averaged logits of the
    composite that was attacked; per-system predictions stay in memory
    and are not persisted.
    """

    algorithm: str
    spec: AttackSpec
    seed: int
    x_adv: np.ndarray
    y: np.ndarray
    l2_norms: np.ndarray
    success: np.ndarray
    predicted_class: np.ndarray
    flags: list
    name: str = ""
    per_system_predicted: np.ndarray | None = None


def generate_attack_set(spec: AttackSpec, victim, dataset, seed: int = 0,
                        name: str = "") -> AttackSet:
    """Perturb every sample in (x, y) per the spec. Deterministic per seed."""
    comp = _as_composite(victim)
    x = np.asarray(dataset[0], dtype=np.float64)
    y = np.asarray(dataset[1])
    if not np.all(np.isfinite(x)):
        raise ValueError("dataset contains non-finite values")
    flags = [""] * len(x)

    if spec.algorithm == "fgs":
        x_adv, info = fgs(comp, x, y, spec.eps, spec.clip, spec.sign_variant,
                          return_info=True)
        for i in np.flatnonzero(info["null_gradient"]):
            flags[i] = "null-gradient"
    elif spec.algorithm == "pgd":
        x_adv = pgd(comp, x, y, spec.eps_total, spec.alpha, spec.iterations,
                    spec.clip)
    elif spec.algorithm == "cw":
        x_adv, info = cw(comp, x, y, search_steps=spec.search_steps,
                         max_iters=spec.cw_max_iters,
                         learning_rate=spec.learning_rate, c0=spec.c0,
                         abort_early=spec.abort_early,
                         batch_size=spec.batch_size, restarts=spec.restarts,
                         clip=spec.clip, seed=seed, return_info=True)
        for i in np.flatnonzero(info["attack_failed"]):
            flags[i] = "attack-failed"
    else:
        x_adv, info = deepfool(comp, x, y, spec.df_max_iters, spec.overshoot,
                               spec.clip, return_info=True)
        for i in np.flatnonzero(info["degenerate"]):
            flags[i] = "degenerate-gradient"

    z = np.atleast_2d(comp.logits(x_adv))
    predicted = np.argmax(z, axis=1)
    per_system = np.stack([s.predict(x_adv) for s in comp.systems], axis=1)
    return AttackSet(
        algorithm=spec.algorithm,
        spec=spec,
        seed=int(seed),
        x_adv=x_adv,
        y=y.copy(),
        l2_norms=np.sqrt(np.sum((x_adv - x) ** 2, axis=1)),
        success=predicted != y,
        predicted_class=predicted,
        flags=flags,
        name=name,
        per_system_predicted=per_system,
    )


def save_attack_set(aset: AttackSet, path) -> None:
    """Container plus a human-readable CSV sidecar at <path>.csv."""
    from . import checkpoint  # local import: checkpoint has no attack deps

    meta = {
        "algorithm": aset.algorithm,
        "spec": aset.spec.to_json(),
        "seed": aset.seed,
        "flags": aset.flags,
        "name": aset.name,
    }
    checkpoint.write_container(path, "ADVSET", meta, {
        "x_adv": aset.x_adv,
        "y": aset.y.astype(np.float64),
        "l2_norms": aset.l2_norms,
        "success": aset.success.astype(np.float64),
        "predicted_class": aset.predicted_class.astype(np.float64),
    })
    import csv

    with open(str(path) + ".csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "algorithm", "l2_norm", "success",
                         "predicted_class"])
        for i in range(len(aset.x_adv)):
            writer.writerow([i, aset.algorithm, repr(float(aset.l2_norms[i])),
                             int(aset.success[i]), int(aset.predicted_class[i])])


def load_attack_set(path) -> AttackSet:
    from . import checkpoint

    _, meta, blobs = checkpoint.read_container(path, expect_section="ADVSET")
    return AttackSet(
        algorithm=meta["algorithm"],
        spec=AttackSpec.from_json(meta["spec"]),
        seed=int(meta["seed"]),
        x_adv=blobs["x_adv"],
        y=blobs["y"].astype(np.int64),
        l2_norms=blobs["l2_norms"],
        success=blobs["success"] != 0.0,
        predicted_class=blobs["predicted_class"].astype(np.int64),
        flags=list(meta["flags"]),
        name=meta.get("name", ""),
    )
