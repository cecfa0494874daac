"""Training-order planning for the defense stack.

Four artifacts have to be trained before every defense can be deployed: the
victim classifier, the denoising autoencoder, the compression autoencoder
(which is always trained together with its reduced classifier), and the
DAE-reduced classifier.  This module enumerates the orders in which they can
be built, prunes orders that are dominated by a reordering, and computes
per-step schedules: cumulative training time, which defenses become
deployable at each step, and the average accuracy the desk would measure if
attacked at that point.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import metrics
from .defenses import DEFENSE_KINDS

CLF = "clf"
DAE = "dae"
AE = "ae"
DAE_RED_CLF = "dae_red_clf"

COMPONENTS = (CLF, DAE, AE, DAE_RED_CLF)

# Which trained components unlock which defense. Used by the pruning
# heuristic: the cascade counts as unlocked once both autoencoders exist.
UNLOCK_REQUIREMENTS = {
    "none": frozenset({CLF}),
    "dae": frozenset({CLF, DAE}),
    "cascade": frozenset({DAE, AE}),
    "hl": frozenset({DAE, DAE_RED_CLF}),
    "ae": frozenset({AE}),
}

# Deployability is stricter for the cascade: a desk that has not trained the
# victim classifier yet is not treated as running the cascade, so the cascade
# joins the schedule only once clf, DAE, and AE are all present.  The
# reference schedules require this (a DAE/DAE-red-clf/AE prefix deploys only
# the hidden-layer and AE defenses).
DEPLOY_REQUIREMENTS = dict(UNLOCK_REQUIREMENTS)
DEPLOY_REQUIREMENTS["cascade"] = frozenset({CLF, DAE, AE})

_KIND_RANK = {kind: i for i, kind in enumerate(DEFENSE_KINDS)}


def available_defenses(components, requirements=None) -> tuple:
    """Defense kinds deployable once `components` are trained.

    Returned in canonical kind order. `requirements` defaults to the
    deployability map; pass UNLOCK_REQUIREMENTS for the pruning view.
    """
    if requirements is None:
        requirements = DEPLOY_REQUIREMENTS
    have = frozenset(components)
    unknown = have - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown component: {sorted(unknown)[0]}")
    kinds = [k for k in DEFENSE_KINDS if requirements[k] <= have]
    return tuple(sorted(kinds, key=_KIND_RANK.__getitem__))


@dataclass(frozen=True)
class CostModel:
    """Wall-clock training cost of each artifact, in seconds.

    Defaults are the reference desk timings. `ae` is the compression
    autoencoder alone; scheduling an AE step always trains its reduced
    classifier in the same step, so the step costs `ae_bundle`.
    """

    clf: float = 42.13
    reduced_clf: float = 15.46
    dae: float = 300.0
    ae: float = 60.0

    def __post_init__(self):
        for name in ("clf", "reduced_clf", "dae", "ae"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and np.isfinite(v) and v > 0):
                raise ValueError(f"cost {name} must be a positive number")

    @property
    def ae_bundle(self) -> float:
        return self.ae + self.reduced_clf

    @property
    def total(self) -> float:
        return self.clf + self.dae + self.ae_bundle + self.reduced_clf

    def component_cost(self, component: str) -> float:
        costs = {CLF: self.clf, DAE: self.dae,
                 AE: self.ae_bundle, DAE_RED_CLF: self.reduced_clf}
        if component not in costs:
            raise ValueError(f"unknown component: {component}")
        return costs[component]

    @classmethod
    def from_models(cls, clf, dae, ae, reduced_clf) -> "CostModel":
        """Build a cost model from measured training times.

        Each argument is a trained model whose provenance records
        `train_seconds`.
        """
        def seconds(model):
            return float(model.provenance["train_seconds"])
        return cls(clf=seconds(clf), reduced_clf=seconds(reduced_clf),
                   dae=seconds(dae), ae=seconds(ae))

    @classmethod
    def from_csv(cls, path) -> "CostModel":
        """Read `component,seconds` rows naming clf, reduced_clf, dae, ae."""
        import csv

        seconds = {}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                seconds[rec["component"].strip()] = float(rec["seconds"])
        missing = {"clf", "reduced_clf", "dae", "ae"} - set(seconds)
        if missing:
            raise ValueError(f"cost file {path} is missing components: "
                             f"{', '.join(sorted(missing))}")
        return cls(clf=seconds["clf"], reduced_clf=seconds["reduced_clf"],
                   dae=seconds["dae"], ae=seconds["ae"])


@dataclass(frozen=True)
class TrainingOrder:
    order_id: int
    components: tuple

    def __post_init__(self):
        if tuple(sorted(self.components)) != tuple(sorted(COMPONENTS)):
            raise ValueError("components must be a permutation of "
                             f"{COMPONENTS}")

    @property
    def root(self) -> str:
        return self.components[0]


# The DAE-reduced classifier cannot be trained first (it needs the DAE), so
# orders are enumerated per starting component, remaining three components in
# lexicographic permutation order over the listed base sequence.
_ROOTS = (CLF, DAE, AE)
_BASE_REST = {
    CLF: (DAE, DAE_RED_CLF, AE),
    DAE: (CLF, DAE_RED_CLF, AE),
    AE: (CLF, DAE, DAE_RED_CLF),
}


def enumerate_orders() -> tuple:
    """All 18 training orders, ids 0..17, in id order."""
    orders = []
    for r, root in enumerate(_ROOTS):
        for p, rest in enumerate(permutations(_BASE_REST[root])):
            orders.append(TrainingOrder(6 * r + p, (root,) + rest))
    return tuple(orders)


@dataclass(frozen=True)
class PruneResult:
    survivors: tuple
    eliminated: dict  # order_id -> (rule, reason)

    def survivor_ids(self) -> tuple:
        return tuple(o.order_id for o in self.survivors)


def _unlocked_by_third(prefix, third) -> frozenset:
    before = set(available_defenses(prefix, UNLOCK_REQUIREMENTS))
    after = set(available_defenses(tuple(prefix) + (third,),
                                   UNLOCK_REQUIREMENTS))
    return frozenset(after - before)


def prune(orders) -> PruneResult:
    """Discard training orders dominated by a reordering.

    Four rules, applied in sequence; each examines only orders still alive:

    1. The DAE-reduced classifier before the DAE it is derived from.
    2. The DAE immediately before the victim classifier: the swapped pair
       deploys every defense at least as early.
    3. Both autoencoders before any classifier.
    4. Among orders sharing their first two components, one whose third
       component unlocks strictly fewer defenses than a sibling's third.

    The result is independent of the input ordering.
    """
    orders = sorted(orders, key=lambda o: o.order_id)
    if len({o.order_id for o in orders}) != len(orders):
        raise ValueError("duplicate order_id")
    eliminated = {}

    def alive():
        return [o for o in orders if o.order_id not in eliminated]

    for o in alive():
        c = o.components
        if c.index(DAE_RED_CLF) < c.index(DAE):
            eliminated[o.order_id] = (
                "R1", f"trains {DAE_RED_CLF} before {DAE}")

    for o in alive():
        c = o.components
        if any(c[i] == DAE and c[i + 1] == CLF for i in range(3)):
            eliminated[o.order_id] = (
                "R2", f"trains {DAE} immediately before {CLF}; swapping the "
                      "pair deploys every defense at least as early")

    for o in alive():
        if o.components[:2] == (DAE, AE):
            eliminated[o.order_id] = (
                "R3", "trains both autoencoders before any classifier")

    # Rule 4 compares against every enumerated sibling, including ones the
    # earlier rules removed: the reordering argument does not need the
    # sibling itself to be a good plan.
    groups = {}
    for o in orders:
        groups.setdefault(o.components[:2], []).append(o)
    for o in alive():
        prefix = o.components[:2]
        third = o.components[2]
        mine = _unlocked_by_third(prefix, third)
        for sib in groups[prefix]:
            theirs = _unlocked_by_third(prefix, sib.components[2])
            if len(theirs) > len(mine):
                eliminated[o.order_id] = (
                    "R4", f"after {prefix[0]}+{prefix[1]}, training {third} "
                          f"unlocks {len(mine)} defense(s) but "
                          f"{sib.components[2]} (order {sib.order_id}) "
                          f"unlocks {len(theirs)}")
                break

    survivors = tuple(alive())
    return PruneResult(survivors=survivors, eliminated=eliminated)


@dataclass(frozen=True)
class ScheduleStep:
    step: int
    component: str
    cumulative_seconds: float
    defenses_added: tuple
    avg_accuracy: float | None = None


@dataclass(frozen=True)
class Schedule:
    order: TrainingOrder
    steps: tuple

    @property
    def total_seconds(self) -> float:
        return self.steps[-1].cumulative_seconds

    def defenses_after(self, step: int) -> tuple:
        """All defense kinds deployable once steps 1..step are done."""
        kinds = []
        for s in self.steps[:step]:
            kinds.extend(s.defenses_added)
        return tuple(sorted(kinds, key=_KIND_RANK.__getitem__))


def schedule(order: TrainingOrder, cost: CostModel = None,
             matrix: "metrics.AccuracyMatrix" = None) -> Schedule:
    """Per-step schedule for one training order.

    Each step reports cumulative seconds and the defenses that become
    deployable when it finishes.  With an accuracy matrix, each step also
    carries the mean accuracy over the deployable defenses when all of them
    are attacked at once; steps with no deployable defense, or whose row is
    absent from the matrix, carry None.
    """
    if cost is None:
        cost = CostModel()
    steps = []
    trained = []
    deployed = ()
    elapsed = 0.0
    for i, component in enumerate(order.components, start=1):
        elapsed += cost.component_cost(component)
        trained.append(component)
        now = available_defenses(trained)
        added = tuple(k for k in now if k not in deployed)
        deployed = now
        steps.append(ScheduleStep(
            step=i, component=component, cumulative_seconds=elapsed,
            defenses_added=added, avg_accuracy=_avg_accuracy(matrix, now)))
    return Schedule(order=order, steps=tuple(steps))


def _avg_accuracy(matrix, deployable):
    if matrix is None or not deployable:
        return None
    try:
        cells = [matrix.cell(deployable, e) for e in deployable]
    except KeyError:
        return None
    return float(np.mean(cells))


@dataclass(frozen=True)
class Recommendation:
    order: TrainingOrder
    step: int
    completion_seconds: float
    avg_accuracy: float | None


@dataclass(frozen=True)
class BudgetRanking:
    budget_seconds: float
    ranking: tuple
    diagnostic: str | None = None


def recommend(orders, matrix, budget_seconds, cost: CostModel = None,
              ) -> BudgetRanking:
    """Rank training orders under a wall-clock budget.

    Each order is judged by the average accuracy at the last step it can
    complete within the budget; ties break by earlier completion time, then
    by ascending order id.  Orders whose accuracy is unknown at that step
    rank below any known accuracy.  Orders that cannot complete even their
    first step are excluded; if none can, the ranking is empty and
    `diagnostic` says so.
    """
    if budget_seconds <= 0:
        raise ValueError("budget_seconds must be positive")
    if cost is None:
        cost = CostModel()
    recs = []
    for order in orders:
        sched = schedule(order, cost, matrix)
        done = [s for s in sched.steps
                if s.cumulative_seconds <= budget_seconds + 1e-9]
        if not done:
            continue
        last = done[-1]
        recs.append(Recommendation(
            order=order, step=last.step,
            completion_seconds=last.cumulative_seconds,
            avg_accuracy=last.avg_accuracy))
    # completion times are sums in schedule order; quantize so that equal
    # step budgets tie exactly regardless of summation order
    recs.sort(key=lambda r: (
        r.avg_accuracy is None,
        -(r.avg_accuracy if r.avg_accuracy is not None else 0.0),
        round(r.completion_seconds, 6),
        r.order.order_id))
    diagnostic = None
    if not recs:
        diagnostic = (f"no training order completes its first step within "
                      f"{metrics.format_percent(budget_seconds)} s")
    return BudgetRanking(budget_seconds=float(budget_seconds),
                         ranking=tuple(recs), diagnostic=diagnostic)


def write_plan_csv(schedules, path) -> None:
    """Write schedules as CSV rows of
    order_id,step,component,cumulative_seconds,defenses_added,avg_accuracy.

    defenses_added joins kinds with "+"; empty cells mean no defense was
    added / no accuracy is known at that step.
    """
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["order_id", "step", "component",
                         "cumulative_seconds", "defenses_added",
                         "avg_accuracy"])
        for sched in schedules:
            for s in sched.steps:
                writer.writerow([
                    sched.order.order_id, s.step, s.component,
                    metrics.format_percent(s.cumulative_seconds),
                    "+".join(s.defenses_added),
                    "" if s.avg_accuracy is None
                    else metrics.format_percent(s.avg_accuracy)])
