"""Accuracy matrices and replacement-induced robustness.

The quantities: an attack a(D) is tuned against the defense set D. Its
success s(a(D)) is the mean accuracy drop over the defenses in D; its
success against a replacement defense e is s(a(D)|e); the robustness of
the swap is the percentage by which s(a(D)|e) falls short of s(a(D)).

Matrices are plain data so every metric is computable from hand-entered
tables without touching a model.
"""

from __future__ import annotations

import csv
import decimal
from dataclasses import dataclass, field

import numpy as np

from . import attacks, defenses

# markers for undefined robustness cells
UNDEFINED_IN_D = "undefined"
UNDEFINED_NULL_ATTACK = "undefined (null attack)"

NO_ATTACK = ()


def normalize_set(D) -> tuple:
    """Attacked sets are canonically sorted tuples of kind names."""
    if isinstance(D, str):
        D = [D] if D else []
    kinds = sorted({k.lower() for k in D})
    for k in kinds:
        if k not in defenses.DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {k!r}")
    return tuple(kinds)


def set_label(D) -> str:
    return "+".join(normalize_set(D))


def format_percent(value: float) -> str:
    """Up to 6 decimal places, trailing zeros trimmed."""
    return f"{round(float(value), 6):.6f}".rstrip("0").rstrip(".")


def round_half_away(value: float, digits: int = 2) -> float:
    """Round half away from zero, the convention the reports display."""
    q = decimal.Decimal(10) ** -digits
    d = decimal.Decimal(repr(float(value))).quantize(
        q, rounding=decimal.ROUND_HALF_UP)
    return float(d)


@dataclass
class AccuracyMatrix:
    """Rows: attacked defense sets (the empty set is the no-attack row).
    Columns: the defense actually deployed. Cells: accuracy percent."""

    columns: tuple
    rows: dict = field(default_factory=dict)

    def __post_init__(self):
        self.columns = tuple(c.lower() for c in self.columns)
        self.rows = {normalize_set(D): dict(cells)
                     for D, cells in self.rows.items()}
        self.validate()

    def validate(self):
        if NO_ATTACK not in self.rows:
            raise ValueError("matrix is missing the no-attack row")
        for e in self.columns:
            if self.rows[NO_ATTACK].get(e) is None:
                raise ValueError(f"no-attack row is missing column {e!r}")
        for D, cells in self.rows.items():
            for e, v in cells.items():
                if e not in self.columns:
                    raise ValueError(f"cell column {e!r} not declared")
                if v is not None and not 0.0 <= v <= 100.0:
                    raise ValueError(
                        f"accuracy {v} for D={D} e={e} outside [0, 100]")

    def cell(self, D, e: str) -> float:
        D = normalize_set(D)
        if D not in self.rows:
            raise KeyError(f"no row for attacked set {set_label(D) or '{}'}")
        v = self.rows[D].get(e)
        if v is None:
            raise KeyError(f"missing cell: attacked set "
                           f"{set_label(D) or '{}'}, defense {e!r}")
        return v

    def no_attack(self, e: str) -> float:
        return self.cell(NO_ATTACK, e)

    def attacked_sets(self) -> list:
        return sorted((D for D in self.rows if D), key=lambda d: (len(d), d))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["attacked_set"] + list(self.columns))
            for D in [NO_ATTACK] + self.attacked_sets():
                out = []
                for e in self.columns:
                    v = self.rows[D].get(e)
                    out.append("" if v is None else format_percent(v))
                w.writerow(["+".join(D)] + out)

    @classmethod
    def from_csv(cls, path) -> "AccuracyMatrix":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if not header or header[0] != "attacked_set":
                raise ValueError(
                    f"matrix CSV must start with an attacked_set column, "
                    f"got {header[:1]}")
            columns = tuple(h.lower() for h in header[1:])
            rows = {}
            for rec in reader:
                if not rec:
                    continue
                D = normalize_set(rec[0].split("+") if rec[0] else [])
                rows[D] = {e: (float(v) if v != "" else None)
                           for e, v in zip(columns, rec[1:])}
        return cls(columns, rows)


def success(matrix: AccuracyMatrix, D) -> float:
    """Mean accuracy drop over the attacked defenses themselves."""
    D = normalize_set(D)
    if not D:
        raise ValueError("success is undefined for the no-attack row")
    drops = [matrix.no_attack(d) - matrix.cell(D, d) for d in D]
    return float(np.mean(drops))


def success_given(matrix: AccuracyMatrix, D, e: str) -> float:
    """Accuracy drop at defense e when the attack was tuned against D."""
    D = normalize_set(D)
    return matrix.no_attack(e) - matrix.cell(D, e)


def replacement_robustness(matrix: AccuracyMatrix, D, e: str):
    """Percentage by which swapping in e weakens the attack.

    100 * (s(a(D)) - s(a(D)|e)) / s(a(D)); undefined when e is in D or
    when the attack had no success to lose.
    """
    D = normalize_set(D)
    if e in D:
        return UNDEFINED_IN_D
    s = success(matrix, D)
    if s == 0.0:
        return UNDEFINED_NULL_ATTACK
    return 100.0 * (s - success_given(matrix, D, e)) / s


def universal_lower_bound(matrix: AccuracyMatrix, D, E):
    """(max over e in E outside D of r_e(D), the maximizing e)."""
    D = normalize_set(D)
    candidates = [e for e in E if e.lower() not in D]
    if not candidates:
        raise ValueError("no replacement defense outside the attacked set")
    best = None
    best_e = None
    marker = None
    for e in candidates:
        r = replacement_robustness(matrix, D, e.lower())
        if isinstance(r, str):
            marker = r
            continue
        if best is None or r > best:
            best, best_e = r, e.lower()
    if best is None:
        return marker, None
    return best, best_e


@dataclass
class RobustnessReport:
    """Per attacked set: the attack's success, its success against each
    replacement, the robustness of each replacement, and the best one."""

    columns: tuple
    entries: dict  # D -> {"s", "s_given", "r", "lower_bound", "argmax"}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["attacked_set", "s"]
                       + [f"s_given_{e}" for e in self.columns]
                       + [f"r_{e}" for e in self.columns]
                       + ["lower_bound", "argmax_e"])
            for D in sorted(self.entries, key=lambda d: (len(d), d)):
                ent = self.entries[D]
                row = ["+".join(D), format_percent(ent["s"])]
                for e in self.columns:
                    row.append(format_percent(ent["s_given"][e]))
                for e in self.columns:
                    r = ent["r"][e]
                    row.append("" if r == UNDEFINED_IN_D
                               else r if isinstance(r, str)
                               else format_percent(r))
                lb = ent["lower_bound"]
                row.append(lb if isinstance(lb, str) else format_percent(lb))
                row.append(ent["argmax"] or "")
                w.writerow(row)


def robustness_report(matrix: AccuracyMatrix, E=None) -> RobustnessReport:
    """Evaluate every attacked row of the matrix against replacements E
    (default: every matrix column)."""
    E = tuple(e.lower() for e in (E or matrix.columns))
    entries = {}
    for D in matrix.attacked_sets():
        r = {e: replacement_robustness(matrix, D, e) for e in E}
        finite = {e: v for e, v in r.items() if not isinstance(v, str)}
        if finite:
            argmax = max(finite, key=lambda e: finite[e])
            bound = finite[argmax]
        elif all(v == UNDEFINED_IN_D for v in r.values()):
            argmax, bound = None, UNDEFINED_IN_D
        else:
            argmax, bound = None, UNDEFINED_NULL_ATTACK
        entries[D] = {
            "s": success(matrix, D),
            "s_given": {e: success_given(matrix, D, e) for e in E},
            "r": r,
            "lower_bound": bound,
            "argmax": argmax,
        }
    return RobustnessReport(E, entries)


def build_accuracy_matrix(classifiers: dict, pipelines: dict,
                          attack_spec: attacks.AttackSpec, dataset,
                          attacked_sets, seed: int = 0,
                          errors: dict | None = None) -> AccuracyMatrix:
    """Run the attack against each requested defense set and score every
    deployed defense on the shared perturbed samples.

    pipelines maps kind -> DefensePipeline (the matrix columns). Attack
    rows whose generation fails are recorded in `errors` (if given) and
    left absent rather than aborting the sweep.
    """
    x = np.asarray(dataset[0], dtype=np.float64)
    y = np.asarray(dataset[1])
    columns = tuple(pipelines)

    def accuracy_percent(kind, xs):
        pred = defenses.classify(pipelines[kind], classifiers, xs)
        return 100.0 * float(np.mean(pred == y))

    rows = {NO_ATTACK: {e: accuracy_percent(e, x) for e in columns}}

    for D in attacked_sets:
        D = normalize_set(D)
        if not D:
            continue  # the empty set is the no-attack row, always present
        try:
            victims = []
            for d in D:
                if d not in pipelines:
                    raise defenses.MissingComponentError(d)
                victims.append(defenses.as_victim(pipelines[d], classifiers))
            composite = attacks.CompositeVictim(tuple(victims))
            aset = attacks.generate_attack_set(attack_spec, composite,
                                               (x, y), seed=seed)
            rows[D] = {e: accuracy_percent(e, aset.x_adv) for e in columns}
        except Exception as exc:  # record and continue the sweep
            if errors is not None:
                errors[D] = f"{type(exc).__name__}: {exc}"
            rows[D] = {e: None for e in columns}

    return AccuracyMatrix(columns, rows)
