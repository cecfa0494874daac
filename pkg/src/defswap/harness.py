"""Experiment plumbing: config files, the desk-scale experiment, manifests,
and fixture verification.

A desk experiment trains the full component stack (victim classifier, DAE,
compression autoencoder, reduced classifiers) on a small dataset, runs each
configured attack adaptively against every deployable defense, and writes
accuracy matrices, robustness reports, saved adversarial sets, checkpoints,
and a JSON manifest recording seeds and wall-clock times.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import attacks, checkpoint, data, defenses, metrics, models, planner

ALGORITHMS = ("fgs", "pgd", "cw", "df")

# checkpoint basenames for the five trained artifacts
STACK_FILES = {
    "victim": "victim.ckpt",
    "dae": "dae.ckpt",
    "compression_ae": "compression_ae.ckpt",
    "ae_reduced_classifier": "ae_reduced_classifier.ckpt",
    "dae_reduced_classifier": "dae_reduced_classifier.ckpt",
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Flat key-value experiment description (INI sections).

    `data_dir` may be empty: the bundled handwritten-digit corpus is used
    whenever the directory holds no IDX files.
    """

    data_dir: str = ""
    train_size: int = 5000
    test_size: int = 500
    eval_size: int = 100
    victim_epochs: int = 20
    dae_epochs: int = 150
    ae_epochs: int = 100
    algorithms: tuple = ALGORITHMS
    matrix_algorithm: str = "cw"
    attacked_sets: tuple = (("none",), ("dae",), ("cascade",),
                            ("hl",), ("ae",))
    budget_seconds: float = 120.0
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        for name in ("train_size", "test_size", "eval_size",
                     "victim_epochs", "dae_epochs", "ae_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for alg in self.algorithms:
            if alg not in ALGORITHMS:
                raise ValueError(f"unknown attack algorithm: {alg}")
        if self.matrix_algorithm not in ALGORITHMS:
            raise ValueError(
                f"unknown attack algorithm: {self.matrix_algorithm}")
        object.__setattr__(
            self, "attacked_sets",
            tuple(metrics.normalize_set(s) for s in self.attacked_sets))
        if self.budget_seconds <= 0:
            raise ValueError("budget_seconds must be positive")
        if self.data_dir and not Path(self.data_dir).is_dir():
            raise FileNotFoundError(f"data directory not found: {self.data_dir}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["algorithms"] = list(self.algorithms)
        d["attacked_sets"] = [list(s) for s in self.attacked_sets]
        return d

    def config_hash(self) -> str:
        # identity of the experiment inputs: the output location changes
        # nothing that gets computed, so it stays out of the hash
        d = self.to_dict()
        del d["out_dir"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_CONFIG_SCHEMA = {
    "data": {"dir": str, "train_size": int, "test_size": int,
             "eval_size": int},
    "models": {"victim_epochs": int, "dae_epochs": int, "ae_epochs": int},
    "attacks": {"algorithms": "list"},
    "matrix": {"algorithm": str, "attacked_sets": "sets"},
    "plan": {"budget_seconds": float},
    "run": {"seed": int, "out_dir": str},
}

_KEY_TO_FIELD = {
    ("data", "dir"): "data_dir",
    ("data", "train_size"): "train_size",
    ("data", "test_size"): "test_size",
    ("data", "eval_size"): "eval_size",
    ("models", "victim_epochs"): "victim_epochs",
    ("models", "dae_epochs"): "dae_epochs",
    ("models", "ae_epochs"): "ae_epochs",
    ("attacks", "algorithms"): "algorithms",
    ("matrix", "algorithm"): "matrix_algorithm",
    ("matrix", "attacked_sets"): "attacked_sets",
    ("plan", "budget_seconds"): "budget_seconds",
    ("run", "seed"): "seed",
    ("run", "out_dir"): "out_dir",
}


def load_config(path) -> ExperimentConfig:
    """Parse an INI experiment file; unknown sections or keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path) as fh:
        parser.read_file(fh)

    kwargs = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise ValueError(f"unknown config section: [{section}]")
        for key, raw in parser.items(section):
            if key not in _CONFIG_SCHEMA[section]:
                raise ValueError(f"unknown config key: [{section}] {key}")
            kind = _CONFIG_SCHEMA[section][key]
            if kind == "list":
                value = tuple(v.strip() for v in raw.split(",") if v.strip())
            elif kind == "sets":
                value = tuple(tuple(p.strip() for p in group.split("+"))
                              for group in raw.split(";") if group.strip())
            elif kind is int:
                value = int(raw)
            elif kind is float:
                value = float(raw)
            else:
                value = raw.strip()
            kwargs[_KEY_TO_FIELD[(section, key)]] = value
    return ExperimentConfig(**kwargs)


def stack_seeds(seed: int) -> dict:
    """Per-artifact training seeds derived from the experiment seed."""
    return {"victim": seed, "dae_mix": seed, "dae": seed + 1,
            "compression_ae": seed + 2, "ae_reduced_classifier": seed + 3,
            "dae_reduced_classifier": seed + 4, "eval_subsample": seed,
            "attacks": seed}


def write_manifest(out_dir, command: str, config, seeds: dict,
                   wall_seconds: float, outputs,
                   extra: dict | None = None) -> Path:
    """Record what a run produced and how to reproduce it byte-for-byte.

    `config` is an ExperimentConfig, or a plain dict paired with a
    "config_hash" entry of its own for commands driven by input files.
    """
    out_dir = Path(out_dir)
    if isinstance(config, ExperimentConfig):
        config_hash, config_dict = config.config_hash(), config.to_dict()
    else:
        config_dict = dict(config)
        config_hash = config_dict.pop("config_hash")
    manifest = {
        "command": command,
        "package_version": _package_version(),
        "config_hash": config_hash,
        "config": config_dict,
        "seeds": seeds,
        "started_utc": datetime.now(timezone.utc).isoformat(),
        "wall_clock_seconds": round(float(wall_seconds), 3),
        "outputs": sorted(str(Path(p).relative_to(out_dir))
                          if Path(p).is_relative_to(out_dir) else str(p)
                          for p in outputs),
    }
    if extra:
        manifest["extra"] = extra
    path = out_dir / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def hash_file(path) -> str:
    """Short content hash used to fingerprint input files in manifests."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _package_version() -> str:
    from . import __version__
    return __version__


# ---------------------------------------------------------------------------
# Component stack
# ---------------------------------------------------------------------------

@dataclass
class Stack:
    """The five trained artifacts plus the data they were trained on."""

    train: data.Dataset
    test: data.Dataset
    source: str  # "idx" or "digits-surrogate"
    victim: models.TrainedModel
    dae: models.TrainedModel
    compression_ae: models.TrainedModel
    classifiers: dict
    pipelines: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.pipelines:
            self.pipelines = defenses.build_all(
                self.dae, self.compression_ae, self.classifiers)

    @property
    def model_bank(self) -> dict:
        return {"victim": self.victim, "dae": self.dae,
                "compression_ae": self.compression_ae,
                "ae_reduced_classifier":
                    self.classifiers[defenses.AE_REDUCED],
                "dae_reduced_classifier":
                    self.classifiers[defenses.DAE_REDUCED]}


def build_stack(config: ExperimentConfig, log=None) -> Stack:
    """Train every artifact from scratch per the configured sizes/seeds."""
    def say(msg):
        if log:
            log(msg)

    seeds = stack_seeds(config.seed)
    train, test, source = data.load_default(
        config.data_dir or None, train_size=config.train_size,
        seed=config.seed)
    if len(test) > config.test_size:
        test = data.subsample(test, config.test_size, config.seed)
    say(f"data: {source}, {len(train)} train / {len(test)} test")

    timings = {}

    def timed(name, fn):
        t0 = time.perf_counter()
        out = fn()
        timings[name] = time.perf_counter() - t0
        say(f"{name}: {timings[name]:.1f}s")
        return out

    victim = timed("victim", lambda: models.train(
        models.fc_classifier_spec(
            optimizer=models.OptimizerRecipe(epochs=config.victim_epochs)),
        (train.x, train.y), seed=seeds["victim"], eval_data=(test.x, test.y)))

    victim_sys = attacks.VictimSystem.from_model(victim, name="victim")

    def fgs_noise(xb):
        return attacks.fgs(victim_sys, xb, victim_sys.predict(xb), eps=1.5)

    mixed = models.make_dae_training_set(train.x, [fgs_noise], 0.5,
                                         seed=seeds["dae_mix"])
    dae = timed("dae", lambda: models.train(
        models.dae_spec(optimizer=models.OptimizerRecipe(
            epochs=config.dae_epochs)),
        mixed, seed=seeds["dae"]))

    ae = timed("compression_ae", lambda: models.train(
        models.compression_ae_spec(optimizer=models.OptimizerRecipe(
            batch_size=500, epochs=config.ae_epochs)),
        (train.x, train.x), seed=seeds["compression_ae"]))

    classifiers = {defenses.FULL: victim}
    classifiers[defenses.AE_REDUCED] = timed(
        "ae_reduced_classifier", lambda: models.derive_reduced_classifier(
            models.ReducedClassifierRecipe(
                "retrain", victim, models.bottleneck_encoder(ae), (81,)),
            (train.x, train.y), seed=seeds["ae_reduced_classifier"]))
    classifiers[defenses.DAE_REDUCED] = timed(
        "dae_reduced_classifier", lambda: models.derive_reduced_classifier(
            models.ReducedClassifierRecipe(
                "retrain", victim, models.bottleneck_encoder(dae), (81,)),
            (train.x, train.y), seed=seeds["dae_reduced_classifier"]))

    return Stack(train=train, test=test, source=source, victim=victim,
                 dae=dae, compression_ae=ae, classifiers=classifiers,
                 timings=timings)


def save_stack(stack: Stack, out_dir) -> list:
    """Checkpoint the five artifacts.

    Wall-clock provenance stays out of the files so a rerun with the same
    config and seeds reproduces them byte-identically; measured times
    belong in the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, model in stack.model_bank.items():
        stable = {k: v for k, v in model.provenance.items()
                  if k != "train_seconds"}
        path = out_dir / STACK_FILES[name]
        checkpoint.save_model(dataclasses.replace(model, provenance=stable),
                              path)
        written.append(path)
    return written


def load_stack_models(checkpoint_dir) -> dict:
    """Load the five checkpoints written by save_stack."""
    checkpoint_dir = Path(checkpoint_dir)
    bank = {}
    for name, fname in STACK_FILES.items():
        path = checkpoint_dir / fname
        if not path.is_file():
            raise FileNotFoundError(f"missing checkpoint: {path}")
        bank[name] = checkpoint.load_model(path)
    return bank


def pipelines_from_models(bank: dict) -> tuple:
    """(classifiers, pipelines) from a loaded checkpoint bank."""
    classifiers = {
        defenses.FULL: bank["victim"],
        defenses.AE_REDUCED: bank["ae_reduced_classifier"],
        defenses.DAE_REDUCED: bank["dae_reduced_classifier"],
    }
    pipelines = defenses.build_all(bank["dae"], bank["compression_ae"],
                                   classifiers)
    return classifiers, pipelines


# ---------------------------------------------------------------------------
# Desk experiment
# ---------------------------------------------------------------------------

def pipeline_accuracy(pipelines, classifiers, kind: str, x, y) -> float:
    """Percent accuracy of one deployed defense on a batch."""
    pred = defenses.classify(pipelines[kind], classifiers, x)
    return 100.0 * float(np.mean(pred == np.asarray(y)))


@dataclass
class DeskResults:
    config: ExperimentConfig
    stack: Stack
    eval_set: data.Dataset
    clean: dict                 # defense kind -> percent accuracy
    matrices: dict              # algorithm -> AccuracyMatrix
    attack_sets: dict           # (algorithm, kind) -> AttackSet
    outputs: list
    wall_seconds: float


def run_desk_experiment(config: ExperimentConfig, log=None) -> DeskResults:
    """Train the stack, attack every defense with every configured
    algorithm, and write matrices/reports/adversarial sets/checkpoints
    plus a manifest under config.out_dir."""
    def say(msg):
        if log:
            log(msg)

    t0 = time.perf_counter()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stack = build_stack(config, log=log)
    eval_set = data.subsample(stack.test, config.eval_size, config.seed)
    kinds = [k for k in defenses.DEFENSE_KINDS if k in stack.pipelines]

    outputs = save_stack(stack, out_dir / "checkpoints")
    clean = {k: pipeline_accuracy(stack.pipelines, stack.classifiers, k,
                                  eval_set.x, eval_set.y) for k in kinds}
    say("clean: " + "  ".join(f"{k}={clean[k]:.1f}" for k in kinds))

    attack_dir = out_dir / "attacks"
    attack_dir.mkdir(exist_ok=True)
    matrices = {}
    attack_sets = {}
    for alg in config.algorithms:
        spec = attacks.AttackSpec(algorithm=alg)
        rows = {metrics.NO_ATTACK: dict(clean)}
        for d in kinds:
            t1 = time.perf_counter()
            victim = defenses.as_victim(stack.pipelines[d],
                                        stack.classifiers)
            aset = attacks.generate_attack_set(
                spec, victim, (eval_set.x, eval_set.y),
                seed=config.seed, name=f"{alg}-{d}")
            path = attack_dir / f"{alg}_{d}.advset"
            attacks.save_attack_set(aset, path)
            outputs += [path, Path(str(path) + ".csv")]
            attack_sets[(alg, d)] = aset
            rows[(d,)] = {e: pipeline_accuracy(
                stack.pipelines, stack.classifiers, e,
                aset.x_adv, eval_set.y) for e in kinds}
            say(f"{alg} vs {d}: {time.perf_counter() - t1:.1f}s  " +
                "  ".join(f"{e}={rows[(d,)][e]:.1f}" for e in kinds))
        matrix = metrics.AccuracyMatrix(columns=tuple(kinds), rows=rows)
        matrix.validate()
        matrices[alg] = matrix
        mpath = out_dir / f"matrix_{alg}.csv"
        matrix.to_csv(mpath)
        rpath = out_dir / f"report_{alg}.csv"
        metrics.robustness_report(matrix).to_csv(rpath)
        outputs += [mpath, rpath]

    wall = time.perf_counter() - t0
    outputs.append(write_manifest(
        out_dir, "desk", config, stack_seeds(config.seed), wall, outputs,
        extra={"data_source": stack.source,
               "train_seconds": {k: round(v, 3)
                                 for k, v in stack.timings.items()}}))
    say(f"total: {wall:.1f}s")
    return DeskResults(config=config, stack=stack, eval_set=eval_set,
                       clean=clean, matrices=matrices,
                       attack_sets=attack_sets,
                       outputs=[str(p) for p in outputs],
                       wall_seconds=wall)


# ---------------------------------------------------------------------------
# Fixture verification
# ---------------------------------------------------------------------------

TABLE_NAMES = ("fashion_pgd", "fashion_cw", "fashion_df",
               "cifar_pgd", "cifar_cw", "cifar_df",
               "digit_pgd", "digit_cw", "digit_df")

METRIC_TOLERANCE = 0.02
SCHEDULE_TOLERANCE = 0.01


def _tables_dir() -> Path:
    return Path(__file__).parent / "fixtures" / "tables"


def _load_reference_report(name: str) -> dict:
    import csv as _csv
    out = {}
    with open(_tables_dir() / f"{name}_re.csv", newline="") as fh:
        for rec in _csv.DictReader(fh):
            D = metrics.normalize_set(rec["attacked_set"].split("+"))
            cells = {k: float(v) for k, v in rec.items()
                     if k not in ("attacked_set", "lower_bound") and v}
            bound = float(rec["lower_bound"]) if rec["lower_bound"] else None
            out[D] = (cells, bound)
    return out


def verify_metric_fixtures(name: str) -> tuple:
    """(max deviation, cells checked) of recomputed robustness vs shipped."""
    matrix = metrics.AccuracyMatrix.from_csv(_tables_dir() / f"{name}.csv")
    report = metrics.robustness_report(matrix)
    reference = _load_reference_report(name)
    worst = 0.0
    checked = 0
    for D, (cells, bound) in reference.items():
        entry = report.entries[D]
        for e, want in cells.items():
            got = entry["r"][e]
            if not isinstance(got, float):
                raise AssertionError(
                    f"{name} {metrics.set_label(D)}: r_{e} is {got!r}, "
                    f"expected {want}")
            worst = max(worst, abs(got - want))
            checked += 1
        if bound is not None:
            got = entry["lower_bound"]
            if not isinstance(got, float):
                raise AssertionError(
                    f"{name} {metrics.set_label(D)}: bound is {got!r}, "
                    f"expected {bound}")
            worst = max(worst, abs(got - bound))
            checked += 1
    if worst > METRIC_TOLERANCE:
        raise AssertionError(
            f"{name}: worst deviation {worst:.4f} > {METRIC_TOLERANCE}")
    return worst, checked


# The published full-cost schedule: per order, cumulative seconds and the
# average accuracy after each step under the fashion-CW matrix.
REFERENCE_PLAN = {
    1: ((42.13, 342.13, 417.59, 433.05), (6.55, 46.95, 77.97, 79.85)),
    4: ((42.13, 117.59, 417.59, 433.05), (6.55, 80.8, 77.97, 79.85)),
    8: ((300.0, 315.46, 357.59, 433.05), (None, 8.8, 75.04, 79.85)),
    9: ((300.0, 315.46, 390.92, 433.05), (None, 8.8, 31.52, 79.85)),
    12: ((75.46, 117.59, 417.59, 433.05), (8.79, 80.8, 77.97, 79.85)),
}


def verify_plan_fixture() -> tuple:
    """(max accuracy deviation, cells checked) for the planner schedules."""
    matrix = metrics.AccuracyMatrix.from_csv(_tables_dir() / "fashion_cw.csv")
    orders = planner.enumerate_orders()
    survivors = planner.prune(orders).survivor_ids()
    if survivors != (1, 4, 8, 9, 12):
        raise AssertionError(f"survivors {survivors} != (1, 4, 8, 9, 12)")
    worst = 0.0
    checked = 0
    for oid, (times, accs) in REFERENCE_PLAN.items():
        sched = planner.schedule(orders[oid], planner.CostModel(), matrix)
        for step, t, a in zip(sched.steps, times, accs):
            if abs(step.cumulative_seconds - t) > 1e-6:
                raise AssertionError(
                    f"order {oid} step {step.step}: "
                    f"{step.cumulative_seconds} != {t}")
            if a is None:
                if step.avg_accuracy is not None:
                    raise AssertionError(
                        f"order {oid} step {step.step}: expected no accuracy")
            else:
                worst = max(worst, abs(step.avg_accuracy - a))
                checked += 1
    if worst > SCHEDULE_TOLERANCE:
        raise AssertionError(
            f"plan: worst deviation {worst:.4f} > {SCHEDULE_TOLERANCE}")
    return worst, checked


def verify_fixtures() -> tuple:
    """(ok, report lines) over every shipped table and the plan schedule."""
    lines = []
    ok = True
    for name in TABLE_NAMES:
        try:
            worst, checked = verify_metric_fixtures(name)
            lines.append(f"ok {name}: {checked} cells, "
                         f"max deviation {worst:.4f}")
        except AssertionError as exc:
            ok = False
            lines.append(f"FAIL {name}: {exc}")
    try:
        worst, checked = verify_plan_fixture()
        lines.append(f"ok plan: {checked} schedule accuracies, "
                     f"max deviation {worst:.4f}")
    except AssertionError as exc:
        ok = False
        lines.append(f"FAIL plan: {exc}")
    return ok, lines
