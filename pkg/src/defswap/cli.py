"""Command-line surface.

Subcommands: train, attack, matrix, metrics, plan, verify-fixtures.
Every run that writes files also writes a `<command>_manifest.json`
recording the config hash, seeds, and wall-clock time; on failure the
partially written outputs are removed, a single JSON error line goes to
stderr, and the exit code is nonzero (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import attacks, data, defenses, harness, metrics, planner


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defswap",
        description="Train the defense stack, attack it, and report "
                    "replacement robustness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser(
        "train", help="train the five-artifact stack and write checkpoints")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out-dir", default=None,
                         help="override [run] out_dir")

    p_attack = sub.add_parser(
        "attack", help="generate an adversarial set against deployed "
                       "defenses")
    p_attack.add_argument("--config", required=True)
    p_attack.add_argument("--algorithm", required=True,
                          choices=harness.ALGORITHMS)
    p_attack.add_argument("--attacked-set", default="none",
                          help="defense kinds joined with '+', e.g. dae+hl")
    p_attack.add_argument("--models-dir", default=None,
                          help="checkpoint directory (default: "
                               "<out_dir>/checkpoints)")
    p_attack.add_argument("--out-dir", default=None)

    p_matrix = sub.add_parser(
        "matrix", help="build the accuracy matrix for the configured "
                       "attacked sets")
    p_matrix.add_argument("--config", required=True)
    p_matrix.add_argument("--models-dir", default=None)
    p_matrix.add_argument("--out-dir", default=None)

    p_metrics = sub.add_parser(
        "metrics", help="compute the robustness report for a matrix CSV")
    p_metrics.add_argument("--matrix", required=True)
    p_metrics.add_argument("--out-dir", default=".")

    p_plan = sub.add_parser(
        "plan", help="schedule and rank training orders under a budget")
    p_plan.add_argument("--matrix", required=True)
    p_plan.add_argument("--costs", default=None,
                        help="component,seconds CSV (default: reference "
                             "cost model)")
    p_plan.add_argument("--budget", type=float, default=120.0)
    p_plan.add_argument("--out-dir", default=".")

    sub.add_parser(
        "verify-fixtures",
        help="recompute every shipped reference table and diff")

    return parser


def _resolve_out_dir(config: harness.ExperimentConfig, override) -> Path:
    out = Path(override) if override else Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_eval_set(config: harness.ExperimentConfig) -> data.Dataset:
    _, test, _ = data.load_default(config.data_dir or None,
                                   train_size=config.train_size,
                                   seed=config.seed)
    if len(test) > config.test_size:
        test = data.subsample(test, config.test_size, config.seed)
    return data.subsample(test, config.eval_size, config.seed)


def _cmd_train(args, created) -> int:
    config = harness.load_config(args.config)
    out_dir = _resolve_out_dir(config, args.out_dir)
    t0 = time.perf_counter()
    stack = harness.build_stack(config, log=print)
    ckpt_dir = out_dir / "checkpoints"
    created.extend(harness.save_stack(stack, ckpt_dir))
    created.append(harness.write_manifest(
        out_dir, "train", config, harness.stack_seeds(config.seed),
        time.perf_counter() - t0, created,
        extra={"data_source": stack.source,
               "train_seconds": {k: round(v, 3)
                                 for k, v in stack.timings.items()}}))
    print(f"wrote {len(created) - 1} checkpoints to {ckpt_dir}")
    return 0


def _load_bank(config, models_dir):
    ckpt_dir = (Path(models_dir) if models_dir
                else Path(config.out_dir) / "checkpoints")
    bank = harness.load_stack_models(ckpt_dir)
    return harness.pipelines_from_models(bank)


def _cmd_attack(args, created) -> int:
    config = harness.load_config(args.config)
    out_dir = _resolve_out_dir(config, args.out_dir)
    t0 = time.perf_counter()
    classifiers, pipelines = _load_bank(config, args.models_dir)
    kinds = metrics.normalize_set(args.attacked_set.split("+"))
    missing = [k for k in kinds if k not in pipelines]
    if missing:
        raise defenses.MissingComponentError(missing[0])
    systems = [defenses.as_victim(pipelines[k], classifiers) for k in kinds]
    victim = (systems[0] if len(systems) == 1
              else attacks.CompositeVictim(tuple(systems)))
    eval_set = _load_eval_set(config)
    spec = attacks.AttackSpec(algorithm=args.algorithm)
    aset = attacks.generate_attack_set(
        spec, victim, (eval_set.x, eval_set.y), seed=config.seed,
        name=f"{args.algorithm}-{metrics.set_label(kinds)}")
    path = out_dir / f"{args.algorithm}_{'_'.join(kinds)}.advset"
    attacks.save_attack_set(aset, path)
    created.extend([path, Path(str(path) + ".csv")])
    created.append(harness.write_manifest(
        out_dir, "attack", config,
        {"attacks": config.seed, "eval_subsample": config.seed},
        time.perf_counter() - t0, created,
        extra={"algorithm": args.algorithm,
               "attacked_set": metrics.set_label(kinds),
               "samples": len(aset.x_adv)}))
    print(f"wrote {path} ({len(aset.x_adv)} samples)")
    return 0


def _cmd_matrix(args, created) -> int:
    config = harness.load_config(args.config)
    out_dir = _resolve_out_dir(config, args.out_dir)
    t0 = time.perf_counter()
    classifiers, pipelines = _load_bank(config, args.models_dir)
    eval_set = _load_eval_set(config)
    spec = attacks.AttackSpec(algorithm=config.matrix_algorithm)
    errors = {}
    matrix = metrics.build_accuracy_matrix(
        classifiers, pipelines, spec, (eval_set.x, eval_set.y),
        config.attacked_sets, seed=config.seed, errors=errors)
    path = out_dir / f"matrix_{config.matrix_algorithm}.csv"
    matrix.to_csv(path)
    created.append(path)
    created.append(harness.write_manifest(
        out_dir, "matrix", config,
        {"attacks": config.seed, "eval_subsample": config.seed},
        time.perf_counter() - t0, created,
        extra={"algorithm": config.matrix_algorithm,
               "row_errors": {metrics.set_label(k): v
                              for k, v in errors.items()}}))
    print(f"wrote {path} ({len(matrix.attacked_sets())} attacked sets)")
    if errors:
        print(f"{len(errors)} row(s) failed; see manifest", file=sys.stderr)
    return 0


def _cmd_metrics(args, created) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    matrix = metrics.AccuracyMatrix.from_csv(args.matrix)
    report = metrics.robustness_report(matrix)
    path = out_dir / f"report_{Path(args.matrix).stem}.csv"
    report.to_csv(path)
    created.append(path)
    created.append(harness.write_manifest(
        out_dir, "metrics",
        {"config_hash": harness.hash_file(args.matrix),
         "matrix": str(args.matrix)},
        {}, time.perf_counter() - t0, created))
    print(f"wrote {path} ({len(report.entries)} attacked sets)")
    return 0


def _cmd_plan(args, created) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    matrix = metrics.AccuracyMatrix.from_csv(args.matrix)
    cost = (planner.CostModel.from_csv(args.costs) if args.costs
            else planner.CostModel())
    result = planner.prune(planner.enumerate_orders())
    schedules = [planner.schedule(o, cost, matrix)
                 for o in result.survivors]
    plan_path = out_dir / "plan.csv"
    planner.write_plan_csv(schedules, plan_path)
    created.append(plan_path)
    ranking = planner.recommend(result.survivors, matrix, args.budget, cost)
    for i, rec in enumerate(ranking.ranking, start=1):
        acc = ("n/a" if rec.avg_accuracy is None
               else f"{rec.avg_accuracy:.2f}")
        print(f"#{i} order {rec.order.order_id} "
              f"[{' -> '.join(rec.order.components)}] "
              f"step {rec.step} at {rec.completion_seconds:.2f}s, "
              f"avg accuracy {acc}")
    if ranking.diagnostic:
        print(ranking.diagnostic)
    created.append(harness.write_manifest(
        out_dir, "plan",
        {"config_hash": harness.hash_file(args.matrix),
         "matrix": str(args.matrix),
         "costs": str(args.costs) if args.costs else "reference",
         "budget_seconds": args.budget},
        {}, time.perf_counter() - t0, created,
        extra={"survivors": list(result.survivor_ids()),
               "ranking": [rec.order.order_id
                           for rec in ranking.ranking]}))
    print(f"wrote {plan_path}")
    return 0


def _cmd_verify_fixtures(args, created) -> int:
    ok, lines = harness.verify_fixtures()
    print("\n".join(lines))
    return 0 if ok else 1


_COMMANDS = {
    "train": _cmd_train,
    "attack": _cmd_attack,
    "matrix": _cmd_matrix,
    "metrics": _cmd_metrics,
    "plan": _cmd_plan,
    "verify-fixtures": _cmd_verify_fixtures,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    created: list = []
    try:
        return _COMMANDS[args.command](args, created)
    except Exception as exc:  # argparse usage errors exit(2) before this
        for p in created:
            Path(p).unlink(missing_ok=True)
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
