"""Command-line front end.

Thin argparse veneer over the library: every subcommand is a few calls
into config/harness/planner/controller and writes its artifacts under the
output directory.  Exit codes: 0 success, 1 configuration or runtime
error (diagnostic on stderr), 2 usage.
"""

import argparse
import csv
import glob
import json
import os
import sys

from retractor.config import ExperimentConfig, load_config, simulation_preset
from retractor.controller import run_retraction, write_episode, write_episode_csv
from retractor.errors import ConfigError, RetractorError
from retractor.estimator import (
    load_model,
    read_dataset,
    save_model,
    train,
    write_loss_curve,
)
from retractor.harness import (
    build_scenario,
    emit_report,
    nearest_boundary_node,
    read_sweep_json,
    run_dataset_generation,
    run_estimator_eval,
    run_grasp_sweep,
    write_mcd_csv,
    write_sweep_csv,
    write_sweep_json,
)
from retractor.mesh import bind_grasp
from retractor.planner import (
    optimize_grasp,
    write_fitness_curve,
    write_planner_result,
)

_SEED_HELP = (
    "override the command's primary seed (dataset seed for gen-data, "
    "training seed for train, evaluation seed for eval-estimator, search "
    "seed for plan-grasp, episode seed for retract and sweep-grasps)"
)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="experiment config JSON (default: built-in preset)")
    common.add_argument("--seed", type=int, metavar="N", help=_SEED_HELP)
    common.add_argument("--out", metavar="DIR",
                        help="output directory (default: config output_dir)")

    parser = argparse.ArgumentParser(
        prog="retractor",
        description="tissue retraction bench: data, training, planning, control",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common],
                   help="generate the scripted-pull training dataset")
    sub.add_parser("train", parents=[common],
                   help="train the deformation estimator on a dataset")
    sub.add_parser("eval-estimator", parents=[common],
                   help="boundary-prediction error vs retraction distance")
    sub.add_parser("plan-grasp", parents=[common],
                   help="search for a grasp position on scenario 0")
    sub.add_parser("retract", parents=[common],
                   help="plan a grasp and run one closed-loop retraction")
    sub.add_parser("sweep-grasps", parents=[common],
                   help="retract from every 5 mm grasp candidate")
    sub.add_parser("report", parents=[common],
                   help="collect emitted artifacts into summary.json")
    return parser


def _load(args) -> tuple:
    config = load_config(args.config) if args.config else simulation_preset()
    out_dir = args.out or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    return config, out_dir


def _require_model(out_dir):
    path = os.path.join(out_dir, "model.json")
    if not os.path.exists(path):
        raise ConfigError(f"no trained model at {path}; run train first")
    return load_model(path)


def _cmd_gen_data(args) -> int:
    config, out_dir = _load(args)
    if args.seed is not None:
        config.dataset_seed = args.seed
    path = os.path.join(out_dir, "dataset.jsonl")
    count, skipped = run_dataset_generation(config, path)
    print(f"wrote {count} samples to {path}")
    if skipped:
        print(f"skipped {len(skipped)} diverged pulls: {skipped}")
    return 0


def _cmd_train(args) -> int:
    config, out_dir = _load(args)
    if args.seed is not None:
        config.train.seed = args.seed
    data_path = os.path.join(out_dir, "dataset.jsonl")
    if not os.path.exists(data_path):
        raise ConfigError(f"no dataset at {data_path}; run gen-data first")
    samples, layout = read_dataset(data_path)
    if layout.m != config.layout.m:
        raise ConfigError(
            f"dataset was generated with m={layout.m}, config says "
            f"m={config.layout.m}"
        )
    model, history = train(samples, config.train)
    save_model(model, os.path.join(out_dir, "model.json"))
    write_loss_curve(history, os.path.join(out_dir, "loss_curve.csv"))
    print(
        f"trained on {len(samples)} samples for {len(history)} epochs, "
        f"final val mse {history[-1].val_mse:.6e}"
    )
    return 0


def _cmd_eval_estimator(args) -> int:
    config, out_dir = _load(args)
    if args.seed is not None:
        config.eval_seed = args.seed
    model = _require_model(out_dir)
    table = run_estimator_eval(config, model)
    path = os.path.join(out_dir, "mcd.csv")
    write_mcd_csv(table, path)
    for d in sorted(table):
        row = table[d]
        print(
            f"distance {d:.3f} m: mean {row['mean']:.6f}, "
            f"p10 {row['p10']:.6f}, p90 {row['p90']:.6f}"
        )
    return 0


def _cmd_plan_grasp(args) -> int:
    config, out_dir = _load(args)
    if args.seed is not None:
        config.ga.seed = args.seed
    model = _require_model(out_dir)
    mesh, scene = build_scenario(config, 0)
    result = optimize_grasp(
        mesh, scene, model, config.ga,
        force_limit=config.controller.force_limit,
    )
    write_planner_result(result, os.path.join(out_dir, "plan.json"))
    write_fitness_curve(result, os.path.join(out_dir, "plan_fitness.csv"))
    if result.feasible:
        print(f"grasp at x = {result.q_x0:.4f}, fitness {result.fitness:.6f}")
    else:
        print("no feasible grasp under the force limit")
    return 0


def _cmd_retract(args) -> int:
    config, out_dir = _load(args)
    model = _require_model(out_dir)
    mesh, scene = build_scenario(config, 0)
    plan = optimize_grasp(
        mesh, scene, model, config.ga,
        force_limit=config.controller.force_limit,
    )
    if not plan.feasible:
        print("no feasible grasp under the force limit", file=sys.stderr)
        return 1
    grasp_point = nearest_boundary_node(mesh, plan.q_x0)
    bind_grasp(mesh, grasp_point)
    episode = run_retraction(
        mesh, scene, model, config.controller, grasp_point,
        params=config.params, seed=args.seed if args.seed is not None else 0,
    )
    write_episode(episode, os.path.join(out_dir, "episode.json"))
    write_episode_csv(episode, os.path.join(out_dir, "episode.csv"))
    outcome = "exposed" if episode.success else "failed"
    extra = "" if episode.diagnostic is None else f" ({episode.diagnostic})"
    print(f"{outcome} after {episode.iterations} iterations{extra}")
    return 0


def _cmd_sweep_grasps(args) -> int:
    config, out_dir = _load(args)
    model = _require_model(out_dir)
    result = run_grasp_sweep(
        config, model, scenario_index=0,
        seed=args.seed if args.seed is not None else 0,
    )
    write_sweep_csv(result, os.path.join(out_dir, "sweep_0.csv"))
    write_sweep_json(result, os.path.join(out_dir, "sweep_0.json"))
    wins = sum(result.success)
    print(f"{wins}/{len(result.positions)} candidates exposed the target")
    if result.planner_position is not None:
        print(f"planner pick snapped to x = {result.planner_position:.4f}")
    else:
        print("planner found no feasible grasp")
    return 0


def _cmd_report(args) -> int:
    _, out_dir = _load(args)
    mcd_table = None
    mcd_path = os.path.join(out_dir, "mcd.csv")
    if os.path.exists(mcd_path):
        mcd_table = {}
        with open(mcd_path, newline="") as fh:
            for row in csv.DictReader(fh):
                mcd_table[float(row["distance"])] = {
                    "mean": float(row["mean"]),
                    "p10": float(row["p10"]),
                    "p90": float(row["p90"]),
                }
    sweeps = [
        read_sweep_json(path)
        for path in sorted(glob.glob(os.path.join(out_dir, "sweep_*.json")))
    ]
    acceptance = None
    acceptance_path = os.path.join(out_dir, "acceptance.json")
    if os.path.exists(acceptance_path):
        with open(acceptance_path) as fh:
            acceptance = json.load(fh)
    paths = emit_report(
        out_dir, mcd_table=mcd_table, sweeps=sweeps, acceptance=acceptance
    )
    print(f"wrote {paths['summary']}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval-estimator": _cmd_eval_estimator,
    "plan-grasp": _cmd_plan_grasp,
    "retract": _cmd_retract,
    "sweep-grasps": _cmd_sweep_grasps,
    "report": _cmd_report,
}


def cli_dispatch(argv) -> int:
    """Parse and run; returns the exit status instead of raising."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return _COMMANDS[args.command](args)
    except RetractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
