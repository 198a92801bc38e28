"""Command-line entry point for maze generation, training, simulation and evaluation."""

import argparse
import csv
import logging
import os
import sys
from typing import Any

# Allows running this file directly as `pdm run app`
CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
sys.path.append(os.path.dirname(CURRENT_DIR))

# ruff: noqa: E402
import numpy as np

from mapplan import cnp
from mapplan.harness import maze_name, maze_specs, run_experiment
from mapplan.lib import ensure_dir, load_settings, settings_for, warn_unused
from mapplan.models import (
    ExperimentConfig,
    MazeSpec,
    NetworkConfig,
    SimConfig,
    Strategy,
    TrainConfig,
    VehicleParams,
)
from mapplan.plots import make_plots, plot_predictions, plot_trajectory
from mapplan.simulation import run_episode, write_runlog, write_samples_csv
from mapplan.worldmap import (
    OccupancyGrid,
    build_query,
    dump_maze_spec,
    extract_frontiers,
    generate_maze,
    load_grid,
    load_maze_spec,
    maze_endpoints,
    save_grid,
    simulate_lidar,
)

logger = logging.getLogger(__name__)

CONFIG_MODELS = (ExperimentConfig, SimConfig, VehicleParams, TrainConfig, NetworkConfig)


def _experiment(settings: dict[str, Any], args: argparse.Namespace) -> ExperimentConfig:
    overrides = settings_for(ExperimentConfig, settings)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    return ExperimentConfig(**overrides)


def _sim(settings: dict[str, Any]) -> SimConfig:
    vehicle = VehicleParams(**settings_for(VehicleParams, settings))
    return SimConfig(vehicle=vehicle, **{k: v for k, v in settings_for(SimConfig, settings).items() if k != "vehicle"})


def _training_mazes(exp: ExperimentConfig) -> list[OccupancyGrid]:
    return [
        generate_maze(
            MazeSpec(
                seed=exp.train_maze_seed + i,
                extent=exp.extent,
                hallway_width=exp.hallway_width,
                resolution=exp.resolution,
            )
        )
        for i in range(exp.train_mazes)
    ]


def cmd_mazegen(args: argparse.Namespace, settings: dict[str, Any]) -> None:
    """Write the evaluation mazes and their specs."""
    exp = _experiment(settings, args)
    maze_dir = ensure_dir(exp.out_dir, "mazes")
    specs = maze_specs(exp.model_copy(update={"maze_seed": args.seed})) if args.seed is not None else maze_specs(exp)
    for spec in specs:
        name = maze_name(spec.seed)
        save_grid(generate_maze(spec), os.path.join(maze_dir, f"{name}.grid"))
        with open(os.path.join(maze_dir, f"{name}.toml"), "w", encoding="utf-8") as f:
            f.write(dump_maze_spec(spec))
    logger.info(f"Wrote {len(specs)} mazes to {maze_dir}")


def cmd_dataset(args: argparse.Namespace, settings: dict[str, Any]) -> None:
    """Simulate scans on the training mazes and write the dataset, optionally holding out maps."""
    exp = _experiment(settings, args)
    sim = _sim(settings)
    maps = _training_mazes(exp)
    examples = cnp.make_dataset(
        maps, exp.samples_per_map, exp.dataset_sensor_range, exp.dataset_prediction_radius, exp.seed, sim.n_beams
    )
    out_dir = ensure_dir(exp.out_dir)
    if args.heldout:
        train_set, heldout = cnp.split_heldout(examples, exp.samples_per_map, args.heldout)
        cnp.save_dataset(heldout, os.path.join(out_dir, "heldout.bin"))
    else:
        train_set = examples
    cnp.save_dataset(train_set, os.path.join(out_dir, "dataset.bin"))
    logger.info(f"Wrote {len(train_set)} training examples to {out_dir}")


def cmd_train(args: argparse.Namespace, settings: dict[str, Any]) -> None:
    """Train a CNP on a dataset file and write its weights."""
    exp = _experiment(settings, args)
    overrides = settings_for(TrainConfig, settings)
    if args.seed is not None:
        overrides["seed"] = args.seed
    train_cfg = TrainConfig(**overrides)
    net = NetworkConfig(**settings_for(NetworkConfig, settings))
    dataset = cnp.load_dataset(args.dataset or os.path.join(exp.out_dir, "dataset.bin"))
    model = cnp.CnpModel.create(net.embed_dim, net.hidden, net.n_layers, seed=train_cfg.seed)
    model, history = cnp.train(model, dataset, train_cfg)
    weights = args.weights or os.path.join(ensure_dir(exp.out_dir), "weights.cnpw")
    cnp.save_weights(model, weights)
    logger.info(f"Final training NLL {np.mean(history[-100:]):.4f}, weights written to {weights}")
    if args.heldout:
        heldout = cnp.load_dataset(args.heldout)
        logger.info(
            f"Held-out NLL {cnp.evaluate_nll(model, heldout):.4f} "
            f"vs constant baseline {cnp.constant_baseline_nll(heldout):.4f}"
        )


def _maze_for(args: argparse.Namespace, exp: ExperimentConfig) -> tuple[OccupancyGrid, MazeSpec, str]:
    """Load `--maze` with the spec beside it, or generate the first evaluation maze."""
    if args.maze:
        spec_path = os.path.splitext(args.maze)[0] + ".toml"
        with open(spec_path, "r", encoding="utf-8") as f:
            spec = load_maze_spec(f.read())
        return load_grid(args.maze), spec, os.path.splitext(os.path.basename(args.maze))[0]
    spec = maze_specs(exp)[0]
    return generate_maze(spec), spec, maze_name(spec.seed)


def cmd_predict(args: argparse.Namespace, settings: dict[str, Any]) -> None:
    """Scan a maze at a pose and write predicted occupancy around the frontiers as CSV and SVG."""
    exp = _experiment(settings, args)
    sim = _sim(settings)
    model = cnp.load_weights(args.weights or exp.weights or os.path.join(exp.out_dir, "weights.cnpw"))
    truth, spec, name = _maze_for(args, exp)
    pose = np.array(args.pose if args.pose else maze_endpoints(spec)[0], dtype=float)
    belief = simulate_lidar(truth, OccupancyGrid.unknown_like(truth), pose, sim.sensor_range, sim.n_beams)
    query = build_query(belief, pose, extract_frontiers(belief), sim.sensor_range, sim.prediction_radius)
    phi = cnp.predict(model, query)

    out_dir = ensure_dir(exp.out_dir, "predictions")
    centers = query.targets + query.frame_origin
    with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "phi"])
        writer.writerows([[float(x), float(y), float(p)] for (x, y), p in zip(centers, phi)])
    plot_predictions(belief, query.target_cells, phi, os.path.join(out_dir, f"{name}.svg"))
    logger.info(f"Predicted {len(phi)} targets from {len(query.context)} context cells into {out_dir}")


def cmd_simulate(args: argparse.Namespace, settings: dict[str, Any]) -> None:
    """Run one episode and write its runlog, samples and trajectory plot."""
    exp = _experiment(settings, args)
    sim = _sim(settings)
    truth, spec, name = _maze_for(args, exp)
    start, goal = maze_endpoints(spec)
    update: dict[str, Any] = {"start": sim.start or start, "goal": sim.goal or goal}
    if args.strategy:
        update["strategy"] = Strategy(args.strategy)
    sim = sim.model_copy(update=update)
    model = None
    if sim.strategy == Strategy.CNP:
        model = cnp.load_weights(args.weights or exp.weights or os.path.join(exp.out_dir, "weights.cnpw"))

    log = run_episode(truth, sim, model=model, maze=name, maze_seed=spec.seed)
    out_dir = ensure_dir(exp.out_dir, "runlogs")
    stem = f"{name}_{sim.strategy.value}"
    write_runlog(log, os.path.join(out_dir, f"{stem}.json"))
    write_samples_csv(log, os.path.join(out_dir, f"{stem}.csv"))
    plot_trajectory(truth, log, os.path.join(ensure_dir(exp.out_dir, "plots"), f"trajectory_{stem}.svg"))
    outcome = "timed out" if log.completion_time is None else f"finished in {log.completion_time:.2f} s"
    logger.info(f"{sim.strategy.value} on {name} {outcome} (optimal {log.t_opt:.2f} s)")


def cmd_evaluate(args: argparse.Namespace, settings: dict[str, Any]) -> None:
    """Run the full experiment sweep."""
    exp = _experiment(settings, args)
    update: dict[str, Any] = {}
    if args.weights:
        update["weights"] = args.weights
    if args.workers:
        update["workers"] = args.workers
    run_experiment(exp.model_copy(update=update), sim=_sim(settings))


def cmd_plot(args: argparse.Namespace, settings: dict[str, Any]) -> None:
    """Redraw every figure from an experiment directory."""
    make_plots(_experiment(settings, args).out_dir)


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with one subcommand per task."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Flat key = value config file")
    common.add_argument("--seed", type=int, default=None, help="Global seed")
    common.add_argument("--out-dir", default=None, help="Directory for all outputs")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    parser = argparse.ArgumentParser(prog="mapplan", description="Map-predictive motion planning in mazes")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("mazegen", parents=[common], help="Generate evaluation mazes").set_defaults(func=cmd_mazegen)

    dataset = sub.add_parser("dataset", parents=[common], help="Build a CNP training dataset")
    dataset.add_argument("--heldout", type=int, default=0, help="Maps to hold out for evaluation")
    dataset.set_defaults(func=cmd_dataset)

    train = sub.add_parser("train", parents=[common], help="Train the CNP")
    train.add_argument("--dataset", default=None, help="Dataset file")
    train.add_argument("--heldout", default=None, help="Held-out dataset file to report NLL on")
    train.add_argument("--weights", default=None, help="Output weights file")
    train.set_defaults(func=cmd_train)

    predict = sub.add_parser("predict", parents=[common], help="Predict occupancy from a single scan")
    predict.add_argument("--weights", default=None, help="Weights file")
    predict.add_argument("--maze", default=None, help="Grid file with a spec beside it")
    predict.add_argument("--pose", type=float, nargs=2, default=None, metavar=("X", "Y"), help="Scan position")
    predict.set_defaults(func=cmd_predict)

    simulate = sub.add_parser("simulate", parents=[common], help="Run one episode")
    simulate.add_argument("--maze", default=None, help="Grid file with a spec beside it")
    simulate.add_argument("--strategy", choices=[s.value for s in Strategy], default=None)
    simulate.add_argument("--weights", default=None, help="Weights file")
    simulate.set_defaults(func=cmd_simulate)

    evaluate = sub.add_parser("evaluate", parents=[common], help="Run the experiment sweep")
    evaluate.add_argument("--weights", default=None, help="Weights file")
    evaluate.add_argument("--workers", type=int, default=None, help="Worker processes")
    evaluate.set_defaults(func=cmd_evaluate)

    sub.add_parser("plot", parents=[common], help="Redraw figures from serialized runs").set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    """Parse arguments, configure logging and run a subcommand."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = load_settings(args.config)
        warn_unused(settings, *CONFIG_MODELS)
        args.func(args, settings)
    except Exception:
        logger.error(f"mapplan {args.command} failed", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
