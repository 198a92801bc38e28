"""Experiment orchestration: maze suites, sweeps, bootstrap aggregation and summary tables."""

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Iterable, Sequence

import numpy as np
from pydantic import BaseModel

from mapplan.cnp import CnpModel, load_weights
from mapplan.lib import ensure_dir
from mapplan.models import (
    STAGES,
    ExperimentConfig,
    MazeSpec,
    RunLog,
    SimConfig,
    Strategy,
    SummaryRow,
    TimingRow,
)
from mapplan.simulation import optimal_reference, run_episode, write_runlog, write_samples_csv
from mapplan.worldmap import OccupancyGrid, dump_maze_spec, generate_maze, maze_endpoints, save_grid

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = list(SummaryRow.model_fields)
TIMING_COLUMNS = list(TimingRow.model_fields)
CONFIDENCE = 0.95

CellKey = tuple[str, float, float, float]


def maze_name(seed: int) -> str:
    """File stem of the maze generated from `seed`."""
    return f"maze_{seed:04d}"


def run_name(log: RunLog) -> str:
    """File stem of a RunLog."""
    return f"{log.maze}_{log.strategy.value}_v{log.v_max:g}_s{log.sensor_range:g}_p{log.prediction_radius:g}"


def maze_specs(cfg: ExperimentConfig) -> list[MazeSpec]:
    """Specs of the evaluation mazes, seeded consecutively from `maze_seed`."""
    return [
        MazeSpec(seed=cfg.maze_seed + i, extent=cfg.extent, hallway_width=cfg.hallway_width, resolution=cfg.resolution)
        for i in range(cfg.n_mazes)
    ]


def _episode(job: tuple[OccupancyGrid, SimConfig, CnpModel | None, str, int, float]) -> RunLog:
    truth, sim, model, name, seed, t_opt = job
    return run_episode(truth, sim, model=model, maze=name, maze_seed=seed, t_opt=t_opt)


def _fan_out(jobs: list[Any], workers: int) -> Iterable[RunLog]:
    """Run episodes, in a process pool when `workers` > 1; results come back in submission order."""
    if workers <= 1:
        return map(_episode, jobs)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_episode, jobs))


def run_experiment(
    cfg: ExperimentConfig, model: CnpModel | None = None, sim: SimConfig | None = None
) -> list[SummaryRow]:
    """Run one episode per maze, strategy, speed cap and range pair, and write every artifact.

    Writes `mazes/*.grid`, `runlogs/*.json` with a samples CSV beside each, `summary.csv` and the
    wall-clock stage means in `timings.csv` under `cfg.out_dir`.

    Args:
        cfg: experiment configuration.
        model: trained CNP; loaded from `cfg.weights` when the cnp strategy runs and none is given.
        sim: base episode settings; sweep axes and endpoints are overridden per episode.

    Returns:
        the summary table
    """
    sim = sim or SimConfig()
    if Strategy.CNP in cfg.strategies and model is None:
        if cfg.weights is None:
            raise ValueError("the cnp strategy needs a weights file")
        model = load_weights(cfg.weights)

    maze_dir = ensure_dir(cfg.out_dir, "mazes")
    log_dir = ensure_dir(cfg.out_dir, "runlogs")
    optima: dict[tuple[str, float], float] = {}
    jobs = []
    for spec in maze_specs(cfg):
        truth = generate_maze(spec)
        name = maze_name(spec.seed)
        save_grid(truth, os.path.join(maze_dir, f"{name}.grid"))
        with open(os.path.join(maze_dir, f"{name}.toml"), "w", encoding="utf-8") as f:
            f.write(dump_maze_spec(spec))
        start, goal = maze_endpoints(spec)

        for v_max in cfg.v_max_values:
            vehicle = sim.vehicle.model_copy(update={"v_max": v_max})
            base = sim.model_copy(update={"vehicle": vehicle, "start": start, "goal": goal})
            _, optima[(name, v_max)] = optimal_reference(truth, base)
            for strategy in cfg.strategies:
                for sensor_range in cfg.sensor_ranges:
                    for prediction_radius in cfg.prediction_radii:
                        episode_cfg = base.model_copy(
                            update={
                                "strategy": strategy,
                                "sensor_range": sensor_range,
                                "prediction_radius": prediction_radius,
                            }
                        )
                        jobs.append((truth, episode_cfg, model, name, spec.seed, optima[(name, v_max)]))
        logger.info(f"Prepared {name}")

    logger.info(f"Running {len(jobs)} episodes on {cfg.workers} workers")
    logs = []
    for log in _fan_out(jobs, cfg.workers):
        stem = run_name(log)
        write_runlog(log, os.path.join(log_dir, f"{stem}.json"))
        write_samples_csv(log, os.path.join(log_dir, f"{stem}.csv"))
        logs.append(log)

    table = aggregate(logs, optima, cfg.n_boot, cfg.seed)
    summary_path = os.path.join(cfg.out_dir, "summary.csv")
    write_summary(table, summary_path)
    write_timings(stage_timings(logs), os.path.join(cfg.out_dir, "timings.csv"))
    logger.info(f"Wrote {len(logs)} runlogs and {summary_path}")
    return table


def relative_time(log: RunLog, optima: dict[tuple[str, float], float]) -> float | None:
    """Completion time over the optimal time of the same maze and speed cap; None for failures.

    The optimal pseudo-strategy is exactly 1 by construction.
    """
    t_opt = optima[(log.maze, log.v_max)]
    if log.completion_time is None:
        return None
    if log.strategy == Strategy.OPTIMAL:
        return 1.0
    return log.completion_time / t_opt


def bootstrap_ci(values: np.ndarray, n_boot: int, seed: int) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean.

    Args:
        values: sample.
        n_boot: resamples.
        seed: resampling seed.
    """
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(values), size=(n_boot, len(values)))
    means = values[picks].mean(axis=1)
    tail = 100.0 * (1.0 - CONFIDENCE) / 2.0
    low, high = np.percentile(means, [tail, 100.0 - tail])
    return float(low), float(high)


def _cells(logs: list[RunLog]) -> dict[CellKey, list[RunLog]]:
    """Group episodes by strategy, speed cap and range pair, in order of first appearance."""
    if not logs:
        raise ValueError("cannot aggregate an empty set of runlogs")
    cells: dict[CellKey, list[RunLog]] = {}
    for log in logs:
        key = (log.strategy.value, log.v_max, log.sensor_range, log.prediction_radius)
        cells.setdefault(key, []).append(log)
    return cells


def aggregate(
    logs: list[RunLog], optima: dict[tuple[str, float], float], n_boot: int = 10_000, seed: int = 0
) -> list[SummaryRow]:
    """Summarize episodes per strategy, speed cap and range pair.

    Rows come in order of first appearance. Failed episodes are counted, not averaged; a cell without any
    success has NaN statistics. Only simulated quantities enter the table, so reruns reproduce it exactly.

    Args:
        logs: episode logs.
        optima: T_opt per (maze, v_max).
        n_boot: bootstrap resamples.
        seed: bootstrap seed.

    Returns:
        one row per cell
    """
    rows = []
    for (strategy, v_max, sensor_range, prediction_radius), group in _cells(logs).items():
        relative = [relative_time(log, optima) for log in group]
        successes = np.array([r for r in relative if r is not None], dtype=float)
        if len(successes):
            mean = float(successes.mean())
            low, high = bootstrap_ci(successes, n_boot, seed)
            low, high = min(low, mean), max(high, mean)
        else:
            mean = low = high = math.nan
        rows.append(
            SummaryRow(
                strategy=strategy,
                v_max=v_max,
                sensor_range=sensor_range,
                prediction_radius=prediction_radius,
                n=len(group),
                failures=len(group) - len(successes),
                mean_rel=mean,
                ci_low=low,
                ci_high=high,
            )
        )
    return rows


def stage_timings(logs: list[RunLog]) -> list[TimingRow]:
    """Mean wall-clock seconds per stage over every planning iteration of each summary cell."""
    rows = []
    for (strategy, v_max, sensor_range, prediction_radius), group in _cells(logs).items():
        records = [record for log in group for record in log.iterations]
        means = {
            stage: float(np.mean([getattr(record, stage) for record in records])) if records else 0.0
            for stage in STAGES
        }
        rows.append(
            TimingRow(
                strategy=strategy,
                v_max=v_max,
                sensor_range=sensor_range,
                prediction_radius=prediction_radius,
                **means,
            )
        )
    return rows


def _write_rows(rows: Sequence[BaseModel], columns: list[str], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: repr(value) if isinstance(value, float) else value for key, value in row})


def write_summary(rows: list[SummaryRow], path: str) -> None:
    """Write the summary table as CSV with floats in round-trip precision."""
    _write_rows(rows, SUMMARY_COLUMNS, path)


def read_summary(path: str) -> list[SummaryRow]:
    """Read a summary table written by `write_summary`."""
    with open(path, "r", newline="", encoding="utf-8") as f:
        return [SummaryRow.model_validate(row) for row in csv.DictReader(f)]


def write_timings(rows: list[TimingRow], path: str) -> None:
    """Write the per-stage timing table as CSV."""
    _write_rows(rows, TIMING_COLUMNS, path)


def read_timings(path: str) -> list[TimingRow]:
    """Read a timing table written by `write_timings`."""
    with open(path, "r", newline="", encoding="utf-8") as f:
        return [TimingRow.model_validate(row) for row in csv.DictReader(f)]
