"""SVG figures regenerated from serialized summaries, runlogs and mazes."""

import glob
import logging
import os
from typing import TypeVar

import matplotlib

matplotlib.use("Agg")

# ruff: noqa: E402

import matplotlib.pyplot as plt
import numpy as np
from numpy.typing import NDArray

from mapplan.harness import read_summary, read_timings
from mapplan.lib import ensure_dir
from mapplan.models import STAGES, Cell, RunLog, SummaryRow, TimingRow
from mapplan.simulation import read_runlog
from mapplan.worldmap import OccupancyGrid, load_grid

logger = logging.getLogger(__name__)

STAGE_COLORS = ["#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2"]


def _grid_image(grid: OccupancyGrid) -> NDArray:
    """Grey levels for drawing: white free, black occupied, grey unknown."""
    image = np.full(grid.cells.shape, 0.6)
    image[grid.cells == Cell.FREE] = 1.0
    image[grid.cells == Cell.OCCUPIED] = 0.0
    return image


def _extent(grid: OccupancyGrid) -> list[float]:
    x0, y0 = grid.origin
    return [x0, x0 + grid.width * grid.resolution, y0, y0 + grid.height * grid.resolution]


Row = TypeVar("Row", SummaryRow, TimingRow)


def _first_ranges(rows: list[Row]) -> list[Row]:
    """Rows at the first sensor and prediction range pair of the table."""
    sensor_range, prediction_radius = rows[0].sensor_range, rows[0].prediction_radius
    return [r for r in rows if r.sensor_range == sensor_range and r.prediction_radius == prediction_radius]


def plot_relative_times(rows: list[SummaryRow], path: str) -> None:
    """Grouped bars of mean relative completion time per speed cap, with bootstrap intervals."""
    rows = _first_ranges(rows)
    strategies = list(dict.fromkeys(r.strategy for r in rows))
    speeds = sorted({r.v_max for r in rows})
    width = 0.8 / len(strategies)

    fig, ax = plt.subplots(figsize=(8, 4))
    for i, strategy in enumerate(strategies):
        by_speed = {r.v_max: r for r in rows if r.strategy == strategy}
        xs = np.arange(len(speeds)) + (i - (len(strategies) - 1) / 2) * width
        means = np.array([100 * by_speed[v].mean_rel if v in by_speed else np.nan for v in speeds])
        lows = np.array([100 * by_speed[v].ci_low if v in by_speed else np.nan for v in speeds])
        highs = np.array([100 * by_speed[v].ci_high if v in by_speed else np.nan for v in speeds])
        ax.bar(xs, means, width, yerr=[means - lows, highs - means], capsize=3, label=strategy)
    ax.axhline(100, color="black", linewidth=0.8)
    ax.set_xticks(np.arange(len(speeds)), [f"{v:g}" for v in speeds])
    ax.set_xlabel("Maximum speed (m/s)")
    ax.set_ylabel("Completion time (% of optimal)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_timings(rows: list[TimingRow], path: str) -> None:
    """Stacked mean planning-step time per strategy, averaged over speed caps."""
    rows = _first_ranges(rows)
    strategies = list(dict.fromkeys(r.strategy for r in rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    bottom = np.zeros(len(strategies))
    for stage, color in zip(STAGES, STAGE_COLORS):
        heights = np.array([np.mean([getattr(r, stage) for r in rows if r.strategy == s]) for s in strategies])
        ax.bar(strategies, 1000 * heights, bottom=1000 * bottom, color=color, label=stage)
        bottom += heights
    ax.set_ylabel("Mean planning step (ms)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_trajectory(truth: OccupancyGrid, log: RunLog, path: str) -> None:
    """Executed path over the maze, colored by speed."""
    xy = np.array([[s.x, s.y] for s in log.samples])
    speed = np.array([np.hypot(s.vx, s.vy) for s in log.samples])
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(_grid_image(truth), cmap="gray", origin="lower", extent=_extent(truth), vmin=0, vmax=1)
    points = ax.scatter(xy[:, 0], xy[:, 1], c=speed, s=4, cmap="viridis")
    fig.colorbar(points, ax=ax, label="Speed (m/s)")
    outcome = "timeout" if log.completion_time is None else f"{log.completion_time:.2f} s"
    ax.set_title(f"{log.maze} {log.strategy.value} v_max {log.v_max:g}: {outcome}")
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_range_sweep(rows: list[SummaryRow], strategy: str, path: str) -> None:
    """Heatmap of relative time over sensor range and prediction radius at the highest speed cap."""
    rows = [r for r in rows if r.strategy == strategy]
    v_max = max(r.v_max for r in rows)
    rows = [r for r in rows if r.v_max == v_max]
    sensors = sorted({r.sensor_range for r in rows})
    radii = sorted({r.prediction_radius for r in rows})
    values = np.full((len(sensors), len(radii)), np.nan)
    for r in rows:
        values[sensors.index(r.sensor_range), radii.index(r.prediction_radius)] = 100 * r.mean_rel

    fig, ax = plt.subplots(figsize=(5, 4))
    image = ax.imshow(values, origin="lower", cmap="magma_r")
    fig.colorbar(image, ax=ax, label="Completion time (% of optimal)")
    ax.set_xticks(np.arange(len(radii)), [f"{v:g}" for v in radii])
    ax.set_yticks(np.arange(len(sensors)), [f"{v:g}" for v in sensors])
    ax.set_xlabel("Prediction radius (m)")
    ax.set_ylabel("Sensor range (m)")
    ax.set_title(f"{strategy} at v_max {v_max:g}")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_predictions(belief: OccupancyGrid, target_cells: NDArray, phi: NDArray, path: str) -> None:
    """Belief with predicted occupancy drawn over the target cells."""
    overlay = np.full(belief.cells.shape, np.nan)
    if len(phi):
        overlay[target_cells[:, 0], target_cells[:, 1]] = phi
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(_grid_image(belief), cmap="gray", origin="lower", extent=_extent(belief), vmin=0, vmax=1)
    image = ax.imshow(overlay, cmap="coolwarm", origin="lower", extent=_extent(belief), vmin=0, vmax=1, alpha=0.8)
    fig.colorbar(image, ax=ax, label="Predicted occupancy")
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def make_plots(out_dir: str) -> list[str]:
    """Draw every figure from the artifacts of an experiment directory.

    Args:
        out_dir: directory holding `summary.csv`, `timings.csv`, `runlogs/` and `mazes/`.

    Returns:
        paths of the SVG files written
    """
    plot_dir = ensure_dir(out_dir, "plots")
    written = []

    summary_path = os.path.join(out_dir, "summary.csv")
    if os.path.isfile(summary_path):
        rows = [r for r in read_summary(summary_path) if not np.isnan(r.mean_rel)]
        if rows:
            target = os.path.join(plot_dir, "relative_times.svg")
            plot_relative_times(rows, target)
            written.append(target)
            for strategy in dict.fromkeys(r.strategy for r in rows):
                target = os.path.join(plot_dir, f"range_sweep_{strategy}.svg")
                plot_range_sweep(rows, strategy, target)
                written.append(target)

    timings_path = os.path.join(out_dir, "timings.csv")
    if os.path.isfile(timings_path):
        timing_rows = read_timings(timings_path)
        if timing_rows:
            target = os.path.join(plot_dir, "timings.svg")
            plot_timings(timing_rows, target)
            written.append(target)

    mazes: dict[str, OccupancyGrid] = {}
    drawn = set()
    for log_path in sorted(glob.glob(os.path.join(out_dir, "runlogs", "*.json"))):
        log = read_runlog(log_path)
        key = (log.maze, log.strategy.value)
        if key in drawn:
            continue
        if log.maze not in mazes:
            mazes[log.maze] = load_grid(os.path.join(out_dir, "mazes", f"{log.maze}.grid"))
        target = os.path.join(plot_dir, f"trajectory_{log.maze}_{log.strategy.value}.svg")
        plot_trajectory(mazes[log.maze], log, target)
        written.append(target)
        drawn.add(key)

    logger.info(f"Wrote {len(written)} plots to {plot_dir}")
    return written
