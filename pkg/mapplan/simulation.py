"""Receding-horizon episodes: sense, predict, plan to the goal, execute part of the known segment, repeat."""

import csv
import logging
import math
import time
from abc import ABC, abstractmethod
from contextlib import contextmanager
from typing import Iterator

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict

from mapplan import cnp
from mapplan.cnp import CnpModel
from mapplan.exceptions import InfeasiblePlanError, InvalidPoseError, PlanningError
from mapplan.lib import StageTimer
from mapplan.models import (
    Cell,
    ExecutedSample,
    IterationRecord,
    ProfileMethod,
    RunLog,
    SafetyAudit,
    SimConfig,
    Strategy,
)
from mapplan.planner import CostField, ReferencePath, astar_plan
from mapplan.trajopt import (
    Trajectory,
    ViolationKind,
    build_bubbles,
    integrate_profile,
    min_time_profile,
    resample_path,
    smooth_path,
    validate_trajectory,
)
from mapplan.worldmap import (
    OccupancyGrid,
    QuerySet,
    build_query,
    clearance_field,
    extract_frontiers,
    simulate_lidar,
)

logger = logging.getLogger(__name__)

DYNAMICS = {ViolationKind.FRICTION, ViolationKind.TURNING, ViolationKind.SPEED}
# goal checks per sensing period
GOAL_CHECKS_PER_SENSE = 5
SAMPLE_COLUMNS = ["t", "x", "y", "vx", "vy"]


class Predictor(ABC):
    """Occupancy probabilities for the targets of a query."""

    @abstractmethod
    def predict(self, query: QuerySet) -> NDArray:
        """Return phi in [0, 1] for every target of `query`."""


class CnpPredictor(Predictor):
    """Predictions from a trained CNP."""

    def __init__(self, model: CnpModel) -> None:
        model.check()
        self.model = model

    def predict(self, query: QuerySet) -> NDArray:
        """Run the CNP on the query."""
        return cnp.predict(self.model, query)


class OraclePredictor(Predictor):
    """Ground-truth occupancy of the target cells."""

    def __init__(self, truth: OccupancyGrid) -> None:
        self.truth = truth

    def predict(self, query: QuerySet) -> NDArray:
        """Look the targets up in the truth grid."""
        cells = query.target_cells
        return (self.truth.cells[cells[:, 0], cells[:, 1]] == Cell.OCCUPIED).astype(float)


class ConstantPredictor(Predictor):
    """The same probability everywhere."""

    def __init__(self, value: float = 0.0) -> None:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"constant prediction must lie in [0, 1], got {value}")
        self.value = value

    def predict(self, query: QuerySet) -> NDArray:
        """Return the constant for every target."""
        return np.full(len(query.targets), self.value)


def make_predictor(strategy: Strategy, truth: OccupancyGrid, model: CnpModel | None = None) -> Predictor | None:
    """Predictor driving `strategy`; None for strategies that do not predict.

    Args:
        strategy: planning strategy.
        truth: ground-truth grid, for the oracle.
        model: trained CNP, required for the cnp strategy.
    """
    if strategy == Strategy.CNP:
        if model is None:
            raise ValueError("the cnp strategy needs model weights")
        return CnpPredictor(model)
    if strategy == Strategy.ORACLE_MAPS:
        return OraclePredictor(truth)
    if strategy == Strategy.NO_PREDICTION:
        return ConstantPredictor(0.0)
    return None


class SimState(BaseModel):
    """Robot state during an episode.

    Args:
        pose: world position.
        velocity: world velocity.
        belief: what the robot has observed.
        clock: simulated seconds since the start.
        last_plan: trajectory being executed.
        plan_time: seconds of `last_plan` already executed.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    pose: np.ndarray
    velocity: np.ndarray
    belief: OccupancyGrid
    clock: float = 0.0
    last_plan: Trajectory | None = None
    plan_time: float = 0.0

    @property
    def speed(self) -> float:
        """Current speed."""
        return float(np.linalg.norm(self.velocity))

    @property
    def remaining(self) -> float:
        """Seconds of known segment left on the last plan."""
        if self.last_plan is None:
            return 0.0
        return max(self.last_plan.stop_time - self.plan_time, 0.0)


def _endpoints(cfg: SimConfig) -> tuple[NDArray, NDArray]:
    if cfg.start is None or cfg.goal is None:
        raise ValueError("SimConfig needs start and goal")
    return np.asarray(cfg.start, dtype=float), np.asarray(cfg.goal, dtype=float)


@contextmanager
def _timings_on_failure(timer: StageTimer) -> Iterator[None]:
    """Attach the stage timings recorded so far to any planning error."""
    try:
        yield
    except PlanningError as err:
        err.timings = dict(timer.timings)
        raise


def safe_stop_index(path: ReferencePath, clearance: NDArray, belief: OccupancyGrid, cfg: SimConfig) -> int:
    """Last waypoint before the first one that is not FREE or has no room for a minimum bubble.

    The first waypoint is the robot and is never rejected.
    """
    rows, cols = path.cells[:, 0], path.cells[:, 1]
    rejected = (belief.cells[rows, cols] != Cell.FREE) | (clearance[rows, cols] < cfg.vehicle_clearance + cfg.rho_min)
    rejected[0] = False
    hits = np.flatnonzero(rejected)
    return int(hits[0]) - 1 if len(hits) else len(path.cells) - 1


def _profile_path(
    path: ReferencePath,
    belief: OccupancyGrid,
    clearance: NDArray,
    pose: NDArray,
    velocity: NDArray,
    end: NDArray,
    stop_index: int,
    cfg: SimConfig,
    timer: StageTimer,
) -> Trajectory:
    """Bubbles, smoothing, resampling and a speed profile along `path`, ending at rest at `stop_index`."""
    if len(path.waypoints) < 2 or stop_index < 1:
        raise InfeasiblePlanError("no room to move before the frontier")
    speed = float(np.linalg.norm(velocity))
    direction = velocity / speed if speed > 1e-9 else None

    with timer.stage("smooth"):
        waypoints = np.array(path.waypoints, dtype=float)
        waypoints[0], waypoints[-1] = pose, end
        anchored = path.model_copy(update={"waypoints": waypoints})
        tube = build_bubbles(
            anchored,
            clearance,
            rho_unknown=cfg.rho_unknown,
            rho_min=cfg.rho_min,
            rho_max=cfg.rho_max,
            vehicle_clearance=cfg.vehicle_clearance,
            horizon_index=stop_index + 1,
        )
        smoothed = smooth_path(tube, pose, direction, end)
        points, stop_sample = resample_path(smoothed, cfg.resample_spacing, stop_index, direction)

    with timer.stage("profile"):
        profiler = min_time_profile if cfg.profile_method == ProfileMethod.CONVEX else integrate_profile
        traj = profiler(points, cfg.vehicle, v_start=speed, stop_index=stop_sample)
        violations = validate_trajectory(traj, belief, cfg.vehicle)
    if violations:
        kinds = sorted({v.kind.value for v in violations})
        raise InfeasiblePlanError(f"planned trajectory violates {', '.join(kinds)} at {len(violations)} samples")
    return traj


def plan_once(state: SimState, predictor: Predictor, cfg: SimConfig) -> tuple[Trajectory, IterationRecord]:
    """Plan from the robot to the goal through known and predicted space.

    The trajectory comes to rest at the frontier crossing, or at the goal when the path never leaves known
    space.

    Args:
        state: current robot state.
        predictor: occupancy predictor for unknown cells.
        cfg: episode configuration, with the goal set.

    Returns:
        the trajectory and the wall-clock seconds spent in each stage
    """
    _, goal = _endpoints(cfg)
    belief = state.belief
    timer = StageTimer()
    with _timings_on_failure(timer):
        with timer.stage("predict"):
            frontiers = extract_frontiers(belief)
            query = build_query(
                belief, state.pose, frontiers, cfg.sensor_range, cfg.prediction_radius, cfg.full_belief_context
            )
            phi = predictor.predict(query) if len(query.targets) else np.zeros(0)
            field = CostField.from_predictions(belief, query, phi, cfg.alpha, cfg.epsilon, cfg.penalize_edges)

        with timer.stage("search"):
            path = astar_plan(belief, field, state.pose, goal, cfg.inflation_cells)

        with timer.stage("smooth"):
            clearance = clearance_field(belief)
            stop = safe_stop_index(path, clearance, belief, cfg)
        traj = _profile_path(path, belief, clearance, state.pose, state.velocity, goal, stop, cfg, timer)

    record = IterationRecord(
        clock=state.clock, n_context=len(query.context), n_targets=len(query.targets), **timer.timings
    )
    return traj, record


def naive_plan(state: SimState, cfg: SimConfig, timer: StageTimer | None = None) -> Trajectory:
    """Plan inside known space to the goal when it is reachable, else toward the frontier nearest the goal.

    Frontier clusters are tried in order of centroid distance to the goal; each is approached through its
    cell nearest the centroid. The trajectory ends at rest.

    Args:
        state: current robot state.
        cfg: episode configuration, with the goal set.
        timer: accumulates stage timings when given.
    """
    _, goal = _endpoints(cfg)
    timer = timer or StageTimer()
    belief = state.belief
    with _timings_on_failure(timer):
        with timer.stage("search"):
            known = belief.copy_grid()
            known.cells[known.cells == Cell.UNKNOWN] = Cell.OCCUPIED
            field = CostField.zeros(known)
            clearance = clearance_field(belief)

            targets = []
            goal_cell = belief.cell_of(goal)
            if belief.in_bounds(*goal_cell) and belief.cells[goal_cell] == Cell.FREE:
                targets.append(goal)
            frontiers = extract_frontiers(belief)
            centers = belief.cell_centers()
            for k in np.argsort(np.linalg.norm(frontiers.centroids - goal, axis=1), kind="stable"):
                members = frontiers.cells[frontiers.labels == k]
                offsets = centers[members[:, 0], members[:, 1]] - frontiers.centroids[k]
                nearest = members[np.argmin(np.linalg.norm(offsets, axis=1))]
                targets.append(belief.center(*nearest))

            chosen = None
            for target in targets:
                try:
                    path = astar_plan(known, field, state.pose, target, cfg.inflation_cells)
                except InfeasiblePlanError:
                    continue
                stop = safe_stop_index(path, clearance, belief, cfg)
                if stop >= 1:
                    chosen = (path, stop, target)
                    break
            if chosen is None:
                raise InfeasiblePlanError("neither the goal nor any frontier is reachable in known space")

        path, stop, target = chosen
        path = path.model_copy(update={"waypoints": path.waypoints[: stop + 1], "cells": path.cells[: stop + 1]})
        end = target if stop == len(chosen[0].waypoints) - 1 else path.waypoints[-1]
        return _profile_path(path, belief, clearance, state.pose, state.velocity, end, stop, cfg, timer)


def optimal_reference(
    truth: OccupancyGrid, cfg: SimConfig, timer: StageTimer | None = None
) -> tuple[Trajectory, float]:
    """Minimum-time trajectory on the fully known map, from rest at the start to rest at the goal.

    Returns:
        the trajectory and its duration T_opt
    """
    start, goal = _endpoints(cfg)
    timer = timer or StageTimer()
    with timer.stage("search"):
        path = astar_plan(truth, CostField.zeros(truth), start, goal, cfg.inflation_cells)
        clearance = clearance_field(truth)
    stop = len(path.waypoints) - 1
    traj = _profile_path(path, truth, clearance, start, np.zeros(2), goal, stop, cfg, timer)
    return traj, traj.duration


class _EpisodeAudit:
    """Running safety counters over executed samples."""

    def __init__(self, truth: OccupancyGrid) -> None:
        self.truth = truth
        self.clearance = clearance_field(truth)
        self.audit = SafetyAudit()

    def observe(self, position: NDArray, belief: OccupancyGrid) -> None:
        row, col = self.truth.cell_of(position)
        inside = self.truth.in_bounds(row, col)
        if not inside or self.truth.cells[row, col] == Cell.OCCUPIED:
            self.audit.collision_samples += 1
        if belief.states_at(position[None, :])[0] == Cell.UNKNOWN:
            self.audit.unknown_samples += 1
        room = float(self.clearance[row, col]) if inside else 0.0
        if self.audit.min_clearance is None or room < self.audit.min_clearance:
            self.audit.min_clearance = room

    def adopt(self, plan: Trajectory, vehicle_violations: int) -> None:
        self.audit.dynamics_violations += vehicle_violations
        terminal = plan.stop_index if plan.stop_index is not None else len(plan.times) - 1
        self.audit.terminal_speeds.append(float(plan.speeds[terminal]))


def _dynamics_violations(plan: Trajectory, belief: OccupancyGrid, cfg: SimConfig) -> int:
    return sum(1 for v in validate_trajectory(plan, belief, cfg.vehicle) if v.kind in DYNAMICS)


def _replay_optimal(truth: OccupancyGrid, cfg: SimConfig, maze: str, maze_seed: int) -> RunLog:
    """RunLog of the optimal reference executed verbatim; its completion time is T_opt."""
    timer = StageTimer()
    started = time.perf_counter()
    traj, t_opt = optimal_reference(truth, cfg, timer)
    record = IterationRecord(clock=0.0, total=time.perf_counter() - started, **timer.timings)
    episode = _EpisodeAudit(truth)
    episode.adopt(traj, _dynamics_violations(traj, truth, cfg))
    samples = []
    for t, position, velocity in zip(traj.times, traj.positions, traj.velocities):
        episode.observe(position, truth)
        samples.append(ExecutedSample(t=t, x=position[0], y=position[1], vx=velocity[0], vy=velocity[1]))
    return RunLog(
        maze=maze,
        maze_seed=maze_seed,
        strategy=Strategy.OPTIMAL,
        v_max=cfg.vehicle.v_max,
        sensor_range=cfg.sensor_range,
        prediction_radius=cfg.prediction_radius,
        t_opt=t_opt,
        completion_time=t_opt,
        iterations=[record],
        samples=samples,
        audit=episode.audit,
    )


def run_episode(
    truth: OccupancyGrid,
    cfg: SimConfig,
    model: CnpModel | None = None,
    maze: str = "maze",
    maze_seed: int = 0,
    t_opt: float | None = None,
) -> RunLog:
    """Drive the robot from start to goal, replanning every `replan_period` seconds of trajectory time.

    The robot senses every `sense_period` seconds while executing. When planning fails it keeps executing the
    remainder of the previous known segment, which ends at rest, and replans from there. The episode ends when
    the robot is within `goal_radius` of the goal, at `timeout_factor` times the optimal time, or when planning
    fails at rest with nothing left to execute.

    Args:
        truth: ground-truth grid.
        cfg: episode configuration with start and goal set.
        model: trained CNP, for the cnp strategy.
        maze: maze name stored in the log.
        maze_seed: maze seed stored in the log.
        t_opt: optimal reference time, computed when not given.

    Returns:
        the episode log; a timeout leaves `completion_time` unset
    """
    start, goal = _endpoints(cfg)
    for name, point in (("start", start), ("goal", goal)):
        if truth.states_at(point[None, :])[0] != Cell.FREE:
            raise InvalidPoseError(f"{name} {point.tolist()} is not in a FREE truth cell")
    if cfg.strategy == Strategy.OPTIMAL:
        return _replay_optimal(truth, cfg, maze, maze_seed)

    predictor = make_predictor(cfg.strategy, truth, model)
    if t_opt is None:
        _, t_opt = optimal_reference(truth, cfg)
    timeout = cfg.timeout_factor * t_opt
    logger.info(f"Episode on {maze} with {cfg.strategy.value} at v_max {cfg.vehicle.v_max}, timeout {timeout:.1f} s")

    state = SimState(pose=start.copy(), velocity=np.zeros(2), belief=OccupancyGrid.unknown_like(truth))
    episode = _EpisodeAudit(truth)
    episode.observe(state.pose, state.belief)
    samples = [ExecutedSample(t=0.0, x=start[0], y=start[1], vx=0.0, vy=0.0)]
    iterations: list[IterationRecord] = []
    completion = 0.0 if np.linalg.norm(start - goal) <= cfg.goal_radius else None

    sensing = StageTimer()
    with sensing.stage("sense"):
        simulate_lidar(truth, state.belief, state.pose, cfg.sensor_range, cfg.n_beams)

    stalled = False
    while completion is None and state.clock < timeout:
        plan: Trajectory | None = None
        failure: PlanningError | None = None
        started = time.perf_counter()
        try:
            if predictor is None:
                timer = StageTimer()
                plan = naive_plan(state, cfg, timer)
                record = IterationRecord(clock=state.clock, **timer.timings)
            else:
                plan, record = plan_once(state, predictor, cfg)
        except PlanningError as err:
            failure = err
        elapsed = time.perf_counter() - started
        if failure is not None:
            logger.warning(f"Planning failed at t={state.clock:.2f} s, continuing the previous plan: {failure}")
            record = IterationRecord(clock=state.clock, fallback=True, **failure.timings)
        record.sense = sensing.timings.get("sense", 0.0)
        record.total = record.sense + elapsed
        iterations.append(record)
        sensing = StageTimer()

        if plan is not None:
            state.last_plan, state.plan_time = plan, 0.0
            episode.adopt(plan, _dynamics_violations(plan, state.belief, cfg))
            horizon = min(cfg.replan_period, plan.stop_time)
        elif state.remaining > 0:
            horizon = state.remaining
        else:
            # a rescan from the same pose observes nothing new
            stalled = True
            break

        completion = _execute(state, horizon, truth, goal, cfg, episode, samples, sensing)

    if completion is None:
        reason = "stalled" if stalled else "timed out"
        logger.warning(f"Episode on {maze} with {cfg.strategy.value} {reason} at t={state.clock:.2f} s")
    else:
        logger.info(f"Episode on {maze} with {cfg.strategy.value} reached the goal at t={completion:.2f} s")
    return RunLog(
        maze=maze,
        maze_seed=maze_seed,
        strategy=cfg.strategy,
        v_max=cfg.vehicle.v_max,
        sensor_range=cfg.sensor_range,
        prediction_radius=cfg.prediction_radius,
        t_opt=t_opt,
        completion_time=completion,
        iterations=iterations,
        samples=samples,
        audit=episode.audit,
    )


def _execute(
    state: SimState,
    horizon: float,
    truth: OccupancyGrid,
    goal: NDArray,
    cfg: SimConfig,
    episode: _EpisodeAudit,
    samples: list[ExecutedSample],
    sensing: StageTimer,
) -> float | None:
    """Play the current plan back for `horizon` seconds, sensing and checking the goal along the way.

    Returns:
        the clock at first entry into the goal region, or None
    """
    assert state.last_plan is not None
    step = cfg.sense_period / GOAL_CHECKS_PER_SENSE
    n_steps = max(math.ceil(horizon / step - 1e-9), 1)
    for k in range(1, n_steps + 1):
        elapsed = min(k * step, horizon)
        position, velocity = state.last_plan.state_at(state.plan_time + elapsed)
        clock = state.clock + elapsed
        episode.observe(position, state.belief)
        samples.append(ExecutedSample(t=clock, x=position[0], y=position[1], vx=velocity[0], vy=velocity[1]))
        if np.linalg.norm(position - goal) <= cfg.goal_radius:
            state.pose, state.velocity, state.clock = position, velocity, clock
            state.plan_time += elapsed
            return clock
        if k % GOAL_CHECKS_PER_SENSE == 0 or k == n_steps:
            with sensing.stage("sense"):
                simulate_lidar(truth, state.belief, position, cfg.sensor_range, cfg.n_beams)
    state.pose, state.velocity = position, velocity
    state.clock += horizon
    state.plan_time += horizon
    return None


def write_runlog(log: RunLog, path: str) -> None:
    """Write a RunLog as JSON."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(log.model_dump_json(by_alias=True, indent=2))


def read_runlog(path: str) -> RunLog:
    """Read a RunLog written by `write_runlog`."""
    with open(path, "r", encoding="utf-8") as f:
        return RunLog.model_validate_json(f.read())


def write_samples_csv(log: RunLog, path: str) -> None:
    """Write the executed samples of a RunLog as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SAMPLE_COLUMNS)
        writer.writeheader()
        writer.writerows(sample.model_dump() for sample in log.samples)
