"""Turn a reference path into a minimum-time trajectory for a friction-circle vehicle."""

import csv
import logging
import math
from enum import Enum

import cvxpy as cp
import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict
from scipy.interpolate import CubicSpline

from mapplan.exceptions import DegenerateTubeError, InfeasiblePlanError, SmoothingError
from mapplan.models import Cell, VehicleParams
from mapplan.planner import CostField, ReferencePath
from mapplan.worldmap import OccupancyGrid

logger = logging.getLogger(__name__)

# constraint bounds are tightened by this fraction so solver tolerance cannot breach the real limit
SOLVER_MARGIN = 1e-5
CHECK_TOLERANCE = 1e-6
ACCEPTED = (cp.OPTIMAL, cp.OPTIMAL_INACCURATE)
TRAJECTORY_COLUMNS = ["t", "x", "y", "vx", "vy", "u_long", "u_lat", "segment"]


class BubbleTube(BaseModel):
    """Discs about reference waypoints that the smoothed path must stay inside."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    centers: np.ndarray
    radii: np.ndarray
    frontier_index: int | None = None


class Trajectory(BaseModel):
    """Time-parameterized states and body-frame forces sampled at path nodes.

    Samples up to and including `stop_index` form the known segment, which ends at rest; later samples are
    the tentative segment through unknown space.

    Args:
        times: (n,) seconds from the start of the plan.
        positions: (n, 2) world positions.
        velocities: (n, 2) world velocities.
        controls: (n, 2) longitudinal and lateral force.
        path_param: (n,) path parameter at each node.
        b: (n,) squared path speed.
        stop_index: sample where the known segment ends, or None.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    controls: np.ndarray
    path_param: np.ndarray
    b: np.ndarray
    stop_index: int | None = None

    @property
    def duration(self) -> float:
        """Total time T."""
        return float(self.times[-1])

    @property
    def frontier_time(self) -> float | None:
        """Time at which the known segment comes to rest."""
        return None if self.stop_index is None else float(self.times[self.stop_index])

    @property
    def stop_time(self) -> float:
        """End of what may be executed: the frontier time, or the whole duration."""
        frontier_time = self.frontier_time
        return self.duration if frontier_time is None else frontier_time

    @property
    def speeds(self) -> NDArray:
        """Speed at every sample."""
        return np.linalg.norm(self.velocities, axis=1)

    @property
    def known_mask(self) -> NDArray:
        """True for samples in the known segment."""
        mask = np.ones(len(self.times), dtype=bool)
        if self.stop_index is not None:
            mask[self.stop_index + 1 :] = False
        return mask

    def state_at(self, t: float) -> tuple[NDArray, NDArray]:
        """Position and velocity at time `t`, playing back constant path acceleration within each interval."""
        t = min(max(t, 0.0), self.duration)
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        i = min(max(i, 0), len(self.times) - 2)
        tau = t - self.times[i]
        ds = self.path_param[i + 1] - self.path_param[i]
        accel = (self.b[i + 1] - self.b[i]) / (2.0 * ds)
        travelled = math.sqrt(self.b[i]) * tau + 0.5 * accel * tau * tau
        frac = min(max(travelled / ds, 0.0), 1.0)
        position = self.positions[i] + frac * (self.positions[i + 1] - self.positions[i])
        velocity = self.velocities[i] + frac * (self.velocities[i + 1] - self.velocities[i])
        return position, velocity


class ViolationKind(str, Enum):
    """Constraint families checked by `validate_trajectory`."""

    FRICTION = "friction"
    TURNING = "turning"
    SPEED = "speed"
    COLLISION = "collision"
    UNKNOWN = "unknown"
    TERMINAL_SPEED = "terminal_speed"


class Violation(BaseModel):
    """One failed check at one sample."""

    index: int
    kind: ViolationKind
    value: float
    limit: float


def build_bubbles(
    path: ReferencePath,
    dist: NDArray,
    rho_unknown: float = 0.5,
    rho_min: float = 0.15,
    rho_max: float = 1.0,
    vehicle_clearance: float = 0.1,
    horizon_index: int | None = None,
) -> BubbleTube:
    """Size a disc about every waypoint.

    Known waypoints get their obstacle distance less the clearance, clamped to [rho_min, rho_max]; waypoints
    from `horizon_index` on (the frontier index by default) get `rho_unknown`. The first waypoint is the
    robot itself and is exempt from the clearance check.

    Args:
        path: reference path.
        dist: per-cell obstacle distance on the path's grid.
        rho_unknown: radius in unknown space.
        rho_min: smallest radius.
        rho_max: largest radius.
        vehicle_clearance: distance kept from obstacles.
        horizon_index: first waypoint treated as tentative.
    """
    n = len(path.waypoints)
    if n == 0:
        raise ValueError("cannot build a tube around an empty path")
    horizon = horizon_index if horizon_index is not None else path.frontier_index
    horizon = n if horizon is None else horizon

    radii = np.full(n, rho_unknown, dtype=float)
    known_dist = dist[path.cells[:horizon, 0], path.cells[:horizon, 1]]
    too_close = np.flatnonzero(known_dist[1:] <= vehicle_clearance) + 1
    if len(too_close):
        i = int(too_close[0])
        raise DegenerateTubeError(f"waypoint {i} is {known_dist[i]:.3f} m from an obstacle")
    radii[:horizon] = np.clip(known_dist - vehicle_clearance, rho_min, rho_max)
    return BubbleTube(centers=np.asarray(path.waypoints, dtype=float), radii=radii, frontier_index=path.frontier_index)


def smoothing_objective(points: NDArray) -> float:
    """Sum of squared second differences."""
    points = np.asarray(points, dtype=float)
    if len(points) < 3:
        return 0.0
    return float(np.sum((points[:-2] - 2.0 * points[1:-1] + points[2:]) ** 2))


def smooth_path(
    tube: BubbleTube,
    start: NDArray | tuple[float, float],
    start_direction: NDArray | None,
    end: NDArray | tuple[float, float],
) -> NDArray:
    """Minimize the squared second differences of the waypoints inside the tube.

    Args:
        tube: discs each waypoint must stay in.
        start: pinned first point.
        start_direction: unit heading the first step must follow when moving, else None.
        end: pinned last point.

    Returns:
        (n, 2) smoothed waypoints
    """
    start, end = np.asarray(start, dtype=float), np.asarray(end, dtype=float)
    n = len(tube.centers)
    if n <= 2:
        return np.vstack([start, end])[:n] if n == 1 else np.vstack([start, end])

    q = cp.Variable((n, 2))
    constraints = [
        q[0] == start,
        q[n - 1] == end,
        cp.norm(q - tube.centers, 2, axis=1) <= tube.radii,
    ]
    if start_direction is not None:
        scale = cp.Variable(nonneg=True)
        constraints.append(q[1] - q[0] == scale * np.asarray(start_direction, dtype=float))
    problem = cp.Problem(cp.Minimize(cp.sum_squares(q[:-2] - 2 * q[1:-1] + q[2:])), constraints)
    try:
        problem.solve()
    except cp.error.SolverError as err:
        raise SmoothingError(f"smoothing solver failed: {err}") from err
    if problem.status not in ACCEPTED or q.value is None:
        raise SmoothingError(f"smoothing ended with status {problem.status}")
    if problem.status == cp.OPTIMAL_INACCURATE:
        logger.warning("Smoothing solution is inaccurate")

    points = np.array(q.value)
    points[0], points[-1] = start, end
    offsets = points - tube.centers
    norms = np.linalg.norm(offsets, axis=1)
    outside = norms > tube.radii
    outside[[0, -1]] = False
    points[outside] = tube.centers[outside] + offsets[outside] * (tube.radii[outside] / norms[outside])[:, None]
    return points


def resample_path(
    waypoints: NDArray,
    spacing: float = 0.1,
    stop_index: int | None = None,
    start_direction: NDArray | None = None,
) -> tuple[NDArray, int | None]:
    """Fit a cubic spline in chord length and sample it uniformly, with a sample exactly at the stop waypoint.

    Args:
        waypoints: (n, 2) smoothed waypoints.
        spacing: target distance between samples.
        stop_index: waypoint that must be sampled exactly.
        start_direction: heading to clamp the spline's initial tangent to, else natural ends.

    Returns:
        sampled points and the sample index of the stop waypoint
    """
    waypoints = np.asarray(waypoints, dtype=float)
    chords = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    keep = np.concatenate([[True], chords > 1e-9])
    kept_index = np.cumsum(keep) - 1
    points = waypoints[keep]
    if len(points) < 2:
        raise ValueError("path needs two distinct waypoints")
    u = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])

    if start_direction is not None:
        direction = np.asarray(start_direction, dtype=float)
        spline = CubicSpline(u, points, bc_type=((1, direction / np.linalg.norm(direction)), (2, np.zeros(2))))
    else:
        spline = CubicSpline(u, points, bc_type="natural")

    def stretch(lo: float, hi: float) -> NDArray:
        return np.linspace(lo, hi, max(math.ceil((hi - lo) / spacing - 1e-9), 1) + 1)

    length = u[-1]
    stop_sample = None
    if stop_index is None:
        params = stretch(0.0, length)
    else:
        stop_u = u[kept_index[stop_index]]
        head = stretch(0.0, stop_u) if stop_u > 0 else np.zeros(1)
        tail = stretch(stop_u, length)[1:] if length - stop_u > 1e-9 else np.zeros(0)
        params = np.concatenate([head, tail])
        stop_sample = len(head) - 1

    samples = spline(params)
    samples[0] = points[0]
    samples[-1] = points[-1]
    if stop_sample is not None:
        samples[stop_sample] = points[kept_index[stop_index]]
    return samples, stop_sample


def _path_derivatives(points: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    """Chord-length parameter and its first and second derivatives by finite differences."""
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    if (steps <= 0).any():
        raise ValueError("waypoints must be distinct")
    s = np.concatenate([[0.0], np.cumsum(steps)])
    order = 2 if len(points) >= 3 else 1
    d1 = np.gradient(points, s, axis=0, edge_order=order)
    d2 = np.gradient(d1, s, axis=0, edge_order=order) if len(points) >= 3 else np.zeros_like(points)
    return s, d1, d2


def _frame_terms(d1: NDArray, d2: NDArray) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Tangent speed, squared tangent speed, and q'' along the tangent and the normal."""
    norm1 = np.linalg.norm(d1, axis=1)
    tangent = d1 / norm1[:, None]
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    return norm1, norm1**2, np.sum(d2 * tangent, axis=1), np.sum(d2 * normal, axis=1)


def build_trajectory(
    points: NDArray, s: NDArray, d1: NDArray, d2: NDArray, b: NDArray, vp: VehicleParams, stop_index: int | None
) -> Trajectory:
    """Assemble a trajectory from squared path speeds at every node."""
    b = np.maximum(np.asarray(b, dtype=float), 0.0)
    ds = np.diff(s)
    root = np.sqrt(b)
    pair = root[:-1] + root[1:]
    with np.errstate(divide="ignore"):
        dt = np.where(pair > 0, 2.0 * ds / pair, np.inf)
    if not np.isfinite(dt).all():
        raise InfeasiblePlanError("profile comes to rest on consecutive nodes")
    accel = np.diff(b) / (2.0 * ds)
    node_accel = np.concatenate([accel, accel[-1:]])
    norm1, _, along, across = _frame_terms(d1, d2)
    controls = vp.m * np.stack([along * b + norm1 * node_accel, across * b], axis=1)
    return Trajectory(
        times=np.concatenate([[0.0], np.cumsum(dt)]),
        positions=np.asarray(points, dtype=float),
        velocities=d1 * root[:, None],
        controls=controls,
        path_param=s,
        b=b,
        stop_index=stop_index,
    )


def min_time_profile(
    waypoints: NDArray, vp: VehicleParams, v_start: float = 0.0, stop_index: int | None = None
) -> Trajectory:
    """Solve the convex minimum-time speed profile along fixed waypoints.

    Variables are the squared path speed b and path acceleration a at the nodes. The traversal time
    sum 2 ds / (sqrt(b_i) + sqrt(b_i+1)) is minimized subject to the friction circle, the turning limit,
    the speed cap, the initial speed and rest at `stop_index`.

    Args:
        waypoints: (n, 2) path nodes, n >= 2.
        vp: vehicle parameters.
        v_start: speed at the first node.
        stop_index: node where the vehicle must be at rest, or None.

    Returns:
        the trajectory
    """
    points = np.asarray(waypoints, dtype=float)
    if len(points) < 2:
        raise ValueError("a speed profile needs at least two waypoints")
    if v_start < 0:
        raise ValueError(f"v_start must be non-negative, got {v_start}")
    s, d1, d2 = _path_derivatives(points)
    norm1, speed2, along, across = _frame_terms(d1, d2)
    n = len(points)
    ds = np.diff(s)
    limit = vp.friction_limit * (1.0 - SOLVER_MARGIN)

    b = cp.Variable(n, nonneg=True)
    a = cp.Variable(n - 1)
    root = cp.Variable(n, nonneg=True)
    node_accel = cp.hstack([a, a[n - 2 : n - 1]])
    u_long = vp.m * (cp.multiply(along, b) + cp.multiply(norm1, node_accel))
    u_lat = vp.m * cp.multiply(across, b)
    turning = np.abs(across) - speed2 * (1.0 - SOLVER_MARGIN) / vp.r_min

    constraints = [
        b[1:] - b[:-1] == 2.0 * cp.multiply(a, ds),
        root <= cp.sqrt(b),
        cp.norm(cp.vstack([u_long, u_lat]), 2, axis=0) <= limit,
        cp.multiply(np.maximum(turning, 0.0), b) <= 0,
        b[0] == v_start**2 / speed2[0],
    ]
    if math.isfinite(vp.v_max):
        constraints.append(cp.multiply(speed2, b) <= vp.v_max**2 * (1.0 + 1e-9))
    if stop_index is not None:
        constraints.append(b[stop_index] == 0)
    objective = cp.Minimize(cp.sum(cp.multiply(2.0 * ds, cp.inv_pos(root[:-1] + root[1:]))))
    problem = cp.Problem(objective, constraints)
    try:
        problem.solve()
    except cp.error.SolverError as err:
        raise InfeasiblePlanError(f"speed profile solver failed: {err}") from err
    if problem.status not in ACCEPTED or b.value is None:
        raise InfeasiblePlanError(f"speed profile ended with status {problem.status}")
    if problem.status == cp.OPTIMAL_INACCURATE:
        logger.warning("Speed profile solution is inaccurate")

    values = np.maximum(np.array(b.value), 0.0)
    values[0] = v_start**2 / speed2[0]
    if stop_index is not None:
        values[stop_index] = 0.0
    return build_trajectory(points, s, d1, d2, values, vp, stop_index)


def integrate_profile(
    waypoints: NDArray, vp: VehicleParams, v_start: float = 0.0, stop_index: int | None = None
) -> Trajectory:
    """Numerically integrate the speed profile: a backward deceleration pass, then a forward acceleration pass.

    Args:
        waypoints: (n, 2) path nodes, n >= 2.
        vp: vehicle parameters.
        v_start: speed at the first node.
        stop_index: node where the vehicle must be at rest, or None.
    """
    points = np.asarray(waypoints, dtype=float)
    if len(points) < 2:
        raise ValueError("a speed profile needs at least two waypoints")
    s, d1, d2 = _path_derivatives(points)
    norm1, speed2, along, across = _frame_terms(d1, d2)
    n = len(points)
    ds = np.diff(s)
    grip = vp.mu * vp.g * (1.0 - 1e-3)

    curvature = np.linalg.norm(d2, axis=1)
    with np.errstate(divide="ignore"):
        ceiling = np.where(curvature > 0, grip / curvature, np.inf)
    ceiling = np.where(np.abs(across) > speed2 / vp.r_min, 0.0, ceiling)
    if math.isfinite(vp.v_max):
        ceiling = np.minimum(ceiling, vp.v_max**2 / speed2)
    if stop_index is not None:
        ceiling[stop_index] = 0.0

    def spare(i: int, b_i: float) -> float:
        return math.sqrt(max(grip**2 - (across[i] * b_i) ** 2, 0.0))

    backward = ceiling.copy()
    for i in range(n - 2, -1, -1):
        if not math.isfinite(backward[i + 1]):
            continue
        guess = backward[i + 1]
        for _ in range(2):
            decel = (spare(i, min(guess, backward[i])) + along[i] * min(guess, backward[i])) / norm1[i]
            guess = backward[i + 1] + 2.0 * ds[i] * max(decel, 0.0)
        backward[i] = min(backward[i], guess)

    b = np.empty(n)
    b[0] = v_start**2 / speed2[0]
    if b[0] > backward[0] * (1.0 + 1e-9) + 1e-12:
        raise InfeasiblePlanError(f"v_start {v_start:.3f} m/s cannot be absorbed before the first constraint")
    for i in range(n - 1):
        accel = (spare(i, b[i]) - along[i] * b[i]) / norm1[i]
        b[i + 1] = min(backward[i + 1], b[i] + 2.0 * ds[i] * max(accel, 0.0))
    if not np.isfinite(b).all():
        raise InfeasiblePlanError("unbounded speed profile; set a finite v_max")
    return build_trajectory(points, s, d1, d2, b, vp, stop_index)


def evaluate_penalty(unknown_waypoints: NDArray, field: CostField) -> float:
    """Line integral of alpha / (1 - phi + epsilon) along a polyline, phi sampled at segment midpoints."""
    points = np.asarray(unknown_waypoints, dtype=float).reshape(-1, 2)
    if len(points) < 2:
        return 0.0
    lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
    phi = field.phi_at(0.5 * (points[:-1] + points[1:]))
    return float(np.sum(field.alpha / (1.0 - phi + field.epsilon) * lengths))


def validate_trajectory(traj: Trajectory, belief: OccupancyGrid, vp: VehicleParams) -> list[Violation]:
    """Check dynamics at every sample, free space along the known segment and rest at the frontier.

    Known-segment positions are checked at the samples and at the midpoint of each pair of samples.
    """
    violations: list[Violation] = []

    def report(indices: NDArray, kind: ViolationKind, values: NDArray, limits: NDArray | float) -> None:
        limits = np.broadcast_to(np.asarray(limits, dtype=float), values.shape)
        for i in indices:
            violations.append(Violation(index=int(i), kind=kind, value=float(values[i]), limit=float(limits[i])))

    force = np.linalg.norm(traj.controls, axis=1)
    friction = vp.friction_limit
    report(np.flatnonzero(force > friction * (1.0 + CHECK_TOLERANCE)), ViolationKind.FRICTION, force, friction)

    speeds = traj.speeds
    lateral = np.abs(traj.controls[:, 1])
    turn_limit = vp.m * speeds**2 / vp.r_min
    over_turn = lateral > turn_limit * (1.0 + CHECK_TOLERANCE) + 1e-9
    report(np.flatnonzero(over_turn), ViolationKind.TURNING, lateral, turn_limit)

    if math.isfinite(vp.v_max):
        report(np.flatnonzero(speeds > vp.v_max * (1.0 + CHECK_TOLERANCE)), ViolationKind.SPEED, speeds, vp.v_max)

    known = np.flatnonzero(traj.known_mask)
    positions = traj.positions[known]
    states = belief.states_at(positions)
    if len(positions) > 1:
        mids = 0.5 * (positions[:-1] + positions[1:])
        mid_states = belief.states_at(mids)
    else:
        mid_states = np.zeros(0, dtype=np.int8)
    for kind, code in ((ViolationKind.COLLISION, Cell.OCCUPIED), (ViolationKind.UNKNOWN, Cell.UNKNOWN)):
        hits = sorted(set(known[states == code].tolist()) | set(known[:-1][mid_states == code].tolist()))
        report(np.array(hits, dtype=int), kind, np.full(len(traj.times), float(code)), float(Cell.FREE))

    if traj.stop_index is not None and speeds[traj.stop_index] > CHECK_TOLERANCE:
        report(np.array([traj.stop_index]), ViolationKind.TERMINAL_SPEED, speeds, 0.0)
    return violations


def trajectory_rows(traj: Trajectory) -> list[dict[str, float | str]]:
    """One row per sample with the trajectory CSV columns."""
    known = traj.known_mask
    return [
        {
            "t": float(traj.times[i]),
            "x": float(traj.positions[i, 0]),
            "y": float(traj.positions[i, 1]),
            "vx": float(traj.velocities[i, 0]),
            "vy": float(traj.velocities[i, 1]),
            "u_long": float(traj.controls[i, 0]),
            "u_lat": float(traj.controls[i, 1]),
            "segment": "known" if known[i] else "unknown",
        }
        for i in range(len(traj.times))
    ]


def write_trajectory_csv(traj: Trajectory, path: str) -> None:
    """Export a trajectory as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=TRAJECTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(trajectory_rows(traj))
