"""Test bubble smoothing, speed profiles and trajectory checks."""

import csv
import math

import numpy as np
import pytest

from mapplan.exceptions import DegenerateTubeError, InfeasiblePlanError
from mapplan.models import Cell, VehicleParams
from mapplan.planner import CostField, ReferencePath
from mapplan.trajopt import (
    TRAJECTORY_COLUMNS,
    BubbleTube,
    Trajectory,
    ViolationKind,
    build_bubbles,
    evaluate_penalty,
    integrate_profile,
    min_time_profile,
    resample_path,
    smooth_path,
    smoothing_objective,
    validate_trajectory,
    write_trajectory_csv,
)
from mapplan.worldmap import OccupancyGrid

GRIP = 0.9 * 9.81


def straight(length: float = 4.0, n: int = 201) -> np.ndarray:
    """Waypoints along y = 1.5 starting at x = 0.5."""
    return np.column_stack([np.linspace(0.5, 0.5 + length, n), np.full(n, 1.5)])


def open_room() -> OccupancyGrid:
    """3 m by 6 m room with a wall border."""
    cells = np.full((12, 24), Cell.OCCUPIED, dtype=np.int8)
    cells[1:-1, 1:-1] = Cell.FREE
    return OccupancyGrid(resolution=0.25, cells=cells)


def l_shaped_tube(radius: float = 0.3) -> BubbleTube:
    """Tube around a right-angle turn."""
    leg = np.arange(0.0, 2.0, 0.25)
    centers = np.vstack(
        [np.column_stack([leg, np.zeros_like(leg)]), np.column_stack([np.full_like(leg, 2.0), leg]), [[2.0, 2.0]]]
    )
    return BubbleTube(centers=centers, radii=np.full(len(centers), radius))


def projected_gradient(tube: BubbleTube, iterations: int = 20_000) -> np.ndarray:
    """Independent smoother: gradient steps on the second-difference energy, projected onto the discs."""
    points = tube.centers.copy()
    step = 1.0 / 32.0
    for _ in range(iterations):
        second = points[:-2] - 2.0 * points[1:-1] + points[2:]
        grad = np.zeros_like(points)
        grad[:-2] += 2.0 * second
        grad[1:-1] -= 4.0 * second
        grad[2:] += 2.0 * second
        grad[[0, -1]] = 0.0
        points = points - step * grad
        offsets = points - tube.centers
        norms = np.linalg.norm(offsets, axis=1)
        scale = np.minimum(1.0, tube.radii / np.maximum(norms, 1e-12))
        points = tube.centers + offsets * scale[:, None]
    return points


def random_smoothed_path(rng: np.random.Generator) -> np.ndarray:
    """Random gently turning reference, smoothed inside its bubbles and resampled at 0.1 m."""
    n = int(rng.integers(16, 32))
    headings = np.cumsum(rng.uniform(-0.25, 0.25, n - 1))
    steps = 0.25 * np.column_stack([np.cos(headings), np.sin(headings)])
    centers = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
    tube = BubbleTube(centers=centers, radii=rng.uniform(0.15, 0.4, n))
    smoothed = smooth_path(tube, centers[0], None, centers[-1])
    samples, _ = resample_path(smoothed, spacing=0.1)
    return samples


def hairpin() -> np.ndarray:
    """Straight lead-in, half circle of unit radius, straight lead-out."""
    theta = np.linspace(-np.pi / 2, np.pi / 2, 32)
    lead_in = np.column_stack([np.linspace(-1.0, 0.0, 11)[:-1], np.full(10, -1.0)])
    arc = np.column_stack([np.cos(theta), np.sin(theta)])
    lead_out = np.column_stack([np.linspace(0.0, -1.0, 11)[1:], np.full(10, 1.0)])
    return np.vstack([lead_in, arc, lead_out])


def lateral_curvature(traj: Trajectory, vp: VehicleParams) -> np.ndarray:
    """Curvature felt by the vehicle, |u_lat| / (m v^2), at moving samples; NaN at rest."""
    speeds = traj.speeds
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(speeds > 1e-9, np.abs(traj.controls[:, 1]) / (vp.m * speeds**2), np.nan)


def test_bang_bang_closed_form() -> None:
    """Test a straight path from rest to rest without a speed cap accelerates then brakes at full grip."""
    vp = VehicleParams(v_max=math.inf)
    expected = 2 * math.sqrt(4.0 / GRIP)
    assert expected == pytest.approx(1.346, abs=1e-3)
    convex = min_time_profile(straight(), vp, stop_index=200)
    integrated = integrate_profile(straight(), vp, stop_index=200)
    assert convex.duration == pytest.approx(expected, rel=1e-2)
    assert integrated.duration == pytest.approx(expected, rel=1e-2)
    assert convex.speeds.max() == pytest.approx(math.sqrt(2 * GRIP * 2.0), rel=1e-2)


def test_trapezoid_closed_form() -> None:
    """Test a straight path under a 1 m/s cap spends almost all its time cruising."""
    vp = VehicleParams(v_max=1.0)
    expected = 1.0 / GRIP + 4.0
    assert expected == pytest.approx(4.113, abs=1e-3)
    convex = min_time_profile(straight(), vp, stop_index=200)
    integrated = integrate_profile(straight(), vp, stop_index=200)
    assert convex.duration == pytest.approx(expected, rel=1e-2)
    assert integrated.duration == pytest.approx(expected, rel=1e-2)
    assert convex.speeds.max() <= 1.0 + 1e-6


@pytest.mark.parametrize("seed", range(50))
def test_convex_and_integrated_profiles_agree(seed: int) -> None:
    """Test both profilers find nearly the same time on random smoothed paths."""
    points = random_smoothed_path(np.random.default_rng(seed))
    vp = VehicleParams(v_max=2.0)
    convex = min_time_profile(points, vp, stop_index=len(points) - 1)
    integrated = integrate_profile(points, vp, stop_index=len(points) - 1)
    assert convex.duration == pytest.approx(integrated.duration, rel=0.02)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_tighter_speed_cap_never_saves_time(seed: int) -> None:
    """Test lowering v_max from 4 to 1 m/s never shortens the trajectory."""
    points = random_smoothed_path(np.random.default_rng(seed))
    durations = [
        min_time_profile(points, VehicleParams(v_max=v_max), stop_index=len(points) - 1).duration
        for v_max in (4.0, 3.0, 2.0, 1.0)
    ]
    assert all(later >= earlier * (1.0 - 1e-4) for earlier, later in zip(durations, durations[1:]))


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_stopping_never_saves_time(seed: int) -> None:
    """Test requiring rest at a node never gives a shorter trajectory than a free end."""
    points = random_smoothed_path(np.random.default_rng(seed))
    vp = VehicleParams(v_max=3.0)
    free = min_time_profile(points, vp).duration
    for stop in (len(points) // 3, len(points) // 2, len(points) - 1):
        assert min_time_profile(points, vp, stop_index=stop).duration >= free * (1.0 - 1e-4)


def test_speed_where_turning_limit_binds() -> None:
    """Test samples turning at the minimum radius never exceed the corner speed."""
    vp = VehicleParams(v_max=4.0)
    assert vp.corner_speed == pytest.approx(2.101, abs=1e-3)
    base = hairpin()
    loose = integrate_profile(base, vp.model_copy(update={"r_min": 0.01}), stop_index=len(base) - 1)
    sharpest = float(np.nanmax(lateral_curvature(loose, vp)))
    # curvature scales inversely with size; put the sharpest node just inside 1 / r_min
    points = base * (sharpest * vp.r_min / 0.9999)

    for profile in (min_time_profile, integrate_profile):
        traj = profile(points, vp, stop_index=len(points) - 1)
        saturated = lateral_curvature(traj, vp) >= (1.0 - 1e-3) / vp.r_min
        assert saturated.sum() >= 10
        assert (traj.speeds[saturated] <= vp.corner_speed * (1.0 + 1e-3)).all()


def test_profile_honours_initial_speed_and_stop() -> None:
    """Test the profile starts at the given speed and rests at the stop node."""
    vp = VehicleParams(v_max=2.0)
    traj = min_time_profile(straight(n=101), vp, v_start=1.5, stop_index=60)
    assert traj.speeds[0] == pytest.approx(1.5, rel=1e-6)
    assert traj.speeds[60] == 0.0
    assert traj.frontier_time == pytest.approx(traj.times[60])
    assert traj.stop_time < traj.duration
    assert traj.known_mask.sum() == 61


def test_profile_cannot_stop_in_time() -> None:
    """Test an unstoppable start speed is reported as infeasible."""
    vp = VehicleParams(v_max=4.0)
    points = straight(length=0.2, n=21)
    with pytest.raises(InfeasiblePlanError):
        min_time_profile(points, vp, v_start=4.0, stop_index=20)
    with pytest.raises(InfeasiblePlanError):
        integrate_profile(points, vp, v_start=4.0, stop_index=20)


def test_profile_argument_errors() -> None:
    """Test degenerate inputs are rejected."""
    vp = VehicleParams()
    with pytest.raises(ValueError):
        min_time_profile(straight(n=1), vp)
    with pytest.raises(ValueError):
        min_time_profile(straight(), vp, v_start=-1.0)


def test_state_at_plays_back_the_profile() -> None:
    """Test playback hits samples and stays on the path between them."""
    traj = integrate_profile(straight(), VehicleParams(v_max=2.0), stop_index=200)
    position, velocity = traj.state_at(0.0)
    assert np.allclose(position, traj.positions[0]) and np.allclose(velocity, 0.0)
    position, velocity = traj.state_at(traj.duration + 5.0)
    assert np.allclose(position, traj.positions[-1]) and np.allclose(velocity, 0.0)
    position, _ = traj.state_at(0.5 * traj.duration)
    assert position[1] == pytest.approx(1.5)
    assert position[0] == pytest.approx(2.5, abs=0.05)


def test_smoothing_matches_projected_gradient() -> None:
    """Test the solver reaches the optimum found by an independent projected gradient method."""
    tube = l_shaped_tube()
    smoothed = smooth_path(tube, tube.centers[0], None, tube.centers[-1])
    reference = projected_gradient(tube)
    assert smoothing_objective(smoothed) <= smoothing_objective(reference) + 1e-5
    assert smoothing_objective(smoothed) == pytest.approx(smoothing_objective(reference), rel=1e-2, abs=1e-4)
    assert smoothing_objective(smoothed) < smoothing_objective(tube.centers)
    assert (np.linalg.norm(smoothed - tube.centers, axis=1) <= tube.radii + 1e-9).all()
    assert np.array_equal(smoothed[0], tube.centers[0]) and np.array_equal(smoothed[-1], tube.centers[-1])


def test_smoothing_follows_start_heading() -> None:
    """Test the first step keeps the current direction of travel."""
    tube = l_shaped_tube()
    smoothed = smooth_path(tube, tube.centers[0], np.array([1.0, 0.0]), tube.centers[-1])
    assert smoothed[1, 1] == pytest.approx(smoothed[0, 1], abs=1e-6)
    assert smoothed[1, 0] >= smoothed[0, 0] - 1e-9


def test_build_bubbles() -> None:
    """Test radii follow obstacle distance in known space and a fixed radius past the horizon."""
    cells = np.array([[1, 0], [1, 1], [1, 2], [1, 3], [1, 4]])
    path = ReferencePath(waypoints=cells[:, ::-1] + 0.5, cells=cells, frontier_index=3, resolution=1.0)
    dist = np.zeros((3, 5))
    dist[1] = [0.05, 0.2, 0.5, 3.0, 3.0]
    tube = build_bubbles(path, dist, rho_unknown=0.5, rho_min=0.15, rho_max=1.0, vehicle_clearance=0.1)
    assert tube.radii.tolist() == pytest.approx([0.15, 0.15, 0.4, 0.5, 0.5])
    assert tube.frontier_index == 3

    widened = build_bubbles(path, dist, 0.5, 0.15, 1.0, 0.1, horizon_index=5)
    assert widened.radii[3] == pytest.approx(1.0)

    dist[1, 2] = 0.1
    with pytest.raises(DegenerateTubeError):
        build_bubbles(path, dist, 0.5, 0.15, 1.0, 0.1)


def test_resample_path_keeps_stop_sample() -> None:
    """Test uniform samples include the stop waypoint exactly."""
    waypoints = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    samples, stop = resample_path(waypoints, spacing=0.1, stop_index=2)
    assert stop == 20
    assert len(samples) == 31
    assert np.array_equal(samples[stop], waypoints[2])
    assert np.allclose(np.diff(samples[:, 0]), 0.1)

    samples, stop = resample_path(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]), spacing=0.25, stop_index=1)
    assert stop == 0
    assert len(samples) == 5
    with pytest.raises(ValueError):
        resample_path(np.zeros((3, 2)))


def test_evaluate_penalty() -> None:
    """Test the penalty integrates the multiplier along the polyline."""
    field = CostField(phi=np.zeros((4, 8)), alpha=0.25, epsilon=1e-3)
    line = np.array([[0.5, 0.5], [4.5, 0.5]])
    assert evaluate_penalty(line, field) == pytest.approx(0.25 * 4.0 / 1.001)
    assert evaluate_penalty(line, field) == pytest.approx(0.999, abs=1e-3)
    assert evaluate_penalty(np.linspace(line[0], line[1], 41), field) == pytest.approx(0.25 * 4.0 / 1.001)
    assert evaluate_penalty(line[:1], field) == 0.0
    assert evaluate_penalty(np.zeros((0, 2)), field) == 0.0


def test_evaluate_penalty_converges() -> None:
    """Test refining the polyline tenfold over a smooth field barely changes the penalty."""
    centers = (np.arange(60) + 0.5) * 0.1
    wave = 2 * np.pi * centers / 8.0
    field = CostField(phi=0.3 + 0.2 * np.outer(np.cos(wave), np.sin(wave)), resolution=0.1)
    start, end = np.array([1.0, 1.0]), np.array([4.0, 3.5])
    coarse = evaluate_penalty(np.linspace(start, end, 21), field)
    fine = evaluate_penalty(np.linspace(start, end, 201), field)
    assert coarse > 0.25 * np.linalg.norm(end - start)
    assert abs(fine - coarse) < 0.01 * fine


def test_validate_clean_trajectory() -> None:
    """Test a profile through free space passes every check."""
    vp = VehicleParams(v_max=2.0)
    traj = min_time_profile(straight(), vp, stop_index=200)
    assert validate_trajectory(traj, open_room(), vp) == []


def test_validate_reports_violations() -> None:
    """Test speed, collision, unknown space and a moving stop are each reported."""
    vp = VehicleParams(v_max=2.0)
    traj = min_time_profile(straight(), vp, stop_index=200)
    kinds = {v.kind for v in validate_trajectory(traj, open_room(), vp.model_copy(update={"v_max": 1.0}))}
    assert kinds == {ViolationKind.SPEED}

    room = open_room()
    room.cells[6, 10] = Cell.OCCUPIED
    room.cells[6, 14] = Cell.UNKNOWN
    kinds = {v.kind for v in validate_trajectory(traj, room, vp)}
    assert kinds == {ViolationKind.COLLISION, ViolationKind.UNKNOWN}

    moving = Trajectory(
        times=np.array([0.0, 1.0]),
        positions=np.array([[1.0, 1.5], [2.0, 1.5]]),
        velocities=np.array([[1.0, 0.0], [1.0, 0.0]]),
        controls=np.zeros((2, 2)),
        path_param=np.array([0.0, 1.0]),
        b=np.array([1.0, 1.0]),
        stop_index=1,
    )
    kinds = {v.kind for v in validate_trajectory(moving, open_room(), vp)}
    assert kinds == {ViolationKind.TERMINAL_SPEED}


def test_validate_single_friction_violation() -> None:
    """Test one control at 1.1 times the friction limit is the only violation reported."""
    vp = VehicleParams(v_max=2.0)
    traj = min_time_profile(straight(), vp, stop_index=200)
    controls = traj.controls.copy()
    controls[10] = [1.1 * vp.friction_limit, 0.0]
    violations = validate_trajectory(traj.model_copy(update={"controls": controls}), open_room(), vp)
    assert [(v.index, v.kind) for v in violations] == [(10, ViolationKind.FRICTION)]
    assert violations[0].value == pytest.approx(1.1 * vp.friction_limit)
    assert violations[0].limit == pytest.approx(22.0725, abs=1e-4)


def test_unknown_space_after_the_stop_is_allowed() -> None:
    """Test only the known segment has to lie in free space."""
    vp = VehicleParams(v_max=2.0)
    traj = min_time_profile(straight(), vp, stop_index=100)
    room = open_room()
    room.cells[6, 14:] = Cell.UNKNOWN
    assert validate_trajectory(traj, room, vp) == []


def test_trajectory_csv(tmp_path) -> None:
    """Test the CSV export labels known and tentative samples."""
    traj = min_time_profile(straight(n=51), VehicleParams(v_max=2.0), stop_index=30)
    path = tmp_path / "plan.csv"
    write_trajectory_csv(traj, str(path))
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == TRAJECTORY_COLUMNS
    assert len(rows) == 51
    assert [r["segment"] for r in rows].count("known") == 31
    assert float(rows[30]["vx"]) == 0.0
