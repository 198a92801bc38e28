"""Test occupancy grids, maze generation, lidar, frontiers and queries."""

import math

import numpy as np
import pytest
from scipy import ndimage

from mapplan.exceptions import ConfigurationError, InvalidPoseError
from mapplan.models import Cell, MazeSpec
from mapplan.worldmap import (
    OccupancyGrid,
    build_query,
    clearance_field,
    distance_field,
    dump_maze_spec,
    dumps_grid,
    extract_frontiers,
    generate_maze,
    load_grid,
    load_maze_spec,
    loads_grid,
    maze_endpoints,
    maze_layout,
    sample_free_poses,
    save_grid,
    simulate_lidar,
)

RES = 0.25


@pytest.fixture(scope="session")
def maze_spec() -> MazeSpec:
    """Desk-scale maze spec fixture."""
    return MazeSpec(seed=7)


@pytest.fixture(scope="session")
def maze(maze_spec: MazeSpec) -> OccupancyGrid:
    """Desk-scale maze fixture."""
    return generate_maze(maze_spec)


def room(height: int = 20, width: int = 20) -> OccupancyGrid:
    """Open room with a one-cell wall border."""
    cells = np.full((height, width), Cell.OCCUPIED, dtype=np.int8)
    cells[1:-1, 1:-1] = Cell.FREE
    return OccupancyGrid(resolution=RES, cells=cells)


def test_grid_validation() -> None:
    """Test grids reject bad codes, shapes and resolutions."""
    with pytest.raises(ValueError):
        OccupancyGrid(resolution=RES, cells=np.full((2, 2), 3))
    with pytest.raises(ValueError):
        OccupancyGrid(resolution=RES, cells=np.zeros(4))
    with pytest.raises(ValueError):
        OccupancyGrid(resolution=0.0, cells=np.zeros((2, 2)))


def test_grid_geometry() -> None:
    """Test world to cell conversion with rows along y."""
    grid = OccupancyGrid.unknown(4, 6, RES, origin=(1.0, 2.0))
    assert grid.cell_of((1.0 + 5 * RES + 0.01, 2.0 + 0.01)) == (0, 5)
    assert np.allclose(grid.center(3, 0), (1.0 + 0.5 * RES, 2.0 + 3.5 * RES))
    assert grid.cell_centers().shape == (4, 6, 2)
    assert np.allclose(grid.cell_centers()[3, 0], grid.center(3, 0))
    assert grid.states_at(np.array([[0.0, 0.0], [1.01, 2.01]])).tolist() == [Cell.OCCUPIED, Cell.UNKNOWN]


def test_maze_geometry(maze_spec: MazeSpec, maze: OccupancyGrid) -> None:
    """Test desk-scale maze dimensions, border and endpoints."""
    lattice, hallway = maze_layout(maze_spec)
    assert (lattice, hallway) == (6, 10)
    assert maze.cells.shape == (67, 67)
    assert set(np.unique(maze.cells).tolist()) == {Cell.FREE, Cell.OCCUPIED}
    for edge in (maze.cells[0], maze.cells[-1], maze.cells[:, 0], maze.cells[:, -1]):
        assert (edge == Cell.OCCUPIED).all()
    start, goal = maze_endpoints(maze_spec)
    assert start == pytest.approx((1.625, 1.625))
    assert goal == pytest.approx((15.375, 15.375))
    assert maze.states_at(np.array([start, goal])).tolist() == [Cell.FREE, Cell.FREE]


def test_maze_is_perfect(maze_spec: MazeSpec, maze: OccupancyGrid) -> None:
    """Test the maze is connected and has exactly one passage per spanning-tree edge."""
    _, n_components = ndimage.label(maze.cells == Cell.FREE)
    assert n_components == 1

    lattice, hallway = maze_layout(maze_spec)
    pitch, mid = hallway + 1, 1 + hallway // 2
    passages = 0
    for i in range(lattice):
        for j in range(lattice - 1):
            passages += maze.cells[mid + i * pitch, (j + 1) * pitch] == Cell.FREE
            passages += maze.cells[(j + 1) * pitch, mid + i * pitch] == Cell.FREE
    assert passages == lattice * lattice - 1


def test_maze_determinism(maze: OccupancyGrid) -> None:
    """Test the same seed gives the same maze and another seed a different one."""
    assert np.array_equal(generate_maze(MazeSpec(seed=7)).cells, maze.cells)
    assert not np.array_equal(generate_maze(MazeSpec(seed=8)).cells, maze.cells)


@pytest.mark.parametrize(
    "extent,hallway_width,resolution",
    [
        (15.0, 2.4, 0.25),
        (15.0, 2.5, 0.3),
        (2.5, 2.5, 0.25),
    ],
)
def test_maze_configuration_errors(extent: float, hallway_width: float, resolution: float) -> None:
    """Test mazes whose sizes do not tile are rejected."""
    with pytest.raises(ConfigurationError):
        generate_maze(MazeSpec(seed=0, extent=extent, hallway_width=hallway_width, resolution=resolution))


def test_maze_spec_text(maze_spec: MazeSpec) -> None:
    """Test maze specs survive key-value text."""
    spec = maze_spec.model_copy(update={"start": (1.625, 1.625)})
    assert load_maze_spec(dump_maze_spec(spec)) == spec


def test_grid_file(tmp_path, maze: OccupancyGrid) -> None:
    """Test grid files are read back unchanged."""
    belief = OccupancyGrid.unknown_like(maze)
    belief.cells[:10, :20] = maze.cells[:10, :20]
    path = str(tmp_path / "belief.grid")
    save_grid(belief, path)
    loaded = load_grid(path)
    assert loaded.same_geometry(belief)
    assert np.array_equal(loaded.cells, belief.cells)
    assert dumps_grid(belief).splitlines()[1].startswith("#")


@pytest.mark.parametrize(
    "text",
    [
        "gridmap v2 1 1 0.25 0.0 0.0\n.\n",
        "gridmap v1 2 1 0.25 0.0 0.0\n.\n",
        "gridmap v1 1 1 0.25 0.0 0.0\nx\n",
    ],
)
def test_grid_file_errors(text: str) -> None:
    """Test malformed grid text is rejected."""
    with pytest.raises(ValueError):
        loads_grid(text)


def test_lidar_open_room() -> None:
    """Test a scan in an open room sees every free cell within range."""
    truth = room()
    pose = np.array([2.51, 2.49])
    belief = simulate_lidar(truth, OccupancyGrid.unknown_like(truth), pose, sensor_range=1.5)
    centers = truth.cell_centers()
    within = np.linalg.norm(centers - pose, axis=-1) <= 1.5
    assert (belief.cells[within & (truth.cells == Cell.FREE)] == Cell.FREE).all()
    assert not (belief.cells[~within] == Cell.FREE).any()


def test_lidar_soundness_and_visibility(maze_spec: MazeSpec, maze: OccupancyGrid) -> None:
    """Test observed cells match truth and FREE cells are within range with a clear line of sight."""
    start, _ = maze_endpoints(maze_spec)
    pose = np.array(start) + np.array([0.013, 0.007])
    sensor_range = 7.5
    belief = simulate_lidar(maze, OccupancyGrid.unknown_like(maze), pose, sensor_range)

    observed = belief.cells != Cell.UNKNOWN
    assert observed.any()
    assert np.array_equal(belief.cells[observed], maze.cells[observed])

    rows, cols = np.nonzero(belief.cells == Cell.FREE)
    centers = maze.cell_centers()[rows, cols]
    assert (np.linalg.norm(centers - pose, axis=1) <= sensor_range).all()
    fractions = np.linspace(0.0, 1.0, 400)
    for center in centers:
        samples = pose + fractions[:, None] * (center - pose)
        assert (maze.states_at(samples) == Cell.FREE).all()


def test_lidar_errors(maze: OccupancyGrid) -> None:
    """Test scans from walls or into mismatched grids are rejected."""
    with pytest.raises(InvalidPoseError):
        simulate_lidar(maze, OccupancyGrid.unknown_like(maze), (0.1, 0.1), 5.0)
    with pytest.raises(InvalidPoseError):
        simulate_lidar(maze, OccupancyGrid.unknown_like(maze), (-3.0, 1.0), 5.0)
    with pytest.raises(ValueError):
        simulate_lidar(maze, OccupancyGrid.unknown(3, 3, RES), (1.625, 1.625), 5.0)


def test_frontiers_single_cluster() -> None:
    """Test a known half next to an unknown half gives one frontier column."""
    cells = np.full((5, 5), Cell.UNKNOWN, dtype=np.int8)
    cells[:, :2] = Cell.FREE
    frontiers = extract_frontiers(OccupancyGrid(resolution=RES, cells=cells))
    assert len(frontiers.cells) == 5
    assert (frontiers.cells[:, 1] == 1).all()
    assert len(frontiers.centroids) == 1
    assert frontiers.centroids[0] == pytest.approx((1.5 * RES, 2.5 * RES))


def test_frontiers_two_clusters() -> None:
    """Test frontier cells separated by a wall form separate clusters."""
    cells = np.full((7, 5), Cell.UNKNOWN, dtype=np.int8)
    cells[:, :2] = Cell.FREE
    cells[3, :] = Cell.OCCUPIED
    frontiers = extract_frontiers(OccupancyGrid(resolution=RES, cells=cells))
    assert len(frontiers.clusters) == 2
    assert sorted(len(c) for c in frontiers.clusters) == [3, 3]


def test_frontiers_empty() -> None:
    """Test a fully known grid has no frontier."""
    frontiers = extract_frontiers(room())
    assert frontiers.empty
    assert frontiers.centroids.shape == (0, 2)


def test_distance_and_clearance() -> None:
    """Test distances are center to center and clearance subtracts half a cell diagonal."""
    cells = np.zeros((5, 5), dtype=np.int8)
    cells[2, 2] = Cell.OCCUPIED
    grid = OccupancyGrid(resolution=RES, cells=cells)
    dist = distance_field(grid)
    assert dist[2, 2] == 0.0
    assert dist[2, 3] == pytest.approx(RES)
    assert dist[0, 0] == pytest.approx(math.sqrt(8) * RES)
    assert clearance_field(grid)[0, 0] == pytest.approx(math.sqrt(8) * RES - RES * math.sqrt(0.5))
    assert np.isinf(distance_field(OccupancyGrid(resolution=RES, cells=np.zeros((3, 3))))).all()


def test_build_query() -> None:
    """Test context is observed cells within range and targets are unknown cells near frontiers."""
    cells = np.full((10, 10), Cell.UNKNOWN, dtype=np.int8)
    cells[:, :5] = Cell.FREE
    cells[0, :5] = Cell.OCCUPIED
    belief = OccupancyGrid(resolution=1.0, cells=cells)
    pose = np.array([2.5, 5.5])
    query = build_query(belief, pose, extract_frontiers(belief), sensor_range=2.0, prediction_radius=1.5)

    assert (np.linalg.norm(query.context[:, :2], axis=1) <= 2.0).all()
    assert set(query.context[:, 2].tolist()) == {0.0}
    assert (cells[query.target_cells[:, 0], query.target_cells[:, 1]] == Cell.UNKNOWN).all()
    assert np.allclose(query.targets + pose, belief.cell_centers()[query.target_cells[:, 0], query.target_cells[:, 1]])

    full = build_query(belief, pose, extract_frontiers(belief), 2.0, 1.5, full_context=True)
    assert len(full.context) == 50
    assert full.context[:, 2].sum() == 5

    with pytest.raises(InvalidPoseError):
        build_query(belief, (7.5, 5.5), extract_frontiers(belief), 2.0, 1.5)


def test_sample_free_poses(maze: OccupancyGrid) -> None:
    """Test sampled poses are cell centers of free cells."""
    poses = sample_free_poses(maze, 50, np.random.default_rng(0))
    assert poses.shape == (50, 2)
    assert (maze.states_at(poses) == Cell.FREE).all()
    with pytest.raises(ValueError):
        sample_free_poses(OccupancyGrid(resolution=RES, cells=np.ones((3, 3))), 1, np.random.default_rng(0))


def test_lidar_knowledge_only_grows(maze: OccupancyGrid) -> None:
    """Test a sequence of scans never forgets a cell, always agrees with truth, and repeats change nothing."""
    belief = OccupancyGrid.unknown_like(maze)
    poses = sample_free_poses(maze, 6, np.random.default_rng(1)) + np.array([0.013, 0.007])
    known = np.zeros(maze.cells.shape, dtype=bool)
    for pose in poses:
        simulate_lidar(maze, belief, pose, sensor_range=5.0, n_beams=360)
        observed = belief.cells != Cell.UNKNOWN
        assert observed[known].all()
        assert np.array_equal(belief.cells[observed], maze.cells[observed])
        known = observed
    assert known.any()

    before = belief.cells.copy()
    simulate_lidar(maze, belief, poses[-1], sensor_range=5.0, n_beams=360)
    assert np.array_equal(belief.cells, before)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_distance_field_matches_exhaustive_search(seed: int) -> None:
    """Test the field equals the pairwise minimum over all non-FREE cells of a random 10 by 10 grid."""
    rng = np.random.default_rng(seed)
    cells = rng.choice([Cell.UNKNOWN, Cell.FREE, Cell.OCCUPIED], size=(10, 10), p=[0.2, 0.6, 0.2]).astype(np.int8)
    cells[0, 0] = Cell.OCCUPIED
    dist = distance_field(OccupancyGrid(resolution=RES, cells=cells))

    blocked = np.argwhere(cells != Cell.FREE)
    expected = np.zeros(cells.shape)
    for row, col in np.argwhere(cells == Cell.FREE):
        squared = (blocked[:, 0] - row) ** 2 + (blocked[:, 1] - col) ** 2
        expected[row, col] = np.sqrt(float(squared.min())) * RES
    assert np.array_equal(dist, expected)
    assert (dist[cells != Cell.FREE] == 0.0).all()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_frontiers_match_exhaustive_scan(seed: int) -> None:
    """Test every FREE cell with an UNKNOWN 4-neighbor is found and 8-adjacent frontier cells share a cluster."""
    rng = np.random.default_rng(seed)
    cells = rng.choice([Cell.UNKNOWN, Cell.FREE, Cell.OCCUPIED], size=(12, 12), p=[0.3, 0.5, 0.2]).astype(np.int8)
    frontiers = extract_frontiers(OccupancyGrid(resolution=RES, cells=cells))

    expected = set()
    for row in range(12):
        for col in range(12):
            neighbors = [(row - 1, col), (row + 1, col), (row, col - 1), (row, col + 1)]
            touches = any(0 <= r < 12 and 0 <= c < 12 and cells[r, c] == Cell.UNKNOWN for r, c in neighbors)
            if cells[row, col] == Cell.FREE and touches:
                expected.add((row, col))
    found = {(int(r), int(c)) for r, c in frontiers.cells}
    assert found == expected
    assert len(found) == len(frontiers.cells)

    label_of = {(int(r), int(c)): int(k) for (r, c), k in zip(frontiers.cells, frontiers.labels)}
    for (row, col), label in label_of.items():
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if (row + dr, col + dc) in label_of:
                    assert label_of[(row + dr, col + dc)] == label


def test_frontier_single_cell() -> None:
    """Test one FREE cell surrounded by UNKNOWN is a one-cell cluster centered on that cell."""
    cells = np.full((5, 5), Cell.UNKNOWN, dtype=np.int8)
    cells[2, 3] = Cell.FREE
    grid = OccupancyGrid(resolution=RES, cells=cells)
    frontiers = extract_frontiers(grid)
    assert frontiers.cells.tolist() == [[2, 3]]
    assert len(frontiers.clusters) == 1
    assert frontiers.centroids[0] == pytest.approx(grid.center(2, 3))


def test_frontier_centroid_is_the_mean() -> None:
    """Test three collinear frontier cells have their centroid on the middle one."""
    cells = np.full((3, 3), Cell.UNKNOWN, dtype=np.int8)
    cells[0, :] = Cell.FREE
    frontiers = extract_frontiers(OccupancyGrid(resolution=RES, cells=cells))
    assert len(frontiers.centroids) == 1
    assert frontiers.centroids[0] == pytest.approx((0.375, 0.125))


def test_build_query_target_count() -> None:
    """Test targets are exactly the UNKNOWN cells within the prediction radius of the frontier centroid."""
    cells = np.full((80, 80), Cell.UNKNOWN, dtype=np.int8)
    cells[39:41, 39:41] = Cell.FREE
    belief = OccupancyGrid(resolution=RES, cells=cells)
    frontiers = extract_frontiers(belief)
    assert frontiers.centroids.tolist() == [[10.0, 10.0]]
    query = build_query(belief, belief.center(40, 40), frontiers, sensor_range=5.0, prediction_radius=7.5)

    count = 0
    for row in range(80):
        for col in range(80):
            x, y = (col + 0.5) * RES, (row + 0.5) * RES
            if cells[row, col] == Cell.UNKNOWN and math.hypot(x - 10.0, y - 10.0) <= 7.5:
                count += 1
    assert count > 2500
    assert len(query.targets) == count
    assert len(query.context) == 4

    no_frontiers = extract_frontiers(room())
    assert len(build_query(room(), (2.5, 2.5), no_frontiers, 5.0, 7.5).targets) == 0
