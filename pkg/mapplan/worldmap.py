"""Occupancy grids: maze generation, lidar sensing, frontiers, distance fields and CNP queries."""

import logging
import math

import numpy as np
import toml
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import ndimage

from mapplan.exceptions import ConfigurationError, InvalidPoseError
from mapplan.models import Cell, MazeSpec

logger = logging.getLogger(__name__)

GRID_MAGIC = "gridmap v1"
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

# indexed by cell code + 1
_GRID_CHARS = np.array(["?", ".", "#"])
_CHAR_CODES = {"?": Cell.UNKNOWN, ".": Cell.FREE, "#": Cell.OCCUPIED}


class OccupancyGrid(BaseModel):
    """A 2D grid of occupancy codes; `cells[row, col]` with rows along y and columns along x.

    Args:
        resolution: meters per cell.
        origin: world coordinates of the outer corner of cell (0, 0).
        cells: int8 array of `Cell` codes.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    cells: np.ndarray

    @field_validator("resolution")
    @classmethod
    def _positive_resolution(cls, value: float) -> float:
        if not value > 0:
            raise ValueError(f"resolution must be positive, got {value}")
        return value

    @field_validator("cells")
    @classmethod
    def _valid_cells(cls, value: NDArray) -> NDArray:
        cells = np.asarray(value)
        if cells.ndim != 2 or cells.size == 0:
            raise ValueError(f"cells must be a non-empty 2D array, got shape {cells.shape}")
        if not np.isin(cells, (Cell.UNKNOWN, Cell.FREE, Cell.OCCUPIED)).all():
            raise ValueError("cells hold values outside of the occupancy codes")
        return cells.astype(np.int8)

    @classmethod
    def unknown(
        cls, height: int, width: int, resolution: float, origin: tuple[float, float] = (0.0, 0.0)
    ) -> "OccupancyGrid":
        """Make a belief grid before any observation."""
        return cls(resolution=resolution, origin=origin, cells=np.full((height, width), Cell.UNKNOWN, dtype=np.int8))

    @classmethod
    def unknown_like(cls, other: "OccupancyGrid") -> "OccupancyGrid":
        """Make an all-UNKNOWN belief with the geometry of `other`."""
        return cls.unknown(other.height, other.width, other.resolution, other.origin)

    @property
    def height(self) -> int:
        """Number of rows."""
        return int(self.cells.shape[0])

    @property
    def width(self) -> int:
        """Number of columns."""
        return int(self.cells.shape[1])

    def copy_grid(self) -> "OccupancyGrid":
        """Return an independent copy."""
        return OccupancyGrid(resolution=self.resolution, origin=self.origin, cells=self.cells.copy())

    def same_geometry(self, other: "OccupancyGrid") -> bool:
        """Return if both grids cover the same cells."""
        return (
            self.cells.shape == other.cells.shape
            and math.isclose(self.resolution, other.resolution)
            and np.allclose(self.origin, other.origin)
        )

    def cell_of(self, point: NDArray | tuple[float, float]) -> tuple[int, int]:
        """Return the (row, col) index containing a world point; may be out of bounds."""
        x, y = float(point[0]), float(point[1])
        col = math.floor((x - self.origin[0]) / self.resolution)
        row = math.floor((y - self.origin[1]) / self.resolution)
        return row, col

    def in_bounds(self, row: int, col: int) -> bool:
        """Return if the index lies on the grid."""
        return 0 <= row < self.height and 0 <= col < self.width

    def center(self, row: int, col: int) -> NDArray:
        """World coordinates of a cell center."""
        return np.array(
            [self.origin[0] + (col + 0.5) * self.resolution, self.origin[1] + (row + 0.5) * self.resolution]
        )

    def cell_centers(self) -> NDArray:
        """World coordinates of every cell center, shape (height, width, 2)."""
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        grid_x, grid_y = np.meshgrid(xs, ys)
        return np.stack([grid_x, grid_y], axis=-1)

    def states_at(self, points: NDArray) -> NDArray:
        """Cell codes under world points; points off the grid read as OCCUPIED."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        cols = np.floor((points[:, 0] - self.origin[0]) / self.resolution).astype(int)
        rows = np.floor((points[:, 1] - self.origin[1]) / self.resolution).astype(int)
        inside = (rows >= 0) & (rows < self.height) & (cols >= 0) & (cols < self.width)
        states = np.full(len(points), Cell.OCCUPIED, dtype=np.int8)
        states[inside] = self.cells[rows[inside], cols[inside]]
        return states


class FrontierSet(BaseModel):
    """FREE cells 4-adjacent to UNKNOWN space, grouped into 8-connected clusters.

    Args:
        cells: (n, 2) array of (row, col) indices in row-major order.
        labels: cluster index of every cell.
        centroids: (k, 2) mean world position of each cluster.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    cells: np.ndarray
    labels: np.ndarray
    centroids: np.ndarray

    @property
    def clusters(self) -> list[NDArray]:
        """Indices into `cells` for each cluster."""
        return [np.flatnonzero(self.labels == k) for k in range(len(self.centroids))]

    @property
    def empty(self) -> bool:
        """Return if there is no frontier."""
        return len(self.cells) == 0


class QuerySet(BaseModel):
    """Context and target coordinates relative to `frame_origin`, plus the grid cells they came from.

    Args:
        context: (c, 3) rows of relative x, relative y, occupancy in {0, 1}.
        targets: (t, 2) relative coordinates to predict.
        frame_origin: robot world position the coordinates are relative to.
        context_cells: (c, 2) grid indices of the context rows.
        target_cells: (t, 2) grid indices of the target rows.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    context: np.ndarray
    targets: np.ndarray
    frame_origin: np.ndarray
    context_cells: np.ndarray
    target_cells: np.ndarray


def _check_multiple(value: float, unit: float) -> int:
    count = round(value / unit)
    if count < 1 or not math.isclose(count * unit, value, rel_tol=1e-9, abs_tol=1e-12):
        raise ConfigurationError(f"{value} is not an integer multiple of {unit}")
    return count


def maze_layout(spec: MazeSpec) -> tuple[int, int]:
    """Return the number of lattice cells per side and the hallway width in grid cells.

    Args:
        spec: maze parameters.

    Returns:
        lattice size k and hallway cells h; the grid side is k * (h + 1) + 1 cells.
    """
    if not spec.extent > spec.hallway_width:
        raise ConfigurationError(f"extent {spec.extent} must exceed hallway width {spec.hallway_width}")
    lattice = _check_multiple(spec.extent, spec.hallway_width)
    hallway_cells = _check_multiple(spec.hallway_width, spec.resolution)
    return lattice, hallway_cells


def lattice_center(spec: MazeSpec, i: int, j: int) -> tuple[float, float]:
    """World position of the grid cell nearest the middle of lattice cell (i, j), row i and column j."""
    _, h = maze_layout(spec)
    offset = h // 2 + 0.5
    return ((1 + j * (h + 1) + offset) * spec.resolution, (1 + i * (h + 1) + offset) * spec.resolution)


def maze_endpoints(spec: MazeSpec) -> tuple[tuple[float, float], tuple[float, float]]:
    """Resolve start and goal, defaulting to opposite corners of the lattice."""
    lattice, _ = maze_layout(spec)
    start = spec.start if spec.start is not None else lattice_center(spec, 0, 0)
    goal = spec.goal if spec.goal is not None else lattice_center(spec, lattice - 1, lattice - 1)
    return start, goal


def generate_maze(spec: MazeSpec) -> OccupancyGrid:
    """Generate a perfect maze with a seeded recursive backtracker.

    Lattice cells are `hallway_width` wide and walls are one grid cell thick.

    Args:
        spec: maze parameters.

    Returns:
        ground-truth grid holding only FREE and OCCUPIED cells.
    """
    lattice, h = maze_layout(spec)
    side = lattice * (h + 1) + 1
    cells = np.full((side, side), Cell.OCCUPIED, dtype=np.int8)

    for i in range(lattice):
        for j in range(lattice):
            r0, c0 = 1 + i * (h + 1), 1 + j * (h + 1)
            cells[r0 : r0 + h, c0 : c0 + h] = Cell.FREE

    rng = np.random.default_rng(spec.seed)
    visited = np.zeros((lattice, lattice), dtype=bool)
    visited[0, 0] = True
    stack = [(0, 0)]
    while stack:
        i, j = stack[-1]
        options = [
            (i + di, j + dj)
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
            if 0 <= i + di < lattice and 0 <= j + dj < lattice and not visited[i + di, j + dj]
        ]
        if not options:
            stack.pop()
            continue
        ni, nj = options[int(rng.integers(len(options)))]
        if ni != i:
            wall_row = max(i, ni) * (h + 1)
            c0 = 1 + j * (h + 1)
            cells[wall_row, c0 : c0 + h] = Cell.FREE
        else:
            wall_col = max(j, nj) * (h + 1)
            r0 = 1 + i * (h + 1)
            cells[r0 : r0 + h, wall_col] = Cell.FREE
        visited[ni, nj] = True
        stack.append((ni, nj))

    grid = OccupancyGrid(resolution=spec.resolution, origin=(0.0, 0.0), cells=cells)
    for name, point in zip(("start", "goal"), maze_endpoints(spec)):
        row, col = grid.cell_of(point)
        if not grid.in_bounds(row, col) or grid.cells[row, col] != Cell.FREE:
            raise ConfigurationError(f"Maze {name} {point} is not in free space")
    logger.info(f"Generated maze seed={spec.seed} with {lattice}x{lattice} lattice, {side}x{side} cells")
    return grid


def dump_maze_spec(spec: MazeSpec) -> str:
    """Serialize a maze spec as key-value text."""
    return toml.dumps(spec.model_dump(exclude_none=True))


def load_maze_spec(text: str) -> MazeSpec:
    """Parse key-value text written by `dump_maze_spec`."""
    data = toml.loads(text)
    for key in ("start", "goal"):
        if key in data:
            data[key] = tuple(data[key])
    return MazeSpec(**data)


def _segments_blocked(pose: NDArray, points: NDArray, truth: OccupancyGrid, reach: float) -> NDArray:
    """Return, per point, if the open segment from `pose` crosses the interior of an OCCUPIED truth cell."""
    centers = truth.cell_centers()
    occupied = truth.cells == Cell.OCCUPIED
    near = occupied & (np.linalg.norm(centers - pose, axis=-1) <= reach + truth.resolution)
    boxes = centers[near]
    blocked = np.zeros(len(points), dtype=bool)
    if len(boxes) == 0 or len(points) == 0:
        return blocked

    half = 0.5 * truth.resolution * (1.0 - 1e-9)
    lo, hi = boxes - half, boxes + half
    deltas = points - pose

    def slab(p: float, d: NDArray, low: NDArray, high: NDArray) -> tuple[NDArray, NDArray]:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (low[None, :] - p) / d[:, None]
            t2 = (high[None, :] - p) / d[:, None]
        t_in, t_out = np.minimum(t1, t2), np.maximum(t1, t2)
        flat = (d == 0)[:, None]
        inside = ((low < p) & (p < high))[None, :]
        t_in = np.where(flat, np.where(inside, -np.inf, np.inf), t_in)
        t_out = np.where(flat, np.where(inside, np.inf, -np.inf), t_out)
        return t_in, t_out

    for start in range(0, len(points), 256):
        chunk = slice(start, start + 256)
        x_in, x_out = slab(pose[0], deltas[chunk, 0], lo[:, 0], hi[:, 0])
        y_in, y_out = slab(pose[1], deltas[chunk, 1], lo[:, 1], hi[:, 1])
        enter, leave = np.maximum(x_in, y_in), np.minimum(x_out, y_out)
        blocked[chunk] = ((enter < leave) & (leave > 0) & (enter < 1)).any(axis=1)
    return blocked


def simulate_lidar(
    truth: OccupancyGrid,
    belief: OccupancyGrid,
    pose: NDArray | tuple[float, float],
    sensor_range: float,
    n_beams: int = 720,
) -> OccupancyGrid:
    """Ray-march `n_beams` equally spaced beams and record what they see in `belief`.

    Cells a beam crosses before its first OCCUPIED cell become FREE when their center is within range and has
    a clear line of sight; the first OCCUPIED cell of each beam becomes OCCUPIED when hit within range.

    Args:
        truth: ground-truth grid.
        belief: belief grid updated in place.
        pose: sensor position in world coordinates.
        sensor_range: maximum range in meters.
        n_beams: number of beams.

    Returns:
        the updated belief
    """
    if not truth.same_geometry(belief):
        raise ValueError("truth and belief grids differ in geometry")
    pose = np.asarray(pose, dtype=float)
    row, col = truth.cell_of(pose)
    if not truth.in_bounds(row, col) or truth.cells[row, col] == Cell.OCCUPIED:
        raise InvalidPoseError(f"Pose {pose.tolist()} is not in free space")

    res = truth.resolution
    steps = np.arange(0.0, sensor_range + 1e-9, 0.5 * res)
    angles = 2.0 * np.pi * np.arange(n_beams) / n_beams
    xs = pose[0] + np.cos(angles)[:, None] * steps[None, :]
    ys = pose[1] + np.sin(angles)[:, None] * steps[None, :]
    cols = np.floor((xs - truth.origin[0]) / res).astype(int)
    rows = np.floor((ys - truth.origin[1]) / res).astype(int)
    inside = (rows >= 0) & (rows < truth.height) & (cols >= 0) & (cols < truth.width)
    rows, cols = np.clip(rows, 0, truth.height - 1), np.clip(cols, 0, truth.width - 1)
    blocking = (truth.cells[rows, cols] == Cell.OCCUPIED) | ~inside

    n_steps = len(steps)
    first = np.where(blocking.any(axis=1), blocking.argmax(axis=1), n_steps)
    traversed = np.arange(n_steps)[None, :] < first[:, None]

    flat = np.unique(rows[traversed] * truth.width + cols[traversed])
    free_rows, free_cols = np.divmod(flat, truth.width)
    centers = truth.cell_centers()[free_rows, free_cols]
    within = np.linalg.norm(centers - pose, axis=1) <= sensor_range
    free_rows, free_cols, centers = free_rows[within], free_cols[within], centers[within]
    visible = ~_segments_blocked(pose, centers, truth, sensor_range)
    belief.cells[free_rows[visible], free_cols[visible]] = Cell.FREE

    beams = np.flatnonzero(first < n_steps)
    hit_rows, hit_cols = rows[beams, first[beams]], cols[beams, first[beams]]
    hit = inside[beams, first[beams]]
    belief.cells[hit_rows[hit], hit_cols[hit]] = Cell.OCCUPIED
    return belief


def extract_frontiers(belief: OccupancyGrid) -> FrontierSet:
    """Find FREE cells 4-adjacent to UNKNOWN cells and cluster them with 8-connectivity."""
    unknown = belief.cells == Cell.UNKNOWN
    touches = np.zeros_like(unknown)
    touches[1:, :] |= unknown[:-1, :]
    touches[:-1, :] |= unknown[1:, :]
    touches[:, 1:] |= unknown[:, :-1]
    touches[:, :-1] |= unknown[:, 1:]
    mask = (belief.cells == Cell.FREE) & touches

    labelled, n_clusters = ndimage.label(mask, structure=EIGHT_CONNECTED)
    rows, cols = np.nonzero(mask)
    labels = labelled[rows, cols] - 1
    centers = belief.cell_centers()[rows, cols]
    counts = np.bincount(labels, minlength=n_clusters)
    if n_clusters:
        centroids = np.stack(
            [
                np.bincount(labels, weights=centers[:, 0], minlength=n_clusters) / counts,
                np.bincount(labels, weights=centers[:, 1], minlength=n_clusters) / counts,
            ],
            axis=1,
        )
    else:
        centroids = np.zeros((0, 2))
    return FrontierSet(cells=np.stack([rows, cols], axis=1), labels=labels, centroids=centroids)


def distance_field(belief: OccupancyGrid) -> NDArray:
    """Center-to-center distance in meters from each FREE cell to the nearest non-FREE cell.

    Non-FREE cells map to 0; a grid without any non-FREE cell maps to infinity everywhere.
    """
    free = belief.cells == Cell.FREE
    if free.all():
        return np.full(free.shape, np.inf)
    return ndimage.distance_transform_edt(free) * belief.resolution


def clearance_field(belief: OccupancyGrid) -> NDArray:
    """Radius of a disc about each FREE cell center guaranteed to miss every non-FREE cell square."""
    dist = distance_field(belief)
    return np.where(dist > 0, np.maximum(dist - belief.resolution * math.sqrt(0.5), 0.0), 0.0)


def build_query(
    belief: OccupancyGrid,
    robot_pose: NDArray | tuple[float, float],
    frontiers: FrontierSet,
    sensor_range: float,
    prediction_radius: float,
    full_context: bool = False,
) -> QuerySet:
    """Collect observed cells as context and UNKNOWN cells near frontier centroids as targets.

    Args:
        belief: current belief grid.
        robot_pose: frame origin for the relative coordinates.
        frontiers: frontiers of `belief`.
        sensor_range: context radius about the robot.
        prediction_radius: target radius about each frontier centroid.
        full_context: use every observed cell as context regardless of range.
    """
    pose = np.asarray(robot_pose, dtype=float)
    row, col = belief.cell_of(pose)
    if not belief.in_bounds(row, col) or belief.cells[row, col] != Cell.FREE:
        raise InvalidPoseError(f"Robot pose {pose.tolist()} is not in a FREE belief cell")

    centers = belief.cell_centers()
    observed = belief.cells != Cell.UNKNOWN
    if not full_context:
        observed &= np.linalg.norm(centers - pose, axis=-1) <= sensor_range
    ctx_rows, ctx_cols = np.nonzero(observed)
    context = np.column_stack(
        [centers[ctx_rows, ctx_cols] - pose, (belief.cells[ctx_rows, ctx_cols] == Cell.OCCUPIED).astype(float)]
    )

    near = np.zeros(belief.cells.shape, dtype=bool)
    for centroid in frontiers.centroids:
        near |= np.linalg.norm(centers - centroid, axis=-1) <= prediction_radius
    tgt_rows, tgt_cols = np.nonzero(near & (belief.cells == Cell.UNKNOWN))

    return QuerySet(
        context=context.reshape(-1, 3),
        targets=(centers[tgt_rows, tgt_cols] - pose).reshape(-1, 2),
        frame_origin=pose,
        context_cells=np.stack([ctx_rows, ctx_cols], axis=1),
        target_cells=np.stack([tgt_rows, tgt_cols], axis=1),
    )


def sample_free_poses(truth: OccupancyGrid, count: int, rng: np.random.Generator) -> NDArray:
    """Draw cell centers of FREE cells, without replacement when there are enough of them."""
    rows, cols = np.nonzero(truth.cells == Cell.FREE)
    if len(rows) == 0:
        raise ValueError("map has no free cells")
    picks = rng.choice(len(rows), size=count, replace=count > len(rows))
    return truth.cell_centers()[rows[picks], cols[picks]]


def dumps_grid(grid: OccupancyGrid) -> str:
    """Serialize a grid; rows are written in index order, row 0 first."""
    header = f"{GRID_MAGIC} {grid.width} {grid.height} {grid.resolution!r} {grid.origin[0]!r} {grid.origin[1]!r}"
    rows = ["".join(line) for line in _GRID_CHARS[grid.cells.astype(int) + 1]]
    return "\n".join([header, *rows]) + "\n"


def loads_grid(text: str) -> OccupancyGrid:
    """Parse a grid written by `dumps_grid`."""
    lines = text.split("\n")
    header = lines[0].split()
    if " ".join(header[:2]) != GRID_MAGIC or len(header) != 7:
        raise ValueError(f"Not a grid file header: {lines[0]!r}")
    width, height = int(header[2]), int(header[3])
    resolution, ox, oy = float(header[4]), float(header[5]), float(header[6])
    rows = lines[1 : 1 + height]
    if len(rows) != height or any(len(row) != width for row in rows):
        raise ValueError(f"Grid body does not match {width}x{height}")
    try:
        cells = np.array([[_CHAR_CODES[ch] for ch in row] for row in rows], dtype=np.int8)
    except KeyError as err:
        raise ValueError(f"Unexpected grid character {err}") from err
    return OccupancyGrid(resolution=resolution, origin=(ox, oy), cells=cells)


def save_grid(grid: OccupancyGrid, path: str) -> None:
    """Write a grid file."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_grid(grid))


def load_grid(path: str) -> OccupancyGrid:
    """Read a grid file."""
    with open(path, "r", encoding="utf-8") as f:
        return loads_grid(f.read())
