"""A* search from robot to goal through known and unknown space."""

import heapq
import logging
import math

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from mapplan.exceptions import InfeasiblePlanError, InvalidPoseError
from mapplan.models import Cell
from mapplan.worldmap import OccupancyGrid, QuerySet

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)

# (row step, col step, length in cells)
MOVES = [
    (-1, -1, SQRT2),
    (-1, 0, 1.0),
    (-1, 1, SQRT2),
    (0, -1, 1.0),
    (0, 1, 1.0),
    (1, -1, SQRT2),
    (1, 0, 1.0),
    (1, 1, SQRT2),
]


def heuristic_multiplier(phi: float | NDArray, alpha: float, epsilon: float) -> float | NDArray:
    """Scale applied to the Euclidean heuristic in unknown space.

    Args:
        phi: predicted occupancy probability, scalar or array, in [0, 1].
        alpha: penalty scale.
        epsilon: keeps the factor finite at phi = 1.

    Returns:
        alpha / (1 - phi + epsilon)
    """
    phi_array = np.asarray(phi, dtype=float)
    if (phi_array < 0).any() or (phi_array > 1).any():
        raise ValueError("phi must lie in [0, 1]")
    return alpha / (1.0 - phi + epsilon)


class CostField(BaseModel):
    """Predicted occupancy of the grid's cells; cells without a prediction hold 0.

    Args:
        phi: (height, width) occupancy probabilities.
        alpha: penalty scale.
        epsilon: small positive constant.
        penalize_edges: also scale traversal costs into unknown cells.
        resolution: meters per cell, for sampling at world points.
        origin: grid origin, for sampling at world points.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    phi: np.ndarray
    alpha: float = Field(default=0.25, gt=0)
    epsilon: float = Field(default=1e-3, gt=0)
    penalize_edges: bool = False
    resolution: float = Field(default=1.0, gt=0)
    origin: tuple[float, float] = (0.0, 0.0)

    @field_validator("phi")
    @classmethod
    def _probabilities(cls, value: NDArray) -> NDArray:
        phi = np.asarray(value, dtype=float)
        if phi.ndim != 2 or not ((phi >= 0) & (phi <= 1)).all():
            raise ValueError("phi must be a 2D array of probabilities")
        return phi

    @classmethod
    def zeros(
        cls, belief: OccupancyGrid, alpha: float = 0.25, epsilon: float = 1e-3, penalize_edges: bool = False
    ) -> "CostField":
        """Optimistic field: nothing predicted anywhere."""
        return cls(
            phi=np.zeros(belief.cells.shape),
            alpha=alpha,
            epsilon=epsilon,
            penalize_edges=penalize_edges,
            resolution=belief.resolution,
            origin=belief.origin,
        )

    @classmethod
    def from_predictions(
        cls,
        belief: OccupancyGrid,
        query: QuerySet,
        phi: NDArray,
        alpha: float = 0.25,
        epsilon: float = 1e-3,
        penalize_edges: bool = False,
    ) -> "CostField":
        """Scatter per-target predictions onto the grid."""
        field = cls.zeros(belief, alpha, epsilon, penalize_edges)
        if len(phi) != len(query.target_cells):
            raise ValueError(f"{len(phi)} predictions for {len(query.target_cells)} targets")
        if len(phi):
            field.phi[query.target_cells[:, 0], query.target_cells[:, 1]] = np.clip(phi, 0.0, 1.0)
        return field

    def multipliers(self) -> NDArray:
        """Heuristic multiplier of every cell."""
        return np.asarray(heuristic_multiplier(self.phi, self.alpha, self.epsilon))

    def phi_at(self, points: NDArray) -> NDArray:
        """Bilinear sample of phi at world points; 0 off the grid."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        cols = (points[:, 0] - self.origin[0]) / self.resolution - 0.5
        rows = (points[:, 1] - self.origin[1]) / self.resolution - 0.5
        values = ndimage.map_coordinates(self.phi, [rows, cols], order=1, mode="nearest")
        height, width = self.phi.shape
        inside = (rows >= -0.5) & (rows <= height - 0.5) & (cols >= -0.5) & (cols <= width - 0.5)
        return np.where(inside, values, 0.0)


class ReferencePath(BaseModel):
    """Cell-center waypoints from start to goal.

    Args:
        waypoints: (n, 2) world coordinates.
        cells: (n, 2) grid indices; consecutive cells are 8-adjacent.
        frontier_index: index of the first UNKNOWN waypoint, or None.
        resolution: meters per cell.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    waypoints: np.ndarray
    cells: np.ndarray
    frontier_index: int | None = None
    resolution: float = 1.0

    @property
    def cost(self) -> float:
        """Geometric length: resolution per axis step, sqrt(2) resolution per diagonal step."""
        steps = np.abs(np.diff(self.cells, axis=0)).sum(axis=1)
        return float(np.where(steps == 2, SQRT2, 1.0).sum() * self.resolution)


def inflate_obstacles(belief: OccupancyGrid, cells: int, keep_clear: list[tuple[int, int]]) -> NDArray:
    """Dilate OCCUPIED cells by `cells`, leaving the neighbourhoods of `keep_clear` uninflated."""
    occupied = belief.cells == Cell.OCCUPIED
    if cells <= 0:
        return occupied
    blocked = ndimage.binary_dilation(occupied, structure=np.ones((3, 3), dtype=bool), iterations=cells)
    for row, col in keep_clear:
        window = (slice(max(row - cells, 0), row + cells + 1), slice(max(col - cells, 0), col + cells + 1))
        blocked[window] = occupied[window]
    return blocked


def astar_plan(
    belief: OccupancyGrid,
    field: CostField,
    start: NDArray | tuple[float, float],
    goal: NDArray | tuple[float, float],
    inflation_cells: int = 1,
) -> ReferencePath:
    """Search an 8-connected grid where OCCUPIED cells block and UNKNOWN cells are passable.

    FREE cells use the Euclidean heuristic; UNKNOWN cells scale it by `heuristic_multiplier` of their
    predicted occupancy. Nodes are reopened when a cheaper route appears, so a heuristic that is admissible
    but inconsistent still yields the cheapest path.

    Args:
        belief: current belief grid.
        field: predicted occupancy and penalty settings.
        start: world start, inside a FREE cell.
        goal: world goal, inside the grid.
        inflation_cells: cells of obstacle inflation.

    Returns:
        the reference path
    """
    width = belief.width
    start_cell = belief.cell_of(start)
    goal_cell = belief.cell_of(goal)
    if not belief.in_bounds(*start_cell) or belief.cells[start_cell] != Cell.FREE:
        raise InvalidPoseError(f"Start {tuple(start)} is not in a FREE cell")
    if not belief.in_bounds(*goal_cell):
        raise ValueError(f"Goal {tuple(goal)} is outside the grid")

    blocked_grid = inflate_obstacles(belief, inflation_cells, [start_cell, goal_cell])
    if blocked_grid[goal_cell]:
        raise InfeasiblePlanError(f"Goal {tuple(goal)} is occupied")

    unknown = belief.cells == Cell.UNKNOWN
    multipliers = np.where(unknown, field.multipliers(), 1.0)
    centers = belief.cell_centers()
    heuristic = (np.linalg.norm(centers - belief.center(*goal_cell), axis=-1) * multipliers).ravel().tolist()
    edge_scale = (multipliers if field.penalize_edges else np.ones_like(multipliers)).ravel().tolist()
    blocked = blocked_grid.ravel().tolist()

    source = start_cell[0] * width + start_cell[1]
    target = goal_cell[0] * width + goal_cell[1]
    cost = [math.inf] * len(blocked)
    parent = [-1] * len(blocked)
    cost[source] = 0.0
    frontier = [(heuristic[source], heuristic[source], source)]
    res = belief.resolution

    while frontier:
        f, h, node = heapq.heappop(frontier)
        if node == target:
            break
        g = cost[node]
        if f > g + h:
            continue
        row, col = divmod(node, width)
        for dr, dc, length in MOVES:
            nr, nc = row + dr, col + dc
            if not (0 <= nr < belief.height and 0 <= nc < width):
                continue
            neighbour = nr * width + nc
            if blocked[neighbour]:
                continue
            if dr and dc and blocked[row * width + nc] and blocked[nr * width + col]:
                continue
            candidate = g + length * res * edge_scale[neighbour]
            if candidate < cost[neighbour]:
                cost[neighbour] = candidate
                parent[neighbour] = node
                heapq.heappush(frontier, (candidate + heuristic[neighbour], heuristic[neighbour], neighbour))
    else:
        raise InfeasiblePlanError(f"No path from {tuple(start)} to {tuple(goal)}")

    nodes = [target]
    while nodes[-1] != source:
        nodes.append(parent[nodes[-1]])
    nodes.reverse()
    cells = np.array([divmod(n, width) for n in nodes], dtype=int).reshape(-1, 2)
    unknown_steps = np.flatnonzero(unknown[cells[:, 0], cells[:, 1]])
    frontier_index = int(unknown_steps[0]) if len(unknown_steps) else None
    return ReferencePath(
        waypoints=centers[cells[:, 0], cells[:, 1]],
        cells=cells,
        frontier_index=frontier_index,
        resolution=res,
    )
