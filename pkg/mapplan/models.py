"""Module of pydantic models."""

import math
from enum import Enum, IntEnum

from pydantic import BaseModel, ConfigDict, Field, field_validator

RUNLOG_SCHEMA = "runlog v1"
STAGES = ("sense", "predict", "search", "smooth", "profile")


class Cell(IntEnum):
    """Occupancy codes stored in grid cells."""

    UNKNOWN = -1
    FREE = 0
    OCCUPIED = 1


class Strategy(str, Enum):
    """Planning strategies that can drive an episode."""

    CNP = "cnp"
    NAIVE = "naive"
    ORACLE_MAPS = "oracle_maps"
    NO_PREDICTION = "no_prediction"
    OPTIMAL = "optimal"


class ProfileMethod(str, Enum):
    """Speed profile solvers."""

    CONVEX = "convex"
    INTEGRATE = "integrate"


class MazeSpec(BaseModel):
    """Parameters of a generated maze; start and goal default to opposite lattice corners."""

    seed: int
    extent: float = Field(default=15.0, gt=0)
    hallway_width: float = Field(default=2.5, gt=0)
    resolution: float = Field(default=0.25, gt=0)
    start: tuple[float, float] | None = None
    goal: tuple[float, float] | None = None


class VehicleParams(BaseModel):
    """Friction-circle point mass with a turning radius limit."""

    m: float = Field(default=2.5, gt=0)
    mu: float = Field(default=0.9, gt=0)
    r_min: float = Field(default=0.5, gt=0)
    g: float = Field(default=9.81, gt=0)
    v_max: float = Field(default=4.0, gt=0)

    @property
    def friction_limit(self) -> float:
        """Largest total force the tyres can transmit, in newtons."""
        return self.mu * self.m * self.g

    @property
    def corner_speed(self) -> float:
        """Fastest speed through a minimum-radius turn."""
        return math.sqrt(self.mu * self.g * self.r_min)


class SimConfig(BaseModel):
    """Everything an episode needs besides the truth map and the predictor."""

    vehicle: VehicleParams = Field(default_factory=VehicleParams)
    sensor_range: float = Field(default=7.5, gt=0)
    prediction_radius: float = Field(default=5.0, gt=0)
    replan_period: float = Field(default=0.5, gt=0)
    sense_period: float = Field(default=0.1, gt=0)
    goal_radius: float = Field(default=0.5, gt=0)
    strategy: Strategy = Strategy.CNP
    alpha: float = Field(default=0.25, gt=0)
    epsilon: float = Field(default=1e-3, gt=0)
    n_beams: int = Field(default=720, ge=1)
    seed: int = 0
    rho_unknown: float = Field(default=0.5, gt=0)
    rho_min: float = Field(default=0.15, gt=0)
    rho_max: float = Field(default=1.0, gt=0)
    vehicle_clearance: float = Field(default=0.1, ge=0)
    resample_spacing: float = Field(default=0.1, gt=0)
    timeout_factor: float = Field(default=10.0, gt=0)
    inflation_cells: int = Field(default=1, ge=0)
    penalize_edges: bool = False
    full_belief_context: bool = False
    profile_method: ProfileMethod = ProfileMethod.CONVEX
    start: tuple[float, float] | None = None
    goal: tuple[float, float] | None = None


class TrainConfig(BaseModel):
    """Optimizer and sampling settings for CNP training."""

    iterations: int = Field(default=20_000, ge=1)
    batch_size: int = Field(default=4, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0)
    seed: int = 0
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_epsilon: float = Field(default=1e-8, gt=0)
    max_context: int | None = Field(default=512, ge=1)
    max_targets: int | None = Field(default=1024, ge=1)
    log_every: int = Field(default=1000, ge=1)


class NetworkConfig(BaseModel):
    """CNP architecture."""

    embed_dim: int = Field(default=256, ge=1)
    hidden: int = Field(default=256, ge=1)
    n_layers: int = Field(default=4, ge=2)


class ExperimentConfig(BaseModel):
    """A full evaluation sweep plus the training-data recipe."""

    n_mazes: int = Field(default=20, ge=1)
    maze_seed: int = 1000
    extent: float = Field(default=15.0, gt=0)
    hallway_width: float = Field(default=2.5, gt=0)
    resolution: float = Field(default=0.25, gt=0)
    strategies: list[Strategy] = Field(
        default_factory=lambda: [Strategy.CNP, Strategy.NAIVE, Strategy.ORACLE_MAPS, Strategy.OPTIMAL]
    )
    v_max_values: list[float] = Field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0])
    sensor_ranges: list[float] = Field(default_factory=lambda: [7.5])
    prediction_radii: list[float] = Field(default_factory=lambda: [5.0])
    weights: str | None = None
    out_dir: str = "results"
    seed: int = 0
    n_boot: int = Field(default=10_000, ge=1)
    workers: int = Field(default=1, ge=1)
    train_mazes: int = Field(default=10, ge=1)
    train_maze_seed: int = 0
    samples_per_map: int = Field(default=64, ge=1)
    dataset_sensor_range: float = Field(default=5.0, gt=0)
    dataset_prediction_radius: float = Field(default=7.5, gt=0)

    @field_validator("strategies", "v_max_values", "sensor_ranges", "prediction_radii")
    @classmethod
    def _non_empty(cls, value: list) -> list:
        if not value:
            raise ValueError("sweep axes must not be empty")
        return value

    @field_validator("v_max_values", "sensor_ranges", "prediction_radii")
    @classmethod
    def _positive(cls, value: list[float]) -> list[float]:
        if any(v <= 0 for v in value):
            raise ValueError(f"all values must be positive, got {value}")
        return value


class IterationRecord(BaseModel):
    """Wall-clock seconds spent in each stage of one planning iteration."""

    clock: float
    sense: float = 0.0
    predict: float = 0.0
    search: float = 0.0
    smooth: float = 0.0
    profile: float = 0.0
    total: float = 0.0
    fallback: bool = False
    n_context: int = 0
    n_targets: int = 0


class ExecutedSample(BaseModel):
    """One executed state."""

    t: float
    x: float
    y: float
    vx: float
    vy: float


class SafetyAudit(BaseModel):
    """Counters that must stay at zero, plus the clearance actually kept."""

    collision_samples: int = 0
    unknown_samples: int = 0
    dynamics_violations: int = 0
    min_clearance: float | None = None
    terminal_speeds: list[float] = Field(default_factory=list)

    @property
    def safe(self) -> bool:
        """Return if nothing unsafe was executed."""
        return (
            self.collision_samples == 0
            and self.unknown_samples == 0
            and self.dynamics_violations == 0
            and all(abs(v) <= 1e-6 for v in self.terminal_speeds)
        )


class RunLog(BaseModel):
    """Record of one episode."""

    schema_version: str = Field(default=RUNLOG_SCHEMA, alias="schema")
    maze: str
    maze_seed: int
    strategy: Strategy
    v_max: float
    sensor_range: float
    prediction_radius: float
    t_opt: float
    completion_time: float | None = None
    iterations: list[IterationRecord] = Field(default_factory=list)
    samples: list[ExecutedSample] = Field(default_factory=list)
    audit: SafetyAudit = Field(default_factory=SafetyAudit)

    model_config = ConfigDict(populate_by_name=True)

    @property
    def succeeded(self) -> bool:
        """Return if the goal was reached before the timeout."""
        return self.completion_time is not None

    @property
    def iteration_count(self) -> int:
        """Number of planning iterations."""
        return len(self.iterations)


class SummaryRow(BaseModel):
    """Aggregate of all episodes sharing a strategy, speed cap and range pair."""

    strategy: str
    v_max: float
    sensor_range: float
    prediction_radius: float
    n: int
    failures: int
    mean_rel: float
    ci_low: float
    ci_high: float


class TimingRow(BaseModel):
    """Mean wall-clock seconds per planning stage over all iterations of a summary cell."""

    strategy: str
    v_max: float
    sensor_range: float
    prediction_radius: float
    sense: float
    predict: float
    search: float
    smooth: float
    profile: float
