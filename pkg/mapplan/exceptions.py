"""Exceptions raised across the planning stack."""

from typing import Any


class ConfigurationError(ValueError):
    """A configuration value is inconsistent with the others."""


class InvalidPoseError(ValueError):
    """A pose lies somewhere the robot cannot be."""


class ModelError(ValueError):
    """CNP parameters or files do not fit together."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    Args:
        message: Human readable description.
        diagnostics: Iteration, loss and parameter norms at the point of failure.
    """

    def __init__(self, message: str, diagnostics: dict[str, Any]) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics


class PlanningError(RuntimeError):
    """Base class for failures of one planning iteration.

    The simulation loop catches these and falls back to the previous known segment.
    """

    def __init__(self, message: str, timings: dict[str, float] | None = None) -> None:
        super().__init__(message)
        self.timings: dict[str, float] = dict(timings or {})


class InfeasiblePlanError(PlanningError):
    """No path, profile or validated trajectory exists."""


class DegenerateTubeError(PlanningError):
    """A known waypoint sits closer to an obstacle than the vehicle clearance."""


class SmoothingError(PlanningError):
    """The smoothing solver did not converge."""
