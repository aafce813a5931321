"""Exception types shared across the calibration pipeline."""

from __future__ import annotations


class CalibrationError(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidArgumentError(CalibrationError, ValueError):
    """Raised when a geometric primitive receives malformed input."""


class DomainError(CalibrationError, ValueError):
    """Raised when a spline is queried outside its valid time interval."""

    def __init__(self, message: str, t_min: float, t_max: float) -> None:
        super().__init__(f"{message}; valid interval is [{t_min:.6f}, {t_max:.6f}]")
        self.t_min = t_min
        self.t_max = t_max


class ConfigError(CalibrationError, ValueError):
    """Raised when a run configuration fails validation."""


class DatasetError(CalibrationError):
    """Raised when dataset files are missing or malformed."""


class DegenerateRotationError(CalibrationError):
    """Raised when paired rotations do not constrain the extrinsic rotation."""


class InsufficientDataError(CalibrationError):
    """Raised when a solve has fewer constraints than unknowns."""


class NonFiniteResidualError(CalibrationError):
    """Raised when a residual or Jacobian entry is not finite."""

    def __init__(self, kind: str, row: int) -> None:
        super().__init__(f"non-finite value in {kind} residual block at row {row}")
        self.kind = kind
        self.row = row


class ConvergenceError(CalibrationError):
    """Raised when Levenberg damping grows past its bound without progress."""


class PipelineError(CalibrationError):
    """Raised when a pipeline stage fails; carries the stage name."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage
