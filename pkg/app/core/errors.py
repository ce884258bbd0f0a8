from __future__ import annotations


class SimulationError(Exception):
    """Base error with a stable machine-readable code."""

    code = "simulation-error"

    def __init__(self, message: str, code: str | None = None):
        self.message = message
        if code is not None:
            self.code = code
        super().__init__(message)


# ==================== grid_field ====================


class GridError(SimulationError):
    code = "invalid-grid"


class InvalidDimensionError(GridError):
    code = "invalid-dimension"


class NonPowerOfTwoError(GridError):
    code = "non-power-of-two"


class FieldNotLocalizedError(SimulationError):
    code = "field-not-localized"


# ==================== noise ====================


class EmptyTimeGridError(SimulationError):
    code = "empty-time-grid"


class OffGridTimeError(SimulationError):
    code = "off-grid-time"


# ==================== ground_state ====================


class ShootingBracketError(SimulationError):
    code = "shooting-bracket-failure"


class SolverDisagreementError(SimulationError):
    code = "solver-disagreement"


class BOutOfRangeError(SimulationError):
    code = "b-out-of-range"


class NonPositiveBError(SimulationError):
    code = "nonpositive-b"


# ==================== modulation ====================


class FlatFieldError(SimulationError):
    code = "flat-field"


class InvalidSpecError(SimulationError):
    code = "invalid-spec"


class InsufficientSamplesError(SimulationError):
    code = "insufficient-samples"


# ==================== diagnostics / fitting ====================


class InsufficientWindowError(SimulationError):
    code = "insufficient-window"


class FitDivergenceError(SimulationError):
    code = "fit-divergence"


# ==================== evolve ====================


class NumericBlowupError(SimulationError):
    code = "numeric-blowup"


class CheckpointVersionError(SimulationError):
    code = "checkpoint-version"


# ==================== config / io ====================


class ConfigParseError(SimulationError):
    code = "parse-error"


class ConfigValidationError(SimulationError):
    code = "validation-error"


class StorageError(SimulationError):
    code = "io-error"
