from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.errors import ConfigParseError, ConfigValidationError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Section):
    d: Literal[1, 2] = Field(default=1, description="spatial dimension")
    L: float = Field(default=20.0, gt=0, description="box half-width")
    N: int = Field(default=512, description="points per axis (power of two, >= 16)")

    @field_validator("N")
    @classmethod
    def power_of_two(cls, v: int) -> int:
        if v < 16 or v & (v - 1):
            raise ValueError(f"N must be a power of two >= 16, got {v}")
        return v


class TimeConfig(_Section):
    dt0: float = Field(default=1e-3, gt=0, description="base step (rescaled-time step at lambda = 1)")
    t_start: float = Field(default=0.0, description="physical time of the initial datum")
    horizon: float = Field(default=5.0, description="physical end time")
    sample_every: int = Field(default=20, ge=1, description="steps between modulation samples")
    checkpoint_every: int = Field(default=0, ge=0, description="steps between checkpoints (0 = off)")

    @model_validator(mode="after")
    def horizon_after_start(self) -> "TimeConfig":
        if self.horizon <= self.t_start:
            raise ValueError("horizon must be after t_start")
        return self


class Bump(_Section):
    amplitude: float = 1.0
    center: list[float] = Field(default_factory=lambda: [0.0])
    width: float = Field(default=2.0, gt=0)


class NoiseConfig(_Section):
    # None means one small bump at the origin, sized to the grid dimension
    bumps: list[Bump] | None = None
    amplitude: float = Field(default=1.0, ge=0, description="multiplier on every bump")
    path_bound: float | None = Field(default=None, gt=0, description="reject paths whose coefficient M-norm exceeds this")
    bound_grid_N: int = Field(default=128, ge=16, description="grid points per axis for the path-bound check")

    @property
    def enabled(self) -> bool:
        return self.amplitude > 0 and any(b.amplitude != 0 for b in self.bumps or [])


class InitialConfig(_Section):
    preset: Literal["loglog", "soliton", "pseudo-conformal", "zero"] = "loglog"
    lambda0: float = Field(default=0.1, gt=0)
    b0: float = Field(default=0.2, gt=0, lt=0.5)
    x0: list[float] | None = None
    gamma0: float = 0.0
    eps0: Literal["zero", "bump"] = "zero"
    eps0_amplitude: float = 0.0
    eps0_width: float = Field(default=1.0, gt=0)


class ThresholdConfig(_Section):
    alpha: float = Field(default=0.2, gt=0)
    h1_blowup: float = Field(default=1e6, gt=0)
    lambda_floor: float = Field(default=1e-4, gt=0, lt=1)
    max_refinements: int = Field(default=6, ge=0, description="N doublings allowed per path")
    max_zooms: int = Field(default=40, ge=0, description="box halvings allowed per path")
    margin: float = Field(default=4.0, gt=0)
    localization_tol: float = Field(default=1e-8, gt=0)
    regrid_policy: Literal["auto", "refine"] = "auto"


class ModulationConfig(_Section):
    L_y: float | None = Field(default=None, gt=0)
    N_y: int | None = None
    tol: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=50, ge=1)

    @field_validator("N_y")
    @classmethod
    def power_of_two(cls, v: int | None) -> int | None:
        if v is not None and (v < 16 or v & (v - 1)):
            raise ValueError(f"N_y must be a power of two >= 16, got {v}")
        return v


class FitConfig(_Section):
    lambda_hi: float = Field(default=0.05, gt=0)
    lambda_lo: float = Field(default=2e-4, gt=0)
    min_samples: int = Field(default=20, ge=3)

    @model_validator(mode="after")
    def ordered(self) -> "FitConfig":
        if self.lambda_lo >= self.lambda_hi:
            raise ValueError("lambda_lo must be below lambda_hi")
        return self


class EnsembleConfig(_Section):
    n_paths: int = Field(default=1, ge=0)
    base_seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)


class DiagnosticsConfig(_Section):
    drift_refinement: bool = Field(
        default=False, description="rerun each path at half steps on the same Brownian path and compare drift"
    )


class OutputConfig(_Section):
    directory: str | None = None
    checkpoints: bool = False


class SimConfig(_Section):
    grid: GridConfig = Field(default_factory=GridConfig)
    time: TimeConfig = Field(default_factory=TimeConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    initial: InitialConfig = Field(default_factory=InitialConfig)
    thresholds: ThresholdConfig = Field(default_factory=ThresholdConfig)
    modulation: ModulationConfig = Field(default_factory=ModulationConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def dimensions_agree(self) -> "SimConfig":
        d = self.grid.d
        if self.noise.bumps is None:
            self.noise.bumps = [Bump(amplitude=0.01, center=[0.0] * d)]
        for i, bump in enumerate(self.noise.bumps):
            if len(bump.center) != d:
                raise ValueError(f"noise.bumps[{i}].center has {len(bump.center)} components for d={d}")
        if self.initial.x0 is not None and len(self.initial.x0) != d:
            raise ValueError(f"initial.x0 has {len(self.initial.x0)} components for d={d}")
        if self.noise.bound_grid_N & (self.noise.bound_grid_N - 1):
            raise ValueError("noise.bound_grid_N must be a power of two")
        if self.initial.preset == "pseudo-conformal" and not self.time.horizon < 0:
            raise ValueError("pseudo-conformal preset blows up at t = 0: time.horizon must be negative")
        return self


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def load_config_text(text: str) -> SimConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigParseError(f"invalid TOML: {e}") from e
    try:
        return SimConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigValidationError(_format_validation(e)) from e


def parse_config(path: str | Path) -> SimConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigParseError(f"cannot read config {p}: {e}") from e
    return load_config_text(text)


def to_toml(config: SimConfig) -> str:
    return tomli_w.dumps(config.model_dump(mode="json", exclude_none=True))
