from __future__ import annotations

from datetime import datetime
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

StopReasonName = Literal["blowup_detected", "horizon_reached", "numeric_failure", "path_rejected"]


class InitialDataReport(BaseModel):
    """Which initial-data constraints hold for a datum built at desk scale."""

    lambda0: float
    b0: float
    gamma_b0: float
    eps0_l2: float
    eps0_weighted: float
    alpha: float

    b_positive: bool
    eps_plus_b_below_alpha: bool

    # log(lambda0) <= -(1/Gamma_b0)^{4/5}; -inf bound means it is out of reach
    log_lambda0: float
    log_lambda_bound: float
    lambda_below_bound: bool
    eps_weighted_below_bound: bool

    energy: float
    momentum: list[float]
    energy_bounded: bool
    momentum_bounded: bool

    @property
    def desk_scale(self) -> bool:
        return not self.lambda_below_bound


class DriftReport(BaseModel):
    n_records: int
    sup_energy_ratio: float
    sup_momentum_ratio: float
    max_relative_energy_drift: float | None = None


class DriftComparison(BaseModel):
    energy_ratio: float
    momentum_ratio: float
    stable: bool


class EnergyScaleReport(BaseModel):
    """Log-log slopes of lam^2 |E| and lam |P| against 1/lam; None when the trend is undefined."""

    n_records: int
    energy_slope: float | None = None
    momentum_slope: float | None = None
    decreasing: bool = False


class VirialBand(BaseModel):
    n_samples: int
    q_over_gamma_min: float | None = None
    q_over_gamma_median: float | None = None
    q_over_gamma_max: float | None = None


class ModelFitOut(BaseModel):
    model: Literal["A", "B", "C"]
    T: float
    C: float
    p: float | None = None
    residual: float


class RateFitOut(BaseModel):
    n_samples: int
    window: tuple[float, float]
    lambda_window: tuple[float, float]
    models: dict[str, ModelFitOut]
    p: float
    p_in_loglog_range: bool
    loglog_beats_power: bool


class PathSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int
    stop_reason: StopReasonName
    resolution_limited: bool = False
    error: str | None = None
    t_final: float | None = None
    steps: int = 0
    n_regrids: int = 0
    final_N: int | None = None
    final_L: float | None = None
    path_bound_worst: float | None = None

    T_fit: float | None = None
    p_fit: float | None = None
    residual_ratio: float | None = None
    monitor_pass_rates: dict[str, float] = Field(default_factory=dict)
    drift: DriftReport | None = None
    drift_comparison: DriftComparison | None = None
    energy_scale: EnergyScaleReport | None = None
    virial_band: VirialBand | None = None
    # correlation of -lambda_s/lambda with b over the monitored window
    lambda_b_correlation: float | None = None
    initial_report: InitialDataReport | None = None


class EnsembleSummary(BaseModel):
    n_paths: int = 0
    n_blowup: int = 0
    n_horizon: int = 0
    n_rejected: int = 0
    n_numeric_failure: int = 0
    blowup_fraction: float | None = None
    blowup_ci: tuple[float, float] | None = None
    paths: list[PathSummary] = Field(default_factory=list)


class OracleResult(BaseModel):
    name: str
    passed: bool
    metrics: dict[str, float] = Field(default_factory=dict)
    message: str = ""


class RunManifest(BaseModel):
    """Index of one output directory; the only payload carrying a timestamp."""

    created_at: datetime
    seeds: list[int]
    config_toml: str | None = None
    files: list[str] = Field(default_factory=list)
