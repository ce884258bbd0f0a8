"""
Blow-up rate fitting over a window of modulation samples.

Three models of the focusing scale near the blow-up time T:

    A  lam^-2 = C / (T - t)                      (pure power law, p = 1/2)
    B  lam^-2 = C ln|ln(T - t)| / (T - t)        (log-log law)
    C  lam^-1 = C (T - t)^-p                     (free exponent)

For fixed T every model is linear in its amplitude (and in log C, p for C),
so the fit is a one-dimensional search over T with a closed-form inner solve:
a log-spaced scan, golden-section refinement, then a least-squares polish of
the projected residual.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
import pandas as pd
import structlog
from scipy.optimize import least_squares, minimize_scalar

from app.core.errors import FitDivergenceError, InsufficientWindowError
from app.schemas.reports import ModelFitOut, RateFitOut

logger = structlog.get_logger(__name__)

Model = Literal["A", "B", "C"]

SCAN_POINTS = 400
SCAN_LOW = 1e-9
SCAN_HIGH = 10.0


@dataclass(frozen=True, slots=True)
class ModelFit:
    model: Model
    T: float
    C: float
    p: float | None
    residual: float
    at_boundary: bool = False


@dataclass(frozen=True, slots=True)
class RateFit:
    models: dict[str, ModelFit]
    window: tuple[float, float]
    lambda_window: tuple[float, float]
    n_samples: int

    @property
    def T(self) -> float:
        return self.models["C"].T

    @property
    def C(self) -> float:
        return self.models["C"].C

    @property
    def p(self) -> float:
        return float(self.models["C"].p)

    @property
    def residual_loglog(self) -> float:
        return self.models["B"].residual

    @property
    def residual_powerlaw(self) -> float:
        return self.models["A"].residual

    @property
    def residual_ratio(self) -> float:
        a = self.residual_powerlaw
        return self.residual_loglog / a if a > 0 else float("inf")

    def to_out(self) -> RateFitOut:
        return RateFitOut(
            n_samples=self.n_samples,
            window=self.window,
            lambda_window=self.lambda_window,
            models={
                k: ModelFitOut(model=m.model, T=m.T, C=m.C, p=m.p, residual=m.residual)
                for k, m in self.models.items()
            },
            p=self.p,
            p_in_loglog_range=0.4 <= self.p <= 0.6,
            loglog_beats_power=self.residual_loglog <= self.residual_powerlaw,
        )


# ==================== inner solves ====================


def _shape_a(tau: np.ndarray) -> np.ndarray:
    return 1.0 / tau


def _shape_b(tau: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(np.abs(np.log(tau))) / tau


_SHAPES: dict[str, Callable[[np.ndarray], np.ndarray]] = {"A": _shape_a, "B": _shape_b}


def _linear_residuals(model: str, tau: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Relative residuals of y = C g(tau) with C minimizing sum((C g / y - 1)^2)."""
    g = _SHAPES[model](tau)
    if np.any(~np.isfinite(g)) or np.any(g <= 0):
        return np.full(y.shape, np.inf), float("nan")
    w = g / y
    amplitude = float(np.sum(w) / np.sum(w * w))
    return amplitude * w - 1.0, amplitude


def _power_residuals(tau: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Relative residuals of y = C tau^-p with (log C, p) from a log-space regression."""
    slope, intercept = np.polyfit(np.log(tau), np.log(y), 1)
    pred = intercept + slope * np.log(tau)
    return np.exp(pred - np.log(y)) - 1.0, float(np.exp(intercept)), float(-slope)


def _residuals(model: str, tau: np.ndarray, y_sq: np.ndarray, y: np.ndarray) -> np.ndarray:
    if model == "C":
        return _power_residuals(tau, y)[0]
    return _linear_residuals(model, tau, y_sq)[0]


def _rms(r: np.ndarray) -> float:
    return float(np.sqrt(np.mean(r * r))) if np.all(np.isfinite(r)) else float("inf")


# ==================== outer search ====================


def _fit_model(model: Model, t: np.ndarray, inv_lam: np.ndarray) -> ModelFit:
    t_b = float(t[-1])
    span = max(float(t[-1] - t[0]), np.finfo(float).tiny)
    y_sq = inv_lam**2

    def objective(x: float) -> float:
        return _rms(_residuals(model, t_b + np.exp(x) - t, y_sq, inv_lam))

    grid = np.linspace(np.log(SCAN_LOW * span), np.log(SCAN_HIGH * span), SCAN_POINTS)
    values = np.array([objective(x) for x in grid])
    if not np.any(np.isfinite(values)):
        raise FitDivergenceError(f"model {model}: no admissible blow-up time in the scan")
    i = int(np.nanargmin(np.where(np.isfinite(values), values, np.nan)))
    at_boundary = i in (0, SCAN_POINTS - 1)

    x_best = grid[i]
    if not at_boundary:
        try:
            res = minimize_scalar(objective, bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden")
            if np.isfinite(res.fun) and res.fun <= values[i]:
                x_best = float(res.x)
        except ValueError:
            pass
        polish = least_squares(
            lambda x: _residuals(model, t_b + np.exp(x[0]) - t, y_sq, inv_lam),
            x0=[x_best],
            method="lm",
            xtol=1e-15,
            ftol=1e-15,
            gtol=1e-15,
        )
        if polish.success and objective(float(polish.x[0])) <= objective(x_best):
            x_best = float(polish.x[0])

    tau = t_b + np.exp(x_best) - t
    if model == "C":
        r, amplitude, p = _power_residuals(tau, inv_lam)
    else:
        r, amplitude = _linear_residuals(model, tau, y_sq)
        p = None
    return ModelFit(
        model=model,
        T=t_b + float(np.exp(x_best)),
        C=amplitude,
        p=p,
        residual=_rms(r),
        at_boundary=at_boundary,
    )


def fit_blowup_rate(
    t: np.ndarray,
    lam: np.ndarray,
    *,
    lambda_hi: float = 0.05,
    lambda_lo: float = 2e-4,
    min_samples: int = 20,
) -> RateFit:
    t = np.asarray(t, dtype=float)
    lam = np.asarray(lam, dtype=float)
    order = np.argsort(t)
    t, lam = t[order], lam[order]
    inside = (lam >= lambda_lo) & (lam <= lambda_hi) & np.isfinite(lam)
    if np.count_nonzero(inside) < min_samples:
        raise InsufficientWindowError(
            f"{np.count_nonzero(inside)} samples with lambda in [{lambda_lo}, {lambda_hi}], need {min_samples}"
        )
    tw, inv_lam = t[inside], 1.0 / lam[inside]

    models: dict[str, ModelFit] = {}
    for model in ("A", "B", "C"):
        try:
            models[model] = _fit_model(model, tw, inv_lam)
        except FitDivergenceError:
            if model == "C":
                raise
            models[model] = ModelFit(model=model, T=float("nan"), C=float("nan"), p=None, residual=float("inf"), at_boundary=True)
    if models["C"].at_boundary or not np.isfinite(models["C"].residual):
        raise FitDivergenceError("free-exponent fit did not settle inside the blow-up time scan")

    fit = RateFit(
        models=models,
        window=(float(tw[0]), float(tw[-1])),
        lambda_window=(lambda_lo, lambda_hi),
        n_samples=int(tw.size),
    )
    logger.info("rate_fit", p=fit.p, T=fit.T, residual_ratio=fit.residual_ratio, samples=fit.n_samples)
    return fit


def fit_series(frame: pd.DataFrame, **window) -> RateFit:
    return fit_blowup_rate(frame["t"].to_numpy(), frame["lambda"].to_numpy(), **window)
