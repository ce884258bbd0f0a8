"""
Conserved and monitored quantities for a path, and the runtime monitors that
compare them with the blow-up regime's a-priori estimates.

The asymptotic thresholds of that regime (Gamma_b^10 and friends) are far
below double precision for any reachable b, so monitors record raw values and
check trends; they never assert the literal bounds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import structlog

from app.core.errors import InsufficientSamplesError
from app.schemas.reports import DriftComparison, DriftReport, EnergyScaleReport, VirialBand
from app.services.grid_field import ComplexField, gradient_norm_sq, l2_norm_sq, spectral_gradient

logger = structlog.get_logger(__name__)


def energy(u: ComplexField) -> float:
    """1/2 int |grad u|^2 - 1/(2 + 4/d) int |u|^{2 + 4/d}."""
    p = 2.0 + 4.0 / u.grid.d
    potential = float(np.sum(np.abs(u.values) ** p) * u.grid.cell_volume)
    return 0.5 * gradient_norm_sq(u) - potential / p


def momentum(u: ComplexField) -> np.ndarray:
    conj = np.conj(u.values)
    return np.array(
        [float(np.imag(np.sum(conj * g.values)) * u.grid.cell_volume) for g in spectral_gradient(u)]
    )


def _gamma_or_nan(b: float) -> float:
    return float(np.exp(-np.pi / b)) if b > 0 else float("nan")


@dataclass(slots=True)
class DiagRecord:
    t: float
    s: float
    mass: float
    energy: float
    momentum: tuple[float, ...]
    h1: float
    lam: float
    b: float
    drift_budget: float
    gamma_b: float = float("nan")
    lam2_E: float = float("nan")
    lam_P: float = float("nan")
    mass_excess: float = float("nan")
    l2_beta: float = float("nan")
    l2_c: float = float("nan")

    def __post_init__(self) -> None:
        self.gamma_b = _gamma_or_nan(self.b)
        self.lam2_E = self.lam**2 * abs(self.energy)
        self.lam_P = self.lam * float(np.linalg.norm(self.momentum))


def diag_record(
    u: ComplexField,
    *,
    t: float,
    s: float,
    lam: float,
    b: float,
    drift_budget: float,
    ground_mass: float,
    coefficient_sizes: tuple[float, float] = (float("nan"), float("nan")),
) -> DiagRecord:
    mass = l2_norm_sq(u)
    grad2 = gradient_norm_sq(u)
    rec = DiagRecord(
        t=t,
        s=s,
        mass=mass,
        energy=energy(u),
        momentum=tuple(float(v) for v in momentum(u)),
        h1=float(np.sqrt(mass + grad2)),
        lam=lam,
        b=b,
        drift_budget=drift_budget,
    )
    rec.mass_excess = mass - ground_mass
    rec.l2_beta, rec.l2_c = coefficient_sizes
    return rec


def diag_frame(records: list[DiagRecord], d: int | None = None) -> pd.DataFrame:
    if d is None:
        d = len(records[0].momentum) if records else 1
    columns = [
        "t", "s", "mass", "energy", *[f"P_{j + 1}" for j in range(d)], "h1", "lambda", "b",
        "gamma_b", "lam2_E", "lam_P", "drift_budget", "mass_excess", "l2_beta", "l2_c",
    ]
    rows = []
    for r in records:
        row = asdict(r)
        mom = row.pop("momentum")
        row.update({f"P_{j + 1}": mom[j] for j in range(d)})
        row["lambda"] = row.pop("lam")
        rows.append(row)
    return pd.DataFrame(rows, columns=columns)


# ==================== drift ====================


def check_energy_drift(diag: pd.DataFrame) -> DriftReport:
    """sup |E - E0| / (1 + int ||u||_H1^2) and the same for momentum."""
    if len(diag) < 2:
        raise InsufficientSamplesError("drift check needs at least 2 records")
    E = diag["energy"].to_numpy()
    P = diag.filter(regex=r"^P_\d+$").to_numpy()
    budget = 1.0 + diag["drift_budget"].to_numpy()
    r_energy = np.abs(E - E[0]) / budget
    r_momentum = np.linalg.norm(P - P[0], axis=1) / budget
    rel = None
    if E[0] != 0.0:
        rel = float(np.max(np.abs(E - E[0])) / abs(E[0]))
    return DriftReport(
        n_records=len(diag),
        sup_energy_ratio=float(np.max(r_energy)),
        sup_momentum_ratio=float(np.max(r_momentum)),
        max_relative_energy_drift=rel,
    )


def _ratio(fine: float, coarse: float, floor: float = 1e-14) -> float:
    if coarse <= floor and fine <= floor:
        return 1.0
    return fine / max(coarse, floor)


def compare_drift(coarse: DriftReport, fine: DriftReport, factor: float = 2.0) -> DriftComparison:
    """Drift ratios of the same Brownian path at dt (coarse) and dt/2 (fine)."""
    e = _ratio(fine.sup_energy_ratio, coarse.sup_energy_ratio)
    m = _ratio(fine.sup_momentum_ratio, coarse.sup_momentum_ratio)
    stable = all(1.0 / factor <= r <= factor for r in (e, m))
    return DriftComparison(energy_ratio=e, momentum_ratio=m, stable=stable)


# ==================== bootstrap monitor ====================


@dataclass(slots=True)
class BootstrapReport:
    flags: pd.DataFrame
    dyadic: pd.DataFrame
    c_fit: float
    pass_rates: dict[str, float] = field(default_factory=dict)


FLAG_COLUMNS = (
    "b_positive",
    "eps_below_alpha",
    "eps_below_half_alpha",
    "monotone_3_2",
    "monotone_5_4",
    "lambda_below_bound",
    "eps_weighted_below_bound",
    "dyadic_ok",
    "dyadic_sqrt_ok",
)


def _dyadic_bins(t: np.ndarray, lam: np.ndarray) -> pd.DataFrame:
    level = -np.log2(lam)
    rows = []
    if level.size == 0:
        return pd.DataFrame(columns=["k", "t_k", "lambda_k", "ratio", "ratio_sqrt"])
    k_lo = max(1, int(np.ceil(level[0] - 0.5)))
    k_hi = int(np.round(np.max(level)))
    entries = {}
    for k in range(k_lo, k_hi + 1):
        hit = np.nonzero(level >= k - 0.5)[0]
        if hit.size:
            entries[k] = int(hit[0])
    for k in sorted(entries):
        if k + 1 not in entries:
            continue
        i, j = entries[k], entries[k + 1]
        span = t[j] - t[i]
        rows.append(
            {
                "k": k,
                "t_k": t[i],
                "lambda_k": lam[i],
                "ratio": span / (k * lam[i] ** 2),
                "ratio_sqrt": span / (np.sqrt(k) * lam[i] ** 2),
            }
        )
    return pd.DataFrame(rows, columns=["k", "t_k", "lambda_k", "ratio", "ratio_sqrt"])


def bootstrap_monitor(mod: pd.DataFrame, alpha: float, *, dyadic_factor: float = 10.0) -> BootstrapReport:
    """Per-sample flags for the bootstrap-regime estimates over a modulation series."""
    t = mod["t"].to_numpy(dtype=float)
    lam = mod["lambda"].to_numpy(dtype=float)
    b = mod["b"].to_numpy(dtype=float)
    eps = mod["eps_l2"].to_numpy(dtype=float)
    eps_w = mod["eps_weighted"].to_numpy(dtype=float)

    future_max = np.maximum.accumulate(lam[::-1])[::-1] if lam.size else lam
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        gamma = np.where(b > 0, np.exp(-np.pi / np.where(b > 0, b, 1.0)), np.nan)
        log_bound = np.where(b > 0, -np.exp((2.0 / 3.0) * np.pi / np.where(b > 0, b, 1.0)), np.nan)
        flags = pd.DataFrame(
            {
                "t": t,
                "b_positive": b > 0,
                "eps_below_alpha": eps + b < alpha,
                "eps_below_half_alpha": eps + b < 0.5 * alpha,
                "monotone_3_2": future_max <= 1.5 * lam,
                "monotone_5_4": future_max <= 1.25 * lam,
                "lambda_below_bound": np.log(lam) <= log_bound,
                "eps_weighted_below_bound": eps_w <= gamma ** (2.0 / 3.0),
            }
        )

    dyadic = _dyadic_bins(t, lam)
    c_fit = float(np.median(dyadic["ratio"])) if len(dyadic) else float("nan")
    c_sqrt = float(np.median(dyadic["ratio_sqrt"])) if len(dyadic) else float("nan")
    ok = dict(zip(dyadic["k"], dyadic["ratio"] <= dyadic_factor * c_fit))
    ok_sqrt = dict(zip(dyadic["k"], dyadic["ratio_sqrt"] <= dyadic_factor * c_sqrt))
    k_of = np.round(-np.log2(lam)).astype(int) if lam.size else np.array([], dtype=int)
    flags["dyadic_ok"] = [bool(ok.get(k, True)) for k in k_of]
    flags["dyadic_sqrt_ok"] = [bool(ok_sqrt.get(k, True)) for k in k_of]

    rates = {name: float(flags[name].mean()) if len(flags) else 1.0 for name in FLAG_COLUMNS}
    failed = [name for name in ("b_positive", "eps_below_alpha", "monotone_3_2") if rates[name] < 1.0]
    if failed:
        logger.info("bootstrap_flags_failed", flags=failed, samples=len(flags))
    return BootstrapReport(flags=flags, dyadic=dyadic, c_fit=c_fit, pass_rates=rates)


# ==================== energy-scale monitors ====================


@dataclass(slots=True)
class LambdaEReport:
    series: pd.DataFrame
    energy_slope: float
    momentum_slope: float

    @property
    def decreasing(self) -> bool:
        return bool(self.energy_slope < 0 and (np.isnan(self.momentum_slope) or self.momentum_slope < 0))

    def to_out(self) -> EnergyScaleReport:
        return EnergyScaleReport(
            n_records=len(self.series),
            energy_slope=_finite_or_none(self.energy_slope),
            momentum_slope=_finite_or_none(self.momentum_slope),
            decreasing=self.decreasing,
        )


def _finite_or_none(value: float) -> float | None:
    return float(value) if np.isfinite(value) else None


def _log_slope(lam: np.ndarray, values: np.ndarray) -> float:
    keep = (values > 0) & (lam > 0) & np.isfinite(values)
    if np.count_nonzero(keep) < 2 or np.ptp(np.log(lam[keep])) == 0:
        return float("nan")
    slope, _ = np.polyfit(np.log(1.0 / lam[keep]), np.log(values[keep]), 1)
    return float(slope)


def lambda_e_monitor(diag: pd.DataFrame) -> LambdaEReport:
    """lam^2 |E| and lam |P| with their log-log trend against 1/lam."""
    series = diag[["t", "lambda", "lam2_E", "lam_P"]].copy()
    lam = series["lambda"].to_numpy(dtype=float)
    return LambdaEReport(
        series=series,
        energy_slope=_log_slope(lam, series["lam2_E"].to_numpy(dtype=float)),
        momentum_slope=_log_slope(lam, series["lam_P"].to_numpy(dtype=float)),
    )


def virial_proxy(mod_series: pd.DataFrame, diag: pd.DataFrame) -> pd.DataFrame:
    """q = b_s + 2 lam^2 E and q / Gamma_b on the samples shared by both series."""
    merged = mod_series[["t", "s", "lambda", "b", "b_s"]].merge(diag[["t", "energy"]], on="t", how="inner")
    lam = merged["lambda"].to_numpy(dtype=float)
    b = merged["b"].to_numpy(dtype=float)
    lam2E = lam**2 * merged["energy"].to_numpy(dtype=float)
    q = merged["b_s"].to_numpy(dtype=float) + 2.0 * lam2E
    gamma = np.array([_gamma_or_nan(v) for v in b])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = q / gamma
    return pd.DataFrame(
        {"t": merged["t"], "s": merged["s"], "b": b, "b_s": merged["b_s"], "lam2_E": lam2E, "q": q, "q_over_gamma": ratio}
    )


def virial_band(virial: pd.DataFrame) -> VirialBand:
    """Range of q / Gamma_b over the finite samples of a virial series."""
    ratio = virial["q_over_gamma"].to_numpy(dtype=float)
    ratio = ratio[np.isfinite(ratio)]
    if ratio.size == 0:
        return VirialBand(n_samples=len(virial))
    return VirialBand(
        n_samples=len(virial),
        q_over_gamma_min=float(np.min(ratio)),
        q_over_gamma_median=float(np.median(ratio)),
        q_over_gamma_max=float(np.max(ratio)),
    )
