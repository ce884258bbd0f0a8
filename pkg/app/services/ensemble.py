"""
Many-path orchestration: run independent noise paths in a process pool,
analyze each finished path, and aggregate counts and files.

Path i uses seed base_seed + i. Results are ordered by seed before anything is
summarized or written, so the output does not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import structlog
from scipy.stats import binomtest

from app.core.errors import (
    FitDivergenceError,
    InsufficientSamplesError,
    InsufficientWindowError,
    SimulationError,
)
from app.schemas.config import SimConfig, to_toml
from app.schemas.reports import DriftComparison, EnsembleSummary, PathSummary, RateFitOut
from app.services.diagnostics import (
    bootstrap_monitor,
    check_energy_drift,
    compare_drift,
    lambda_e_monitor,
    virial_band,
    virial_proxy,
)
from app.services.evolve import PathRunner, StopReason, TrajectoryRecord
from app.services.modulation import series, states_frame
from app.services.rate_fit import fit_series
from app.storage import tables
from app.storage.reports import write_json, write_manifest

logger = structlog.get_logger(__name__)

CONFIDENCE = 0.95


@dataclass(slots=True)
class PathResult:
    summary: PathSummary
    fit: RateFitOut | None = None
    trajectory: pd.DataFrame | None = None
    modulation: pd.DataFrame | None = None
    diagnostics: pd.DataFrame | None = None
    regrids: pd.DataFrame | None = None
    brownian: pd.DataFrame | None = None
    virial: pd.DataFrame | None = None

    @property
    def seed(self) -> int:
        return self.summary.seed


def path_seeds(config: SimConfig) -> list[int]:
    base = config.ensemble.base_seed
    return [base + i for i in range(config.ensemble.n_paths)]


# ==================== per-path analysis ====================


def _fit_frame(record: TrajectoryRecord) -> pd.DataFrame:
    return states_frame([m for m in record.modulation if m.converged], record.d)


def _in_window(frame: pd.DataFrame, window: tuple[float, float] | None) -> pd.DataFrame:
    if window is None:
        return frame
    lo, hi = window
    return frame[(frame["t"] >= lo) & (frame["t"] <= hi)]


def _correlation(a: np.ndarray, b: np.ndarray) -> float | None:
    keep = np.isfinite(a) & np.isfinite(b)
    if np.count_nonzero(keep) < 3 or np.ptp(a[keep]) == 0 or np.ptp(b[keep]) == 0:
        return None
    return float(np.corrcoef(a[keep], b[keep])[0, 1])


def drift_on_common_window(coarse: pd.DataFrame, fine: pd.DataFrame) -> DriftComparison | None:
    """compare_drift on the diagnostics both runs reached."""
    if coarse.empty or fine.empty:
        return None
    t_end = min(coarse["t"].max(), fine["t"].max())
    slack = 1e-12 * max(1.0, abs(t_end))
    a, b = coarse[coarse["t"] <= t_end + slack], fine[fine["t"] <= t_end + slack]
    if len(a) < 2 or len(b) < 2:
        return None
    return compare_drift(check_energy_drift(a), check_energy_drift(b))


def analyze_path(
    record: TrajectoryRecord,
    config: SimConfig,
    *,
    t_final: float | None = None,
    refined: TrajectoryRecord | None = None,
) -> tuple[PathSummary, RateFitOut | None, pd.DataFrame | None]:
    """Rate fit on blow-up paths, then monitors over the fit window (the whole path without a fit).

    Returns the path summary, the fit and the virial series.
    """
    fit_out = None
    window = None
    frame = _fit_frame(record)
    if record.stop_reason == StopReason.BLOWUP and len(frame):
        try:
            fit = fit_series(
                frame,
                lambda_hi=config.fit.lambda_hi,
                lambda_lo=config.fit.lambda_lo,
                min_samples=config.fit.min_samples,
            )
            fit_out = fit.to_out()
            window = fit.window
        except (InsufficientWindowError, FitDivergenceError) as e:
            logger.info("rate_fit_skipped", seed=record.seed, code=e.code, reason=e.message)

    monitored = _in_window(frame, window)
    pass_rates: dict[str, float] = {}
    if len(monitored):
        pass_rates = bootstrap_monitor(monitored, config.thresholds.alpha).pass_rates

    diag = record.diagnostics_frame()
    drift = check_energy_drift(diag) if len(diag) >= 2 else None
    energy_scale = lambda_e_monitor(_in_window(diag, window)).to_out() if len(diag) else None
    comparison = drift_on_common_window(diag, refined.diagnostics_frame()) if refined is not None else None

    virial, band, correlation = None, None, None
    try:
        mod_series = series(record.modulation)
    except InsufficientSamplesError as e:
        logger.debug("virial_skipped", seed=record.seed, reason=e.message)
    else:
        virial = virial_proxy(mod_series, diag)
        band = virial_band(_in_window(virial, window))
        focus = _in_window(mod_series, window)
        correlation = _correlation(
            focus["minus_lambda_s_over_lambda"].to_numpy(dtype=float), focus["b"].to_numpy(dtype=float)
        )

    final = record.final_state
    summary = PathSummary(
        seed=record.seed,
        stop_reason=(record.stop_reason or StopReason.NUMERIC).value,
        resolution_limited=record.resolution_limited,
        t_final=t_final,
        steps=record.steps,
        n_regrids=len(record.regrids),
        final_N=final.grid.N if final is not None else None,
        final_L=final.grid.L if final is not None else None,
        path_bound_worst=record.path_bound.worst if record.path_bound is not None else None,
        T_fit=fit_out.models["C"].T if fit_out else None,
        p_fit=fit_out.p if fit_out else None,
        residual_ratio=(fit_out.models["B"].residual / fit_out.models["A"].residual)
        if fit_out and fit_out.models["A"].residual > 0
        else None,
        monitor_pass_rates=pass_rates,
        drift=drift,
        drift_comparison=comparison,
        energy_scale=energy_scale,
        virial_band=band,
        lambda_b_correlation=correlation,
        initial_report=record.initial_report,
    )
    return summary, fit_out, virial


def _refined_config(config: SimConfig) -> SimConfig:
    """Same config with samples at the same times once every step is halved."""
    time = config.time.model_copy(update={"sample_every": 2 * config.time.sample_every, "checkpoint_every": 0})
    return config.model_copy(update={"time": time})


def run_single(config: SimConfig, seed: int, checkpoint_dir: str | None = None) -> PathResult:
    """Worker entry point; never raises."""
    checkpoint_path = Path(checkpoint_dir) / f"seed_{seed}.npz" if checkpoint_dir else None
    try:
        runner = PathRunner(config, seed, checkpoint_path=checkpoint_path)
        record = runner.run()
        refined = None
        if config.diagnostics.drift_refinement and record.stop_reason != StopReason.REJECTED:
            refined = PathRunner(_refined_config(config), seed, level_offset=1).run()
        summary, fit_out, virial = analyze_path(record, config, t_final=runner.t, refined=refined)
        brownian = None
        if runner.noise is not None:
            brownian = tables.brownian_frame(runner.noise.times, runner.noise.bpaths)
        return PathResult(
            summary=summary,
            fit=fit_out,
            trajectory=record.trajectory_frame(),
            modulation=record.modulation_frame(),
            diagnostics=record.diagnostics_frame(),
            regrids=tables.regrid_frame(record.regrids),
            brownian=brownian,
            virial=virial,
        )
    except Exception as e:  # noqa: BLE001
        code = e.code if isinstance(e, SimulationError) else type(e).__name__
        logger.error("path_failed", seed=seed, error=str(e), code=code)
        return PathResult(
            summary=PathSummary(seed=seed, stop_reason=StopReason.NUMERIC.value, error=f"{code}: {e}")
        )


# ==================== aggregation ====================


def summarize(results: Sequence[PathResult]) -> EnsembleSummary:
    paths = [r.summary for r in sorted(results, key=lambda r: r.seed)]
    counts = {reason: 0 for reason in StopReason}
    for p in paths:
        counts[StopReason(p.stop_reason)] += 1
    attempted = len(paths) - counts[StopReason.REJECTED]
    fraction, ci = None, None
    if attempted > 0:
        k = counts[StopReason.BLOWUP]
        fraction = k / attempted
        interval = binomtest(k, attempted).proportion_ci(confidence_level=CONFIDENCE, method="wilson")
        ci = (float(interval.low), float(interval.high))
    return EnsembleSummary(
        n_paths=len(paths),
        n_blowup=counts[StopReason.BLOWUP],
        n_horizon=counts[StopReason.HORIZON],
        n_rejected=counts[StopReason.REJECTED],
        n_numeric_failure=counts[StopReason.NUMERIC],
        blowup_fraction=fraction,
        blowup_ci=ci,
        paths=paths,
    )


def _path_dir(directory: Path, seed: int) -> Path:
    return directory / "paths" / f"seed_{seed}"


def emit_report(
    summary: EnsembleSummary,
    directory: str | Path,
    *,
    results: Sequence[PathResult] = (),
    config: SimConfig | None = None,
) -> list[Path]:
    """Per-path files first, then summary.json, aggregate.csv and the manifest."""
    out = Path(directory)
    written: list[Path] = []
    for r in sorted(results, key=lambda r: r.seed):
        pdir = _path_dir(out, r.seed)
        written.append(write_json(r.summary, pdir / "path.json"))
        if r.trajectory is not None:
            d = config.grid.d if config else 1
            written.append(tables.write_table(r.trajectory, pdir / "trajectory.csv", tables.trajectory_columns(d)))
            written.append(tables.write_table(r.modulation, pdir / "modulation.csv", tables.modulation_columns(d)))
            written.append(tables.write_table(r.diagnostics, pdir / "diagnostics.csv", tables.diagnostics_columns(d)))
            written.append(tables.write_table(r.regrids, pdir / "regrids.csv", tables.REGRID_COLUMNS))
        if r.virial is not None:
            written.append(tables.write_table(r.virial, pdir / "virial.csv", tables.VIRIAL_COLUMNS))
        if r.brownian is not None:
            K = r.brownian.shape[1] - 1
            written.append(tables.write_table(r.brownian, pdir / "brownian.csv", tables.brownian_columns(K)))
        if r.fit is not None:
            written.append(write_json(r.fit, pdir / "fit.json"))

    if config is not None:
        toml_path = out / "config.toml"
        toml_path.parent.mkdir(parents=True, exist_ok=True)
        toml_path.write_text(to_toml(config), encoding="utf-8")
        written.append(toml_path)
    written.append(write_json(summary, out / "summary.json"))
    aggregate = tables.aggregate_inverse_lambda([r.diagnostics for r in results if r.diagnostics is not None])
    written.append(tables.write_table(aggregate, out / "aggregate.csv", tables.AGGREGATE_COLUMNS))
    manifest = write_manifest(
        out,
        seeds=[p.seed for p in summary.paths],
        files=[p.relative_to(out).as_posix() for p in written],
        config_toml=to_toml(config) if config else None,
    )
    logger.info("report_written", directory=str(out), files=len(written))
    return [*written, manifest]


def run_ensemble(
    config: SimConfig,
    *,
    out_dir: str | Path | None = None,
    seeds: Sequence[int] | None = None,
    workers: int | None = None,
) -> EnsembleSummary:
    seeds = list(path_seeds(config) if seeds is None else seeds)
    workers = max(1, workers or config.ensemble.workers)
    checkpoint_dir = None
    if out_dir is not None and config.output.checkpoints:
        checkpoint_dir = str(Path(out_dir) / "checkpoints")
    logger.info("ensemble_start", paths=len(seeds), workers=workers)

    results: list[PathResult] = []
    if workers == 1 or len(seeds) <= 1:
        for seed in seeds:
            results.append(run_single(config, seed, checkpoint_dir))
            logger.info("ensemble_progress", done=len(results), total=len(seeds))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_single, config, seed, checkpoint_dir): seed for seed in seeds}
            for fut in as_completed(futures):
                seed = futures[fut]
                try:
                    results.append(fut.result())
                except Exception as e:  # noqa: BLE001
                    # the worker process itself died
                    results.append(
                        PathResult(summary=PathSummary(seed=seed, stop_reason=StopReason.NUMERIC.value, error=f"worker: {e}"))
                    )
                logger.info("ensemble_progress", done=len(results), total=len(seeds))

    summary = summarize(results)
    if out_dir is not None:
        emit_report(summary, out_dir, results=results, config=config)
    logger.info(
        "ensemble_done",
        paths=summary.n_paths,
        blowup=summary.n_blowup,
        horizon=summary.n_horizon,
        rejected=summary.n_rejected,
        numeric=summary.n_numeric_failure,
    )
    return summary


def blowup_paths(summary: EnsembleSummary) -> list[PathSummary]:
    return [p for p in summary.paths if p.stop_reason == StopReason.BLOWUP.value]


def loglog_preference_rate(summary: EnsembleSummary) -> float:
    """Share of fitted blow-up paths whose log-log residual does not exceed the power-law one."""
    ratios = np.array([p.residual_ratio for p in blowup_paths(summary) if p.residual_ratio is not None])
    return float(np.mean(ratios <= 1.0)) if ratios.size else float("nan")
