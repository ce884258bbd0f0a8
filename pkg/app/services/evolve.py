"""
Time stepping of the physical field X for

    dX = i Delta X dt + i |X|^{4/d} X dt - mu X dt + i X dW

by Strang splitting. The noise substep X <- X e^{i dW} is the exact flow of
the last two terms, so every substep is unitary or unimodular and the mass is
conserved to rounding. The companion u = e^{-iW} X is derived on demand.

PathRunner drives one noise path: dyadic adaptive steps (dt = dt0 2^-m,
m chosen from the focusing scale), regridding by zoom or refinement as the
solution concentrates, periodic modulation and diagnostics samples, and
checkpoint/resume.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
import structlog

from app.core.errors import FieldNotLocalizedError, FlatFieldError, NumericBlowupError
from app.schemas.config import SimConfig
from app.schemas.reports import InitialDataReport
from app.services.diagnostics import DiagRecord, diag_frame, diag_record
from app.services.grid_field import (
    ComplexField,
    Grid,
    gradient_norm_sq,
    l2_norm_sq,
    make_grid,
    peak_position,
    spectral_interpolate,
)
from app.services.ground_state import pseudo_conformal, q_radial
from app.services.modulation import (
    InitialDataSpec,
    ModulationContext,
    ModulationParams,
    ModulationState,
    build_initial_data,
    decompose_warm,
    states_frame,
)
from app.services.noise import (
    MAX_LEVEL,
    NoiseRealization,
    PathBoundReport,
    PhiBasis,
    PhiFamily,
    check_path_bound,
    rescaled_coefficient_sizes,
    sample_brownian,
    w_field,
)
from app.storage.checkpoints import load_checkpoint, save_checkpoint

logger = structlog.get_logger(__name__)

RESOLUTION_POINTS = 8


class StopReason(str, Enum):
    BLOWUP = "blowup_detected"
    HORIZON = "horizon_reached"
    NUMERIC = "numeric_failure"
    REJECTED = "path_rejected"


# ==================== substeps ====================


def kinetic_propagator(grid: Grid, dt: float) -> np.ndarray:
    return np.exp(-1j * grid.k_squared() * dt)


def step_kinetic(X: ComplexField, dt: float, propagator: np.ndarray | None = None) -> ComplexField:
    if propagator is None:
        propagator = kinetic_propagator(X.grid, dt)
    return X.with_values(np.fft.ifftn(propagator * np.fft.fftn(X.values)))


def step_nonlinear(X: ComplexField, dt: float) -> ComplexField:
    amp2 = X.values.real**2 + X.values.imag**2
    return X.with_values(X.values * np.exp(1j * amp2 ** (2.0 / X.grid.d) * dt))


def step_noise(X: ComplexField, dW: np.ndarray) -> ComplexField:
    return X.with_values(X.values * np.exp(1j * dW))


def deterministic_step(X: ComplexField, dt: float, half: np.ndarray | None = None) -> ComplexField:
    """K(dt/2) NL(dt) K(dt/2); reversible with -dt."""
    X = step_kinetic(X, 0.5 * dt, half)
    X = step_nonlinear(X, dt)
    return step_kinetic(X, 0.5 * dt, half)


# ==================== state ====================


@dataclass(slots=True)
class EvolveState:
    ticks: int
    X: ComplexField
    level: int
    dt0: float
    refinements: int = 0
    zooms: int = 0

    @property
    def tick(self) -> float:
        return self.dt0 / 2.0**MAX_LEVEL

    @property
    def t(self) -> float:
        return self.ticks * self.tick

    @property
    def dt_current(self) -> float:
        return self.dt0 / 2.0**self.level

    @property
    def step_ticks(self) -> int:
        return 1 << (MAX_LEVEL - self.level)

    @property
    def grid(self) -> Grid:
        return self.X.grid

    @property
    def refinement_level(self) -> int:
        return self.refinements + self.zooms


def strang_step(
    state: EvolveState,
    noise: NoiseRealization | None,
    basis: PhiBasis | None = None,
    *,
    kinetic: bool = True,
    nonlinear: bool = True,
    half: np.ndarray | None = None,
) -> EvolveState:
    """K(dt/2), NL(dt), Noise(dW), K(dt/2), advancing t by dt."""
    dt = state.dt_current
    X = state.X
    if kinetic:
        X = step_kinetic(X, 0.5 * dt, half)
    if nonlinear:
        X = step_nonlinear(X, dt)
    new_ticks = state.ticks + state.step_ticks
    if noise is not None and noise.phi is not None:
        basis = basis or PhiBasis(noise.phi, X.grid)
        dB = noise.at(new_ticks * state.tick) - noise.at(state.ticks * state.tick)
        X = step_noise(X, w_field(basis, dB))
    if kinetic:
        X = step_kinetic(X, 0.5 * dt, half)
    if not X.is_finite():
        raise NumericBlowupError(f"non-finite field at t = {new_ticks * state.tick}")
    return EvolveState(
        ticks=new_ticks,
        X=X,
        level=state.level,
        dt0=state.dt0,
        refinements=state.refinements,
        zooms=state.zooms,
    )


def to_u(
    X: ComplexField, noise: NoiseRealization | None, t: float, basis: PhiBasis | None = None
) -> ComplexField:
    """u = e^{-iW(t)} X."""
    if noise is None or noise.phi is None:
        return X
    basis = basis or PhiBasis(noise.phi, X.grid)
    return X.with_values(X.values * np.exp(-1j * w_field(basis, noise.at(t))))


# ==================== records ====================


@dataclass(slots=True)
class StepSample:
    t: float
    step: int
    dt: float
    N: int
    L: float
    center: tuple[float, ...]
    mass: float
    h1_x: float
    lambda_est: float


@dataclass(slots=True)
class RegridEvent:
    t: float
    kind: str
    old_N: int
    new_N: int
    old_L: float
    new_L: float
    center: tuple[float, ...]
    mass_change: float


@dataclass(slots=True)
class TrajectoryRecord:
    seed: int
    d: int
    samples: list[StepSample] = field(default_factory=list)
    modulation: list[ModulationState] = field(default_factory=list)
    diagnostics: list[DiagRecord] = field(default_factory=list)
    regrids: list[RegridEvent] = field(default_factory=list)
    stop_reason: StopReason | None = None
    resolution_limited: bool = False
    steps: int = 0
    initial_report: InitialDataReport | None = None
    path_bound: PathBoundReport | None = None
    final_state: EvolveState | None = field(default=None, repr=False)

    def trajectory_frame(self) -> pd.DataFrame:
        columns = ["t", "step", "dt", "N", "L", *[f"center_{j + 1}" for j in range(self.d)], "mass", "h1_x", "lambda_est"]
        rows = []
        for s in self.samples:
            row = asdict(s)
            center = row.pop("center")
            row.update({f"center_{j + 1}": center[j] for j in range(self.d)})
            rows.append(row)
        return pd.DataFrame(rows, columns=columns)

    def modulation_frame(self) -> pd.DataFrame:
        return states_frame(self.modulation, self.d)

    def diagnostics_frame(self) -> pd.DataFrame:
        return diag_frame(self.diagnostics, self.d)


# ==================== path runner ====================


def _tail_extent(tol: float) -> float:
    """|y| beyond which Q(y)/Q(0) < tol (exponential tail)."""
    return math.log(3.0 / tol) + 2.0


def _lambda_of_preset(config: SimConfig) -> float:
    if config.initial.preset == "pseudo-conformal":
        return abs(config.time.t_start)
    return config.initial.lambda0


class PathRunner:
    """One noise path. `level_offset` halves every step that many times on the same Brownian tree."""

    def __init__(
        self,
        config: SimConfig,
        seed: int,
        *,
        checkpoint_path: Path | None = None,
        level_offset: int = 0,
    ):
        self._setup(config, seed, checkpoint_path, level_offset)
        self._start()

    # ---------- setup ----------

    def _setup(self, config: SimConfig, seed: int, checkpoint_path: Path | None, level_offset: int = 0) -> None:
        self.config = config
        self.seed = int(seed)
        self.checkpoint_path = checkpoint_path
        self.level_offset = int(level_offset)
        d = config.grid.d
        self.dt0 = config.time.dt0
        self.t_start = config.time.t_start
        tick = self.dt0 / 2.0**MAX_LEVEL
        self.end_ticks = int(round((config.time.horizon - self.t_start) / tick))

        self.phi: PhiFamily | None = None
        self.noise: NoiseRealization | None = None
        if config.noise.enabled:
            bumps = [(b.amplitude, b.center, b.width) for b in config.noise.bumps]
            self.phi = PhiFamily.from_bumps(bumps, d).scaled(config.noise.amplitude)
            n_nodes = int(math.ceil((config.time.horizon - self.t_start) / self.dt0 - 1e-9)) + 1
            times = self.dt0 * np.arange(n_nodes)
            self.noise = sample_brownian(self.phi.K, times, self.seed, phi=self.phi, dt_root=self.dt0)

        self.ctx = ModulationContext(d, config.modulation.L_y, config.modulation.N_y)
        self.ref_gradnorm = self.ctx.gs.gradnorm
        self.record = TrajectoryRecord(seed=self.seed, d=d)
        self._basis: PhiBasis | None = None
        self._half: dict[tuple[int, float, int], np.ndarray] = {}
        self._last_mod: ModulationState | None = None
        self._last_h1: float | None = None
        self._last_t: float | None = None
        self._budget = 0.0

    def _initial_grid(self, lam: float, center: tuple[float, ...]) -> Grid:
        cfg, th = self.config.grid, self.config.thresholds
        L, N = cfg.L, cfg.N
        reach = lam * _tail_extent(th.localization_tol)
        while L / 2.0 >= reach:
            L /= 2.0
        target_dx = lam / (RESOLUTION_POINTS * th.margin)
        doublings = 0
        while 2.0 * L / N > target_dx and doublings < th.max_refinements:
            N *= 2
            doublings += 1
        return make_grid(cfg.d, L, N, center=center)

    def _initial_field(self) -> ComplexField:
        cfg = self.config
        init = cfg.initial
        d = cfg.grid.d
        if init.preset == "zero":
            return make_grid(d, cfg.grid.L, cfg.grid.N).zeros()
        center = tuple(init.x0) if init.x0 is not None else (0.0,) * d
        grid = self._initial_grid(_lambda_of_preset(cfg), center)
        if init.preset == "pseudo-conformal":
            return pseudo_conformal(grid, self.t_start)
        if init.preset == "soliton":
            lam = init.lambda0
            r = np.sqrt(np.broadcast_to(sum((x - c) ** 2 for x, c in zip(grid.physical_coords(), center)), grid.shape))
            values = lam ** (-d / 2) * q_radial(d, r / lam) * np.exp(1j * init.gamma0)
            return ComplexField(grid, values.astype(np.complex128))
        spec = InitialDataSpec(
            lambda0=init.lambda0,
            b0=init.b0,
            eps0=init.eps0,
            eps0_amplitude=init.eps0_amplitude,
            eps0_width=init.eps0_width,
            x0=center,
            gamma0=init.gamma0,
        )
        u0, report = build_initial_data(spec, self.ctx.gs, grid, alpha=cfg.thresholds.alpha, ctx=self.ctx)
        self.record.initial_report = report
        return u0

    def _start(self) -> None:
        X0 = self._initial_field()
        self.state = EvolveState(ticks=0, X=X0, level=0, dt0=self.dt0)
        self.mass0 = l2_norm_sq(X0)
        logger.info("path_start", seed=self.seed, N=X0.grid.N, L=X0.grid.L, mass=self.mass0)

        bound = self.config.noise.path_bound
        if bound is not None and self.noise is not None:
            check_grid = make_grid(self.config.grid.d, X0.grid.L, self.config.noise.bound_grid_N, center=X0.grid.center)
            report = check_path_bound(self.noise, self.noise.times[-1], bound, check_grid)
            self.record.path_bound = report
            if not report.ok:
                self._stop(StopReason.REJECTED)
                return
        self._sample()

    # ---------- helpers ----------

    @property
    def stopped(self) -> bool:
        return self.record.stop_reason is not None

    @property
    def t(self) -> float:
        return self.t_start + self.state.t

    def _basis_for(self, grid: Grid) -> PhiBasis | None:
        if self.phi is None:
            return None
        if self._basis is None or self._basis.grid != grid:
            self._basis = PhiBasis(self.phi, grid)
        return self._basis

    def _half_step(self, grid: Grid, level: int) -> np.ndarray:
        key = (grid.N, grid.L, level)
        if key not in self._half:
            self._half[key] = kinetic_propagator(grid, 0.5 * self.dt0 / 2.0**level)
        return self._half[key]

    def lambda_estimate(self) -> float:
        grad2 = gradient_norm_sq(self.state.X)
        th = self.config.thresholds
        if grad2 <= 0.0:
            return 1.0
        return float(np.clip(np.sqrt(self.ref_gradnorm / grad2), th.lambda_floor, 1.0))

    def _choose_level(self, lam: float) -> int:
        level = max(0, math.ceil(-2.0 * math.log2(lam) - 1e-12)) + self.level_offset
        level = min(level, MAX_LEVEL)
        ticks = self.state.ticks
        while level < MAX_LEVEL and (ticks % (1 << (MAX_LEVEL - level)) or ticks + (1 << (MAX_LEVEL - level)) > self.end_ticks):
            level += 1
        return level

    def _stop(self, reason: StopReason, *, resolution_limited: bool = False) -> StopReason:
        self.record.stop_reason = reason
        self.record.resolution_limited = resolution_limited
        self.record.final_state = self.state
        logger.info(
            "path_stop",
            seed=self.seed,
            reason=reason.value,
            t=self.t,
            steps=self.record.steps,
            resolution_limited=resolution_limited,
        )
        return reason

    # ---------- regrid ----------

    def _regrid(self) -> bool:
        th = self.config.thresholds
        X = self.state.X
        old = X.grid
        peak = peak_position(X)
        new_X, kind = None, None
        if th.regrid_policy == "auto" and self.state.zooms < th.max_zooms:
            try:
                new_X = spectral_interpolate(X, make_grid(old.d, old.L / 2.0, old.N), peak, tol=th.localization_tol)
                kind = "zoom"
            except FieldNotLocalizedError:
                new_X = None
        if new_X is None:
            if self.state.refinements >= th.max_refinements:
                return False
            new_X = spectral_interpolate(X, make_grid(old.d, old.L, 2 * old.N), peak)
            kind = "refine"
        mass_change = (l2_norm_sq(new_X) - l2_norm_sq(X)) / max(l2_norm_sq(X), np.finfo(float).tiny)
        self.state.X = new_X
        if kind == "zoom":
            self.state.zooms += 1
        else:
            self.state.refinements += 1
        self._half.clear()
        event = RegridEvent(
            t=self.t,
            kind=kind,
            old_N=old.N,
            new_N=new_X.grid.N,
            old_L=old.L,
            new_L=new_X.grid.L,
            center=new_X.grid.center,
            mass_change=float(mass_change),
        )
        self.record.regrids.append(event)
        logger.info("regrid", **{k: v for k, v in asdict(event).items() if k != "center"})
        return True

    # ---------- sampling ----------

    def _sample(self) -> StopReason | None:
        cfg = self.config
        X = self.state.X
        basis = self._basis_for(X.grid)
        noise_t = self.state.t
        u = to_u(X, self.noise, noise_t, basis)
        t = self.t

        mod = None
        try:
            mod = decompose_warm(
                u,
                self.ctx,
                cfg.thresholds.alpha,
                t=t,
                previous=self._last_mod,
                tol=cfg.modulation.tol,
                max_iter=cfg.modulation.max_iter,
            )
        except FlatFieldError:
            pass
        if mod is not None:
            self.record.modulation.append(mod)
            self._last_mod = mod

        lam_est = self.lambda_estimate()
        mass = l2_norm_sq(X)
        h1_x = float(np.sqrt(mass + gradient_norm_sq(X)))
        lam = mod.lam if mod is not None and mod.converged else lam_est
        b = mod.b if mod is not None and mod.converged else float("nan")

        h1_u = float(np.sqrt(l2_norm_sq(u) + gradient_norm_sq(u)))
        if self._last_t is not None:
            self._budget += 0.5 * (self._last_h1**2 + h1_u**2) * (t - self._last_t)
        self._last_h1, self._last_t = h1_u, t

        sizes = (float("nan"), float("nan"))
        if self.noise is not None and mod is not None and mod.converged:
            sizes = rescaled_coefficient_sizes(self.phi, self.noise.at(noise_t), mod.lam, mod.x_c, self.ctx.ygrid)
        self.record.diagnostics.append(
            diag_record(
                u,
                t=t,
                s=mod.s if mod is not None else float("nan"),
                lam=lam,
                b=b,
                drift_budget=self._budget,
                ground_mass=self.ctx.qnorm2,
                coefficient_sizes=sizes,
            )
        )
        self.record.samples.append(
            StepSample(
                t=t,
                step=self.record.steps,
                dt=self.state.dt_current,
                N=X.grid.N,
                L=X.grid.L,
                center=X.grid.center,
                mass=mass,
                h1_x=h1_x,
                lambda_est=lam_est,
            )
        )
        if h1_u > cfg.thresholds.h1_blowup:
            return self._stop(StopReason.BLOWUP)
        return None

    # ---------- main loop ----------

    def advance(self, max_steps: int | None = None) -> StopReason | None:
        """Step until a stop condition or `max_steps` more steps; returns the stop reason if stopped."""
        cfg = self.config
        th = cfg.thresholds
        taken = 0
        while not self.stopped:
            if max_steps is not None and taken >= max_steps:
                return None
            if self.state.ticks >= self.end_ticks:
                return self._stop(StopReason.HORIZON)

            lam = self.lambda_estimate()
            if lam <= th.lambda_floor:
                return self._stop(StopReason.BLOWUP, resolution_limited=True)
            while lam < RESOLUTION_POINTS * self.state.grid.dx * th.margin:
                if not self._regrid():
                    return self._stop(StopReason.BLOWUP, resolution_limited=True)
                lam = self.lambda_estimate()

            self.state.level = self._choose_level(lam)
            grid = self.state.grid
            try:
                self.state = strang_step(
                    self.state,
                    self.noise,
                    self._basis_for(grid),
                    half=self._half_step(grid, self.state.level),
                )
            except NumericBlowupError:
                return self._stop(StopReason.NUMERIC)
            taken += 1
            self.record.steps += 1

            if self.record.steps % cfg.time.sample_every == 0 or self.state.ticks >= self.end_ticks:
                if self._sample() is not None:
                    return self.record.stop_reason
            every = cfg.time.checkpoint_every
            if self.checkpoint_path is not None and every and self.record.steps % every == 0:
                self.checkpoint(self.checkpoint_path)
        return self.record.stop_reason

    def run(self) -> TrajectoryRecord:
        self.advance()
        return self.record

    # ---------- checkpoint ----------

    def checkpoint(self, path: Path) -> None:
        st = self.state
        meta = {
            "seed": self.seed,
            "level_offset": self.level_offset,
            "ticks": st.ticks,
            "level": st.level,
            "refinements": st.refinements,
            "zooms": st.zooms,
            "grid": {"d": st.grid.d, "L": st.grid.L, "N": st.grid.N, "center": list(st.grid.center)},
            "steps": self.record.steps,
            "budget": self._budget,
            "last_h1": self._last_h1,
            "last_t": self._last_t,
            "mass0": self.mass0,
            "warm": _params_json(self.ctx.warm),
            "samples": [asdict(s) for s in self.record.samples],
            "modulation": [_mod_json(m) for m in self.record.modulation],
            "diagnostics": [asdict(r) for r in self.record.diagnostics],
            "regrids": [asdict(r) for r in self.record.regrids],
            "initial_report": self.record.initial_report.model_dump(mode="json") if self.record.initial_report else None,
        }
        save_checkpoint(path, st.X.values, meta)

    @classmethod
    def resume(cls, path: Path, config: SimConfig, *, checkpoint_path: Path | None = None) -> "PathRunner":
        X_values, meta = load_checkpoint(path)
        runner = cls.__new__(cls)
        runner._setup(config, meta["seed"], checkpoint_path, meta.get("level_offset", 0))
        g = meta["grid"]
        grid = make_grid(g["d"], g["L"], g["N"], center=g["center"])
        runner.state = EvolveState(
            ticks=int(meta["ticks"]),
            X=ComplexField(grid, X_values),
            level=int(meta["level"]),
            dt0=runner.dt0,
            refinements=int(meta["refinements"]),
            zooms=int(meta["zooms"]),
        )
        runner.mass0 = meta["mass0"]
        runner._budget = meta["budget"]
        runner._last_h1 = meta["last_h1"]
        runner._last_t = meta["last_t"]
        runner.ctx.warm = _params_from_json(meta["warm"])
        rec = runner.record
        rec.steps = int(meta["steps"])
        rec.samples = [StepSample(**{**s, "center": tuple(s["center"])}) for s in meta["samples"]]
        rec.modulation = [_mod_from_json(m) for m in meta["modulation"]]
        rec.diagnostics = [_diag_from_json(r) for r in meta["diagnostics"]]
        rec.regrids = [RegridEvent(**{**r, "center": tuple(r["center"])}) for r in meta["regrids"]]
        if meta["initial_report"] is not None:
            rec.initial_report = InitialDataReport.model_validate(meta["initial_report"])
        runner._last_mod = rec.modulation[-1] if rec.modulation else None
        runner.ctx.anchor = next((m for m in reversed(rec.modulation) if m.converged), None)
        logger.info("path_resume", seed=runner.seed, t=runner.t, steps=rec.steps)
        return runner


def _params_json(p: ModulationParams | None) -> dict | None:
    return None if p is None else {"lam": p.lam, "b": p.b, "x_c": list(p.x_c), "gamma": p.gamma}


def _params_from_json(raw: dict | None) -> ModulationParams | None:
    return None if raw is None else ModulationParams(raw["lam"], raw["b"], tuple(raw["x_c"]), raw["gamma"])


def _mod_json(m: ModulationState) -> dict:
    return {
        "t": m.t, "lam": m.lam, "b": m.b, "x_c": list(m.x_c), "gamma": m.gamma,
        "residuals": [float(v) for v in m.residuals], "status": m.status, "valid": m.valid,
        "s": m.s, "eps_l2": m.eps_l2, "eps_weighted": m.eps_weighted, "iterations": m.iterations,
    }


def _mod_from_json(raw: dict) -> ModulationState:
    return ModulationState(**{**raw, "x_c": tuple(raw["x_c"]), "residuals": np.array(raw["residuals"])})


def _diag_from_json(raw: dict) -> DiagRecord:
    extra = {k: raw.pop(k) for k in ("mass_excess", "l2_beta", "l2_c")}
    for k in ("gamma_b", "lam2_E", "lam_P"):
        raw.pop(k)
    rec = DiagRecord(**{**raw, "momentum": tuple(raw["momentum"])})
    rec.mass_excess, rec.l2_beta, rec.l2_c = extra["mass_excess"], extra["l2_beta"], extra["l2_c"]
    return rec


def run_path(config: SimConfig, seed: int, *, checkpoint_path: Path | None = None) -> TrajectoryRecord:
    return PathRunner(config, seed, checkpoint_path=checkpoint_path).run()
