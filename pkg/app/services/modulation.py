"""
Modulation decomposition

    u(x) = lam^{-d/2} (Qb + eps)((x - x_c) / lam) e^{i gamma}

with eps fixed by the orthogonality conditions

    Re(|y|^2 Qb, eps) = Re(y_j Qb, eps) = Re(i Lambda Qb, eps) = Re(i Lambda^2 Qb, eps) = 0.

The unknowns (log lam, b, x_c, gamma) are found by Newton iteration with a
central finite-difference Jacobian. u is sampled on the rescaled y-grid by
chirp-z lattice evaluation of its trigonometric interpolant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import pandas as pd
import structlog

from app.core.errors import (
    BOutOfRangeError,
    FlatFieldError,
    InsufficientSamplesError,
    InvalidSpecError,
)
from app.schemas.reports import InitialDataReport
from app.services.diagnostics import energy, momentum
from app.services.ground_state import (
    B_LIMIT,
    GroundState,
    apply_lambda,
    gamma_b,
    ground_state_for,
    qb_values,
)
from app.services.grid_field import (
    ComplexField,
    Grid,
    centered_coefficients,
    evaluate_lattice,
    gradient_norm_sq,
    l2_norm_sq,
    make_grid,
    peak_position,
    real_pairing,
    weighted_eps_norm,
)

logger = structlog.get_logger(__name__)

Status = Literal["converged", "newton-divergence", "eps-too-large"]

DEFAULT_Y_GRID = {1: (30.0, 1024), 2: (10.0, 128)}
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
FD_STEP = 1e-6
B_GUESS_CLAMP = 0.45


@dataclass(frozen=True, slots=True)
class ModulationParams:
    lam: float
    b: float
    x_c: tuple[float, ...]
    gamma: float

    def to_vector(self) -> np.ndarray:
        return np.array([np.log(self.lam), self.b, *self.x_c, self.gamma])

    @classmethod
    def from_vector(cls, p: np.ndarray) -> "ModulationParams":
        return cls(lam=float(np.exp(p[0])), b=float(p[1]), x_c=tuple(float(v) for v in p[2:-1]), gamma=float(p[-1]))


@dataclass(slots=True)
class ModulationState:
    t: float
    lam: float
    b: float
    x_c: tuple[float, ...]
    gamma: float
    residuals: np.ndarray
    status: Status
    valid: bool
    s: float = 0.0
    eps_l2: float = float("nan")
    eps_weighted: float = float("nan")
    iterations: int = 0
    eps: ComplexField | None = field(default=None, repr=False)

    @property
    def params(self) -> ModulationParams:
        return ModulationParams(self.lam, self.b, self.x_c, self.gamma)

    @property
    def converged(self) -> bool:
        return self.status != "newton-divergence"

    @property
    def residual_max(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0


@dataclass(frozen=True, slots=True)
class InitialDataSpec:
    lambda0: float
    b0: float
    eps0: Literal["zero", "bump"] = "zero"
    eps0_amplitude: float = 0.0
    eps0_width: float = 1.0
    x0: tuple[float, ...] = ()
    gamma0: float = 0.0


class ModulationContext:
    """y-grid, ground state and a warm start for one path."""

    def __init__(self, d: int, L_y: float | None = None, N_y: int | None = None):
        default_L, default_N = DEFAULT_Y_GRID[d]
        self.ygrid = make_grid(d, L_y or default_L, N_y or default_N)
        self.gs: GroundState = ground_state_for(self.ygrid)
        self.qnorm2 = self.gs.mass
        self.r2 = sum(c**2 for c in self.ygrid.coords())
        self.r2_moment = self.gs.radius_sq_moment()
        self.warm: ModulationParams | None = None
        # last sample that converged; rescaled time integrates from it across divergences
        self.anchor: ModulationState | None = None

    @property
    def d(self) -> int:
        return self.ygrid.d

    def profile(self, b: float) -> ComplexField:
        return ComplexField(self.ygrid, qb_values(self.gs, b))

    def directions(self, b: float) -> list[np.ndarray]:
        """|y|^2 Qb, y_j Qb, i Lambda Qb, i Lambda^2 Qb."""
        qb = self.profile(b)
        out = [self.r2 * qb.values]
        out.extend(np.broadcast_to(y * qb.values, self.ygrid.shape) for y in self.ygrid.coords())
        out.append(1j * apply_lambda(qb, 1).values)
        out.append(1j * apply_lambda(qb, 2).values)
        return out


def _pull_back(
    u: ComplexField,
    ygrid: Grid,
    lam: float,
    x_c: Sequence[float],
    coeffs: np.ndarray | None = None,
) -> np.ndarray:
    """lam^{d/2} u(lam*y + x_c) on the y-grid, zero where lam*y + x_c leaves u's box."""
    d = ygrid.d
    start = [xc - lam * ygrid.L for xc in x_c]
    step = [lam * ygrid.dx] * d
    values = evaluate_lattice(u, start, step, [ygrid.N] * d, coeffs=coeffs)
    for axis in range(d):
        x = start[axis] + step[axis] * np.arange(ygrid.N)
        inside = np.abs(x - u.grid.center[axis]) < u.grid.L
        if not inside.all():
            shape = [1] * d
            shape[axis] = ygrid.N
            values = values * inside.reshape(shape)
    return lam ** (d / 2) * values


def _residual_vector(directions: list[np.ndarray], eps: np.ndarray, cell_volume: float) -> np.ndarray:
    return np.array([real_pairing(f, eps, cell_volume) for f in directions])


def orthogonality_residuals(
    eps: ComplexField, b: float, ctx: ModulationContext | None = None
) -> np.ndarray:
    ctx = ctx or ModulationContext(eps.grid.d, eps.grid.L, eps.grid.N)
    return _residual_vector(ctx.directions(b), eps.values, eps.grid.cell_volume)


# ==================== initial guess ====================


def initial_guess(u: ComplexField, ctx: ModulationContext) -> ModulationParams:
    grad2 = gradient_norm_sq(u)
    if not np.isfinite(grad2) or grad2 <= 0.0 or np.max(np.abs(u.values)) == 0.0:
        raise FlatFieldError("field has no peak to modulate around")
    lam = float(np.sqrt(ctx.gs.gradnorm / grad2))

    peak = peak_position(u)
    density = np.abs(u.values) ** 2
    window = np.ones(u.grid.shape, dtype=bool)
    offsets = []
    for x, p in zip(u.grid.physical_coords(), peak):
        off = (x - p + u.grid.L) % (2.0 * u.grid.L) - u.grid.L
        offsets.append(off)
        window = window & np.broadcast_to(np.abs(off) < 2.0 * lam, u.grid.shape)
    weight = density * window
    total = float(np.sum(weight))
    x_c = tuple(
        p + (float(np.sum(np.broadcast_to(off, u.grid.shape) * weight)) / total if total > 0 else 0.0)
        for p, off in zip(peak, offsets)
    )

    coeffs = centered_coefficients(u)
    at_center = evaluate_lattice(u, x_c, [u.grid.dx] * u.grid.d, [1] * u.grid.d, coeffs=coeffs)
    gamma = float(np.angle(at_center.reshape(-1)[0]))

    b = 0.0
    for _ in range(2):
        v = ComplexField(ctx.ygrid, _pull_back(u, ctx.ygrid, lam, x_c, coeffs) * np.exp(-1j * gamma))
        lv = apply_lambda(v, 1)
        im = float(np.imag(np.vdot(v.values, lv.values)) * ctx.ygrid.cell_volume)
        moment = float(np.sum(ctx.r2 * np.abs(v.values) ** 2) * ctx.ygrid.cell_volume)
        b = float(np.clip(-2.0 * im / moment, -B_GUESS_CLAMP, B_GUESS_CLAMP)) if moment > 0 else 0.0
        lam = float(np.sqrt((ctx.gs.gradnorm + 0.25 * b**2 * ctx.r2_moment) / grad2))
    return ModulationParams(lam=lam, b=b, x_c=x_c, gamma=gamma)


# ==================== Newton solve ====================


class _EpsMap:
    def __init__(self, u: ComplexField, ctx: ModulationContext):
        self.u = u
        self.ctx = ctx
        self.coeffs = centered_coefficients(u)

    def eps(self, p: np.ndarray) -> np.ndarray:
        params = ModulationParams.from_vector(p)
        pulled = _pull_back(self.u, self.ctx.ygrid, params.lam, params.x_c, self.coeffs)
        return pulled * np.exp(-1j * params.gamma) - qb_values(self.ctx.gs, params.b)

    def residual(self, p: np.ndarray) -> np.ndarray:
        return _residual_vector(self.ctx.directions(float(p[1])), self.eps(p), self.ctx.ygrid.cell_volume)

    def jacobian(self, p: np.ndarray) -> np.ndarray:
        n = p.size
        lam = float(np.exp(p[0]))
        steps = np.full(n, FD_STEP)
        steps[2 : n - 1] = FD_STEP * lam
        jac = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = steps[i]
            jac[:, i] = (self.residual(p + e) - self.residual(p - e)) / (2.0 * steps[i])
        return jac


def newton_matrix(u: ComplexField, params: ModulationParams, ctx: ModulationContext) -> np.ndarray:
    """(d+3)x(d+3) Jacobian of the orthogonality residuals in (log lam, b, x_c, gamma)."""
    return _EpsMap(u, ctx).jacobian(params.to_vector())


def _b_admissible(p: np.ndarray) -> bool:
    return abs(float(p[1])) + FD_STEP < B_LIMIT


def _rescaled_time(
    previous: ModulationState | None,
    anchor: ModulationState | None,
    t: float,
    lam: float,
    *,
    diverged: bool,
) -> float:
    """s by the trapezoid rule in t on lam^-2, from the last converged sample."""
    if previous is None:
        return 0.0
    start = previous if previous.converged else anchor
    if start is None:
        return previous.s
    if diverged:
        return start.s
    return start.s + 0.5 * (start.lam**-2 + lam**-2) * (t - start.t)


def decompose(
    u: ComplexField,
    guess: ModulationParams,
    alpha: float = 0.2,
    *,
    ctx: ModulationContext | None = None,
    t: float = 0.0,
    previous: ModulationState | None = None,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> ModulationState:
    ctx = ctx or ModulationContext(u.grid.d)
    emap = _EpsMap(u, ctx)
    target = tol * ctx.qnorm2

    p = guess.to_vector()
    if not _b_admissible(p):
        p[1] = np.sign(p[1]) * B_GUESS_CLAMP
    F = emap.residual(p)
    norm = float(np.linalg.norm(F))
    status: Status = "newton-divergence"
    iterations = 0
    while iterations < max_iter:
        if norm < target:
            status = "converged"
            break
        iterations += 1
        try:
            delta = np.linalg.solve(emap.jacobian(p), -F)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        accepted = False
        while step >= 1.0 / 1024:
            trial = p + step * delta
            if _b_admissible(trial):
                F_trial = emap.residual(trial)
                n_trial = float(np.linalg.norm(F_trial))
                if np.isfinite(n_trial) and n_trial < norm:
                    p, F, norm = trial, F_trial, n_trial
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            break
    else:
        if norm < target:
            status = "converged"

    params = ModulationParams.from_vector(p)
    eps_values = emap.eps(p)
    eps = ComplexField(ctx.ygrid, eps_values)
    eps_l2 = float(np.sqrt(l2_norm_sq(eps)))
    if status == "converged" and eps_l2 + params.b >= alpha:
        status = "eps-too-large"
    if status == "newton-divergence":
        logger.debug("newton_divergence", t=t, residual=norm, iterations=iterations)

    s = _rescaled_time(previous, ctx.anchor, t, params.lam, diverged=status == "newton-divergence")
    state = ModulationState(
        t=t,
        lam=params.lam,
        b=params.b,
        x_c=params.x_c,
        gamma=float(np.mod(params.gamma + np.pi, 2.0 * np.pi) - np.pi),
        residuals=F,
        status=status,
        valid=status == "converged",
        s=s,
        eps_l2=eps_l2,
        eps_weighted=weighted_eps_norm(eps),
        iterations=iterations,
        eps=eps,
    )
    if state.converged:
        ctx.anchor = state
    return state


def decompose_warm(
    u: ComplexField,
    ctx: ModulationContext,
    alpha: float,
    *,
    t: float,
    previous: ModulationState | None,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> ModulationState:
    """Warm start from the last converged sample; re-guess once on divergence."""
    newton = {"tol": tol, "max_iter": max_iter}
    if ctx.warm is not None:
        state = decompose(u, ctx.warm, alpha, ctx=ctx, t=t, previous=previous, **newton)
        if state.converged:
            ctx.warm = state.params
            return state
    state = decompose(u, initial_guess(u, ctx), alpha, ctx=ctx, t=t, previous=previous, **newton)
    ctx.warm = state.params if state.converged else None
    return state


# ==================== reconstruction and initial data ====================


def push_forward(profile: ComplexField, grid: Grid, params: ModulationParams) -> ComplexField:
    """lam^{-d/2} profile((x - x_c)/lam) e^{i gamma} on `grid`, zero outside the y-box."""
    d = grid.d
    ygrid = profile.grid
    start = [(c - grid.L - xc) / params.lam for c, xc in zip(grid.center, params.x_c)]
    step = [grid.dx / params.lam] * d
    values = evaluate_lattice(profile, start, step, [grid.N] * d)
    for axis in range(d):
        y = start[axis] + step[axis] * np.arange(grid.N)
        inside = np.abs(y) < ygrid.L
        if not inside.all():
            shape = [1] * d
            shape[axis] = grid.N
            values = values * inside.reshape(shape)
    return ComplexField(grid, params.lam ** (-d / 2) * values * np.exp(1j * params.gamma))


def reconstruct(state: ModulationState, grid: Grid, ctx: ModulationContext) -> ComplexField:
    body = ctx.profile(state.b)
    if state.eps is not None:
        body = body + state.eps
    return push_forward(body, grid, state.params)


def project_orthogonal(h: ComplexField, b: float, ctx: ModulationContext) -> ComplexField:
    """Remove from h its components along the orthogonality directions."""
    dirs = ctx.directions(b)
    cv = ctx.ygrid.cell_volume
    gram = np.array([[real_pairing(fi, fk, cv) for fk in dirs] for fi in dirs])
    rhs = _residual_vector(dirs, h.values, cv)
    coef = np.linalg.solve(gram, rhs)
    return h.with_values(h.values - sum(c * f for c, f in zip(coef, dirs)))


def _eps0_field(spec: InitialDataSpec, ctx: ModulationContext) -> ComplexField:
    if spec.eps0 == "zero" or spec.eps0_amplitude == 0.0:
        return ctx.ygrid.zeros()
    bump = spec.eps0_amplitude * np.exp(-ctx.r2 / (2.0 * spec.eps0_width**2))
    raw = ComplexField(ctx.ygrid, np.broadcast_to(bump, ctx.ygrid.shape).astype(np.complex128))
    return project_orthogonal(raw, spec.b0, ctx)


def _log_lambda_bound(b: float, power: float) -> float:
    """log of exp(-(1/Gamma_b)^power), i.e. -exp(power*pi/b); -inf when it overflows."""
    with np.errstate(over="ignore"):
        return float(-np.exp(power * np.pi / b))


def build_initial_data(
    spec: InitialDataSpec,
    gs: GroundState | None,
    grid: Grid,
    *,
    alpha: float = 0.2,
    ctx: ModulationContext | None = None,
) -> tuple[ComplexField, InitialDataReport]:
    if not spec.lambda0 > 0:
        raise InvalidSpecError(f"lambda0 must be positive, got {spec.lambda0}")
    if not spec.b0 > 0:
        raise InvalidSpecError(f"b0 must be positive, got {spec.b0}")
    if spec.b0 >= B_LIMIT:
        raise BOutOfRangeError(f"b0 = {spec.b0} must be below {B_LIMIT}")
    ctx = ctx or ModulationContext(grid.d)
    if gs is not None and gs.grid.shape == ctx.ygrid.shape and gs.grid.L == ctx.ygrid.L:
        ctx.gs = gs

    eps0 = _eps0_field(spec, ctx)
    x0 = spec.x0 or grid.center
    params = ModulationParams(lam=spec.lambda0, b=spec.b0, x_c=tuple(x0), gamma=spec.gamma0)
    u0 = push_forward(ctx.profile(spec.b0) + eps0, grid, params)

    eps_l2 = float(np.sqrt(l2_norm_sq(eps0)))
    eps_w = weighted_eps_norm(eps0)
    gamma = gamma_b(spec.b0)
    log_bound = _log_lambda_bound(spec.b0, 0.8)
    E0 = energy(u0)
    P0 = momentum(u0)
    report = InitialDataReport(
        lambda0=spec.lambda0,
        b0=spec.b0,
        gamma_b0=gamma,
        eps0_l2=eps_l2,
        eps0_weighted=eps_w,
        alpha=alpha,
        b_positive=spec.b0 > 0,
        eps_plus_b_below_alpha=eps_l2 + spec.b0 < alpha,
        log_lambda0=float(np.log(spec.lambda0)),
        log_lambda_bound=log_bound,
        lambda_below_bound=bool(np.log(spec.lambda0) <= log_bound),
        eps_weighted_below_bound=bool(eps_w <= gamma**0.8),
        energy=E0,
        momentum=[float(v) for v in P0],
        energy_bounded=abs(E0) <= 1000.0,
        momentum_bounded=bool(np.all(np.abs(P0) <= 1000.0)),
    )
    return u0, report


# ==================== series ====================


def states_frame(records: Sequence[ModulationState], d: int | None = None) -> pd.DataFrame:
    if d is None:
        d = len(records[0].x_c) if records else 1
    rows = []
    for st in records:
        row = {"t": st.t, "s": st.s, "lambda": st.lam, "b": st.b}
        row.update({f"x_c_{j + 1}": st.x_c[j] for j in range(d)})
        row.update(
            gamma=st.gamma,
            eps_l2=st.eps_l2,
            eps_weighted=st.eps_weighted,
            residual_max=st.residual_max,
            valid=st.valid,
            status=st.status,
        )
        rows.append(row)
    columns = ["t", "s", "lambda", "b", *[f"x_c_{j + 1}" for j in range(d)], "gamma", "eps_l2", "eps_weighted", "residual_max", "valid", "status"]
    return pd.DataFrame(rows, columns=columns)


def series(records: Sequence[ModulationState], *, converged_only: bool = False) -> pd.DataFrame:
    """Valid samples with b_s and lambda_s/lambda by finite differences in s."""
    keep = [r for r in records if (r.converged if converged_only else r.valid)]
    if len(keep) < 3:
        raise InsufficientSamplesError(f"need at least 3 samples, got {len(keep)}")
    frame = states_frame(keep)
    s = frame["s"].to_numpy()
    if np.any(np.diff(s) <= 0):
        raise InsufficientSamplesError("rescaled time must increase strictly across samples")
    frame["b_s"] = np.gradient(frame["b"].to_numpy(), s)
    frame["lambda_s_over_lambda"] = np.gradient(np.log(frame["lambda"].to_numpy()), s)
    frame["minus_lambda_s_over_lambda"] = -frame["lambda_s_over_lambda"]
    return frame



def condition_table(d: int, lam: float, b_values: Sequence[float], grid: Grid | None = None) -> pd.DataFrame:
    """Condition number of the Newton matrix at eps = 0 for each b."""
    ctx = ModulationContext(d)
    grid = grid or make_grid(d, 10.0, 512 if d == 1 else 128)
    rows = []
    for b in b_values:
        params = ModulationParams(lam=lam, b=float(b), x_c=(0.0,) * d, gamma=0.0)
        u = push_forward(ctx.profile(float(b)), grid, params)
        rows.append({"b": float(b), "condition": float(np.linalg.cond(newton_matrix(u, params, ctx)))})
    return pd.DataFrame(rows, columns=["b", "condition"])
