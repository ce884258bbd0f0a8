"""
Ground state Q of  Delta Q - Q + Q^{1+4/d} = 0, the chirped profile family
Qb = Q exp(-i b |y|^2 / 4), the scaling generator Lambda = d/2 + y.grad and
Gamma_b = exp(-pi/b).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd
import structlog
from scipy.integrate import solve_ivp
from scipy.special import k0, k1

from app.core.errors import (
    BOutOfRangeError,
    InvalidDimensionError,
    NonPositiveBError,
    ShootingBracketError,
    SolverDisagreementError,
)
from app.services.grid_field import (
    ComplexField,
    Grid,
    make_grid,
    spectral_gradient,
    to_fourier,
)

logger = structlog.get_logger(__name__)

B_LIMIT = 0.5

SHOOT_BRACKET = (2.0, 2.5)
SHOOT_START = 1e-4
SHOOT_R_MAX = 12.0
SHOOT_R_MATCH = 8.0
BISECT_WIDTH = 1e-12
CROSS_CHECK_TOL = 1e-4
LAPLACIAN_STEP = 1e-4


@dataclass(frozen=True, slots=True)
class GroundState:
    grid: Grid
    q: np.ndarray
    dq: np.ndarray
    mass: float
    gradnorm: float
    central: float
    radial: "RadialProfile | None" = None

    @property
    def d(self) -> int:
        return self.grid.d

    def field(self) -> ComplexField:
        return ComplexField(self.grid, self.q.astype(np.complex128))

    def radius_sq_moment(self) -> float:
        """int |y|^2 Q^2."""
        r2 = sum(c**2 for c in self.grid.coords())
        return float(np.sum(r2 * self.q**2) * self.grid.cell_volume)

    def residual(self) -> float:
        """sup |Delta Q - Q + Q^{1+4/d}| on the grid."""
        if self.d == 1:
            y = self.grid.coords()[0]
            lap = self.q * (1.0 - 3.0 * _sech(2.0 * y) ** 2)
        elif self.radial is not None:
            lap = self.radial.laplacian(np.broadcast_to(self.grid.radius(), self.grid.shape))
        else:
            spectrum = to_fourier(self.field())
            lap = np.real(np.fft.ifftn(-self.grid.k_squared() * spectrum))
        return float(np.max(np.abs(lap - self.q + self.q ** (1 + 4 / self.d))))


@dataclass(frozen=True, slots=True)
class ProfileQb:
    b: float
    field: ComplexField


def _sech(z: np.ndarray) -> np.ndarray:
    a = np.exp(-2.0 * np.abs(z))
    return 2.0 * np.sqrt(a) / (1.0 + a)


# ==================== d = 1 ====================


def ground_state_1d(grid: Grid) -> GroundState:
    if grid.d != 1:
        raise InvalidDimensionError("ground_state_1d needs a 1d grid")
    y = grid.coords()[0]
    q = 3.0**0.25 * np.sqrt(_sech(2.0 * y))
    dq = -q * np.tanh(2.0 * y)
    return GroundState(
        grid=grid,
        q=q,
        dq=dq,
        mass=float(np.sum(q**2) * grid.dx),
        gradnorm=float(np.sum(dq**2) * grid.dx),
        central=3.0**0.25,
    )


# ==================== d = 2 (shooting) ====================


def _rhs(r: float, y: np.ndarray) -> list[float]:
    return [y[1], -y[1] / r + y[0] - y[0] ** 3]


def _start(a: float) -> list[float]:
    e = SHOOT_START
    return [a + (a - a**3) * e**2 / 4.0, (a - a**3) * e / 2.0]


def _crossed_zero(r, y):
    return y[0]


_crossed_zero.terminal = True
_crossed_zero.direction = -1


def _turned_up(r, y):
    return y[1]


_turned_up.terminal = True
_turned_up.direction = 1


def _overshoots(a: float, r_max: float) -> bool:
    """True when Q(0) = a is above the decaying solution."""
    sol = solve_ivp(
        _rhs,
        (SHOOT_START, r_max),
        _start(a),
        method="DOP853",
        rtol=1e-12,
        atol=1e-14,
        events=(_crossed_zero, _turned_up),
    )
    if sol.t_events[0].size:
        return True
    if sol.t_events[1].size:
        return False
    q, dq = sol.y[:, -1]
    r = sol.t[-1]
    # decaying branch behaves like K0, with dq/q -> -(1 + 1/(2r))
    return dq + q * (1.0 + 0.5 / r) < 0


@dataclass(frozen=True, slots=True)
class RadialProfile:
    central: float
    r_match: float
    tail_coeff: float
    solution: object

    def __call__(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = np.asarray(r, dtype=float)
        q = np.empty_like(r)
        dq = np.empty_like(r)
        a = self.central
        near = r < SHOOT_START
        tail = r > self.r_match
        mid = ~(near | tail)
        q[near] = a + (a - a**3) * r[near] ** 2 / 4.0
        dq[near] = (a - a**3) * r[near] / 2.0
        if mid.any():
            values = self.solution(r[mid])
            q[mid], dq[mid] = values[0], values[1]
        q[tail] = self.tail_coeff * k0(r[tail])
        dq[tail] = -self.tail_coeff * k1(r[tail])
        return q, dq

    def laplacian(self, r: np.ndarray) -> np.ndarray:
        """Q'' + Q'/r from the radial solution; Q'' by central differences of the dense Q'."""
        r = np.asarray(r, dtype=float)
        lap = np.empty_like(r)
        a = self.central
        near = r < SHOOT_START
        tail = r > self.r_match
        mid = ~(near | tail)
        lap[near] = a - a**3
        if mid.any():
            rm = r[mid]
            h = LAPLACIAN_STEP
            d2q = (self.solution(rm + h)[1] - self.solution(rm - h)[1]) / (2.0 * h)
            lap[mid] = d2q + self.solution(rm)[1] / rm
        # K0'' + K0'/r = K0
        lap[tail] = self.tail_coeff * k0(r[tail])
        return lap


@lru_cache(maxsize=4)
def townes_profile(r_max: float = SHOOT_R_MAX, r_match: float = SHOOT_R_MATCH) -> RadialProfile:
    """Shooting on Q(0) with bisection down to BISECT_WIDTH; K0 tail past r_match."""
    lo, hi = SHOOT_BRACKET
    if _overshoots(lo, r_max) or not _overshoots(hi, r_max):
        raise ShootingBracketError(f"Q(0) bracket {SHOOT_BRACKET} does not straddle the ground state")
    iterations = 0
    while hi - lo > BISECT_WIDTH:
        mid = 0.5 * (lo + hi)
        if _overshoots(mid, r_max):
            hi = mid
        else:
            lo = mid
        iterations += 1
    a = 0.5 * (lo + hi)
    sol = solve_ivp(
        _rhs,
        (SHOOT_START, r_match),
        _start(a),
        method="DOP853",
        rtol=1e-12,
        atol=1e-14,
        dense_output=True,
    )
    q_match = float(sol.y[0, -1])
    logger.debug("townes_shooting_done", central=a, iterations=iterations)
    return RadialProfile(
        central=a,
        r_match=r_match,
        tail_coeff=q_match / float(k0(r_match)),
        solution=sol.sol,
    )


def petviashvili_2d(
    L: float = 16.0, N: int = 256, gamma: float = 1.5, tol: float = 1e-13, max_iter: int = 1000
) -> tuple[Grid, np.ndarray]:
    """Renormalized fixed-point iteration for -Delta Q + Q = Q^3 on a periodic box."""
    grid = make_grid(2, L, N)
    symbol = 1.0 + grid.k_squared()
    q = 2.2 * np.exp(-(grid.radius() ** 2) / 2.0)
    for _ in range(max_iter):
        q_hat = np.fft.fftn(q)
        n_hat = np.fft.fftn(q**3)
        stabilizer = np.real(np.vdot(q_hat, symbol * q_hat)) / np.real(np.vdot(q_hat, n_hat))
        q_next = np.real(np.fft.ifftn(stabilizer**gamma * n_hat / symbol))
        change = float(np.max(np.abs(q_next - q)))
        q = q_next
        if change < tol:
            break
    return grid, q


@lru_cache(maxsize=1)
def _petviashvili_mass() -> float:
    grid, q = petviashvili_2d()
    return float(np.sum(q**2) * grid.cell_volume)


def ground_state_2d(grid: Grid, *, cross_check: bool = True) -> GroundState:
    if grid.d != 2:
        raise InvalidDimensionError("ground_state_2d needs a 2d grid")
    profile = townes_profile()
    q, dq = profile(np.broadcast_to(grid.radius(), grid.shape))
    mass = float(np.sum(q**2) * grid.cell_volume)
    if cross_check:
        other = _petviashvili_mass()
        radial_mass = _radial_mass(profile)
        if abs(other - radial_mass) > CROSS_CHECK_TOL:
            logger.error("ground_state_disagreement", shooting=radial_mass, iteration=other)
            raise SolverDisagreementError(
                f"ground-state mass disagreement: shooting {radial_mass:.8f} vs iteration {other:.8f}"
            )
    return GroundState(
        grid=grid,
        q=q,
        dq=dq,
        mass=mass,
        gradnorm=float(np.sum(dq**2) * grid.cell_volume),
        central=profile.central,
        radial=profile,
    )


def _radial_mass(profile: RadialProfile, r_max: float = 30.0, n: int = 30001) -> float:
    r = np.linspace(0.0, r_max, n)
    q, _ = profile(r)
    return float(np.trapezoid(2.0 * np.pi * r * q**2, r))


def ground_state_for(grid: Grid) -> GroundState:
    """Ground state sampled on the grid's relative coordinates, cached per (d, L, N)."""
    return _ground_state_cached(grid.d, grid.L, grid.N)


@lru_cache(maxsize=32)
def _ground_state_cached(d: int, L: float, N: int) -> GroundState:
    grid = make_grid(d, L, N)
    return ground_state_1d(grid) if d == 1 else ground_state_2d(grid)


def radial_table(d: int, r_max: float = 12.0, n: int = 1201) -> pd.DataFrame:
    r = np.linspace(0.0, r_max, n)
    return pd.DataFrame({"r": r, "Q": q_radial(d, r)})


# ==================== profile family ====================


def qb_values(gs: GroundState, b: float) -> np.ndarray:
    if abs(b) >= B_LIMIT:
        raise BOutOfRangeError(f"|b| = {abs(b)} must be below {B_LIMIT}")
    if b == 0.0:
        return gs.q.astype(np.complex128)
    r2 = sum(c**2 for c in gs.grid.coords())
    return gs.q * np.exp(-0.25j * b * r2)


def qb_profile(b: float, grid: Grid) -> ProfileQb:
    gs = ground_state_for(grid)
    return ProfileQb(b=float(b), field=ComplexField(gs.grid, qb_values(gs, b)))


def apply_lambda(f: ComplexField, power: int = 1) -> ComplexField:
    """Lambda f = (d/2) f + y.grad f with y relative to the box center."""
    if power not in (1, 2):
        raise ValueError("power must be 1 or 2")
    out = f
    for _ in range(power):
        grads = spectral_gradient(out)
        values = 0.5 * f.grid.d * out.values
        for y, g in zip(f.grid.coords(), grads):
            values = values + y * g.values
        out = out.with_values(values)
    return out


def gamma_b(b: float) -> float:
    if not b > 0:
        raise NonPositiveBError(f"Gamma_b needs b > 0, got {b}")
    return float(np.exp(-np.pi / b))


def q_radial(d: int, r: np.ndarray) -> np.ndarray:
    """Q at distance r from its center."""
    r = np.abs(np.asarray(r, dtype=float))
    if d == 1:
        return 3.0**0.25 * np.sqrt(_sech(2.0 * r))
    if d == 2:
        return townes_profile()(r)[0]
    raise InvalidDimensionError(f"dimension must be 1 or 2, got {d}")


def pseudo_conformal(grid: Grid, t: float) -> ComplexField:
    """S(t, x) = |t|^{-d/2} Q(x/t) exp(-i/t + i|x|^2/(4t)) for t < 0, blowing up at t = 0."""
    if not t < 0:
        raise ValueError("the explicit solution is defined for t < 0")
    d = grid.d
    x = grid.physical_coords()
    r2 = sum(c**2 for c in x)
    r = np.sqrt(np.broadcast_to(r2, grid.shape))
    values = abs(t) ** (-d / 2) * q_radial(d, r / abs(t)) * np.exp(-1j / t + 1j * r2 / (4.0 * t))
    return ComplexField(grid, np.broadcast_to(values, grid.shape).astype(np.complex128))
