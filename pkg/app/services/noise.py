"""
Spatially colored Wiener noise W(t, x) = sum_k phi_k(x) B_k(t).

phi_k are Gaussian bumps with closed-form derivatives of any order (Hermite
polynomials), so the coefficient fields of the rescaled equation

    beta_j = 2 sum_k d_j phi_k B_k
    c      = -sum_j (sum_k d_j phi_k B_k)^2 + i sum_k (Laplacian phi_k) B_k
    mu     = 1/2 sum_k phi_k^2

never need numerical differentiation.

Brownian paths live on a dyadic lattice t = i * dt_root * 2^-level. Level-0
increments and the midpoint (bridge) draws at finer levels are keyed on
(seed, level, index), so refining the step leaves every coarse node bitwise
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from math import comb
from typing import Iterable, Sequence

import numpy as np
import structlog
from numpy.polynomial.hermite import hermval

from app.core.errors import EmptyTimeGridError, OffGridTimeError, SimulationError
from app.services.grid_field import Grid

logger = structlog.get_logger(__name__)

MAX_LEVEL = 30
M_NORM_ORDER = 2


# ==================== phi family ====================


@dataclass(frozen=True, slots=True)
class PhiFamily:
    amplitudes: np.ndarray
    centers: np.ndarray
    widths: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.widths <= 0):
            raise SimulationError("bump widths must be positive", code="invalid-spec")
        if self.centers.ndim != 2 or self.centers.shape[0] != self.amplitudes.shape[0]:
            raise SimulationError("centers must have shape (K, d)", code="invalid-spec")

    @classmethod
    def from_bumps(
        cls, bumps: Iterable[tuple[float, Sequence[float], float]], d: int
    ) -> "PhiFamily":
        rows = list(bumps)
        amplitudes = np.array([float(a) for a, _, _ in rows], dtype=float)
        centers = np.array([list(c) for _, c, _ in rows], dtype=float).reshape(len(rows), d)
        widths = np.array([float(s) for _, _, s in rows], dtype=float)
        return cls(amplitudes, centers, widths)

    @property
    def K(self) -> int:
        return int(self.amplitudes.shape[0])

    @property
    def d(self) -> int:
        return int(self.centers.shape[1])

    def scaled(self, factor: float) -> "PhiFamily":
        return PhiFamily(self.amplitudes * factor, self.centers, self.widths)


def _gaussian_axis_derivative(x: np.ndarray, c: float, sigma: float, n: int) -> np.ndarray:
    """n-th derivative of exp(-(x-c)^2 / (2 sigma^2))."""
    z = (x - c) / (sigma * np.sqrt(2.0))
    coef = np.zeros(n + 1)
    coef[n] = 1.0
    scale = (-1.0 / (sigma * np.sqrt(2.0))) ** n
    return scale * hermval(z, coef) * np.exp(-(z**2))


def phi_derivative_at(
    phi: PhiFamily, coords: Sequence[np.ndarray], alpha: Sequence[int]
) -> np.ndarray:
    """d^alpha phi_k at the given (broadcastable) coordinates; shape (K, *broadcast)."""
    out = []
    for k in range(phi.K):
        term = phi.amplitudes[k]
        for axis, (x, n) in enumerate(zip(coords, alpha)):
            term = term * _gaussian_axis_derivative(
                x, phi.centers[k, axis], phi.widths[k], int(n)
            )
        out.append(np.broadcast_to(term, np.broadcast_shapes(*(np.shape(c) for c in coords))))
    if not out:
        shape = np.broadcast_shapes(*(np.shape(c) for c in coords))
        return np.zeros((0, *shape))
    return np.stack(out)


class PhiBasis:
    """phi_k derivatives sampled on one grid (physical coordinates), memoized."""

    def __init__(self, phi: PhiFamily, grid: Grid):
        if phi.d != grid.d:
            raise SimulationError("noise and grid dimensions differ", code="invalid-dimension")
        self.phi = phi
        self.grid = grid
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def derivative(self, alpha: Sequence[int]) -> np.ndarray:
        key = tuple(int(a) for a in alpha)
        if key not in self._cache:
            values = phi_derivative_at(self.phi, self.grid.physical_coords(), key)
            self._cache[key] = np.ascontiguousarray(
                np.broadcast_to(values, (self.phi.K, *self.grid.shape))
            )
        return self._cache[key]

    def combine(self, bvals: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
        """sum_k B_k d^alpha phi_k."""
        if self.phi.K == 0:
            return np.zeros(self.grid.shape)
        return np.tensordot(np.asarray(bvals, dtype=float), self.derivative(alpha), axes=1)


def _unit(d: int, j: int, order: int = 1) -> tuple[int, ...]:
    return tuple(order if i == j else 0 for i in range(d))


def _add(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    return tuple(x + y for x, y in zip(a, b))


def multi_indices(d: int, max_order: int) -> list[tuple[int, ...]]:
    return [a for a in product(range(max_order + 1), repeat=d) if sum(a) <= max_order]


# ==================== Brownian tree ====================


class BrownianTree:
    """Lazily sampled K-dimensional Brownian motion on a dyadic lattice."""

    def __init__(self, K: int, seed: int, dt_root: float):
        if seed < 0:
            raise SimulationError("seed must be non-negative", code="invalid-spec")
        if not dt_root > 0:
            raise EmptyTimeGridError("root step must be positive")
        self.K = int(K)
        self.seed = int(seed)
        self.dt_root = float(dt_root)
        self._level0: list[np.ndarray] = [np.zeros(self.K)]
        self._nodes: dict[tuple[int, int], np.ndarray] = {}

    @property
    def tick(self) -> float:
        return self.dt_root / 2.0**MAX_LEVEL

    def _normal(self, level: int, index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, level, index])
        return rng.standard_normal(self.K)

    def value(self, level: int, index: int) -> np.ndarray:
        while level > 0 and index % 2 == 0:
            level -= 1
            index //= 2
        if level == 0:
            while len(self._level0) <= index:
                n = len(self._level0) - 1
                step = np.sqrt(self.dt_root) * self._normal(0, n)
                self._level0.append(self._level0[-1] + step)
            return self._level0[index]
        key = (level, index)
        cached = self._nodes.get(key)
        if cached is not None:
            return cached
        left = self.value(level - 1, index // 2)
        right = self.value(level - 1, index // 2 + 1)
        h = self.dt_root / 2.0**level
        mid = 0.5 * (left + right) + np.sqrt(0.5 * h) * self._normal(level, index)
        self._nodes[key] = mid
        return mid

    def at_ticks(self, ticks: int) -> np.ndarray:
        if ticks < 0:
            raise OffGridTimeError(f"negative lattice time {ticks}")
        return self.value(MAX_LEVEL, int(ticks))

    def ticks_of(self, t: float) -> int:
        ticks = int(round(t / self.tick))
        if abs(ticks * self.tick - t) > max(1e-3 * self.tick, 8 * np.finfo(float).eps * abs(t)):
            raise OffGridTimeError(f"time {t!r} is not on the noise lattice")
        return ticks


@dataclass(slots=True)
class NoiseRealization:
    phi: PhiFamily | None
    times: np.ndarray
    seed: int
    tree: BrownianTree = field(repr=False)

    @property
    def K(self) -> int:
        return self.tree.K

    @property
    def bpaths(self) -> np.ndarray:
        """B_k(t_n) on the sampled time grid, shape (len(times), K)."""
        return np.stack([self.at(t) for t in self.times])

    def at(self, t: float) -> np.ndarray:
        return self.tree.at_ticks(self.tree.ticks_of(t))

    def at_ticks(self, ticks: int) -> np.ndarray:
        return self.tree.at_ticks(ticks)

    def require_phi(self) -> PhiFamily:
        if self.phi is None:
            raise SimulationError("noise realization has no phi family", code="invalid-spec")
        return self.phi


def sample_brownian(
    K: int,
    times: Sequence[float],
    seed: int,
    *,
    phi: PhiFamily | None = None,
    dt_root: float | None = None,
) -> NoiseRealization:
    grid_times = np.asarray(times, dtype=float)
    if grid_times.size == 0:
        raise EmptyTimeGridError("time grid is empty")
    if grid_times[0] != 0.0 or np.any(np.diff(grid_times) <= 0):
        raise EmptyTimeGridError("times must start at 0 and increase strictly")
    if phi is not None and phi.K != K:
        raise SimulationError(f"phi family has {phi.K} bumps, expected {K}", code="invalid-spec")
    root = dt_root if dt_root is not None else (grid_times[1] if grid_times.size > 1 else 1.0)
    tree = BrownianTree(K, seed, root)
    for t in grid_times:
        tree.ticks_of(t)
    return NoiseRealization(phi=phi, times=grid_times, seed=int(seed), tree=tree)


# ==================== fields ====================


@dataclass(frozen=True, slots=True)
class Coefficients:
    beta: tuple[np.ndarray, ...]
    c: np.ndarray
    mu: np.ndarray


def w_field(basis: PhiBasis, bvals: np.ndarray) -> np.ndarray:
    return basis.combine(bvals, (0,) * basis.grid.d)


def mu_field(basis: PhiBasis) -> np.ndarray:
    if basis.phi.K == 0:
        return np.zeros(basis.grid.shape)
    return 0.5 * np.sum(basis.derivative((0,) * basis.grid.d) ** 2, axis=0)


def coefficient_fields(basis: PhiBasis, bvals: np.ndarray) -> Coefficients:
    d = basis.grid.d
    g = [basis.combine(bvals, _unit(d, j)) for j in range(d)]
    lap = sum(basis.combine(bvals, _unit(d, j, 2)) for j in range(d))
    c = -sum(gj**2 for gj in g) + 1j * lap
    return Coefficients(beta=tuple(2.0 * gj for gj in g), c=np.asarray(c, dtype=np.complex128), mu=mu_field(basis))


def eval_W(noise: NoiseRealization, t: float, grid: Grid, basis: PhiBasis | None = None) -> np.ndarray:
    basis = basis or PhiBasis(noise.require_phi(), grid)
    return w_field(basis, noise.at(t))


def eval_coeffs(
    noise: NoiseRealization, t: float, grid: Grid, basis: PhiBasis | None = None
) -> Coefficients:
    basis = basis or PhiBasis(noise.require_phi(), grid)
    return coefficient_fields(basis, noise.at(t))


def rescaled_coefficient_sizes(
    phi: PhiFamily, bvals: np.ndarray, lam: float, x_c: Sequence[float], ygrid: Grid
) -> tuple[float, float]:
    """sup |lam * beta(lam*y + x_c)| and sup |lam^2 * c(lam*y + x_c)| on the y-grid."""
    d = ygrid.d
    coords = tuple(lam * y + xc for y, xc in zip(ygrid.coords(), x_c))
    if phi.K == 0:
        return 0.0, 0.0
    b = np.asarray(bvals, dtype=float)
    g = [np.tensordot(b, phi_derivative_at(phi, coords, _unit(d, j)), axes=1) for j in range(d)]
    lap = sum(np.tensordot(b, phi_derivative_at(phi, coords, _unit(d, j, 2)), axes=1) for j in range(d))
    beta_size = max(float(np.max(np.abs(2.0 * gj))) for gj in g)
    c_size = float(np.max(np.abs(-sum(gj**2 for gj in g) + 1j * lap)))
    return lam * beta_size, lam**2 * c_size


# ==================== M-norm ====================


@dataclass(frozen=True, slots=True)
class MNormBreakdown:
    beta: tuple[float, ...]
    c: float
    c_real: float
    c_imag: float

    @property
    def total(self) -> float:
        return float(sum(self.beta) + self.c)

    @property
    def max(self) -> float:
        return float(max((*self.beta, self.c), default=0.0))


def coefficient_m_norms(basis: PhiBasis, bvals: np.ndarray, order: int = M_NORM_ORDER) -> MNormBreakdown:
    """sup |x^a d^b f| over |a|, |b| <= order for f in {beta_j, c}."""
    d = basis.grid.d
    derivs = multi_indices(d, order)
    weights = [
        np.prod([x**p for x, p in zip(basis.grid.physical_coords(), a)], axis=0)
        for a in multi_indices(d, order)
    ]

    memo: dict[tuple[int, ...], np.ndarray] = {}

    def D(alpha: tuple[int, ...]) -> np.ndarray:
        if alpha not in memo:
            memo[alpha] = basis.combine(bvals, alpha)
        return memo[alpha]

    def sup_weighted(arr: np.ndarray) -> float:
        return max(float(np.max(np.abs(w * arr))) for w in weights)

    beta_norms = []
    for j in range(d):
        beta_norms.append(max(sup_weighted(2.0 * D(_add(b, _unit(d, j)))) for b in derivs))

    c_re_best = c_im_best = c_best = 0.0
    for b in derivs:
        re = np.zeros(basis.grid.shape)
        for j in range(d):
            ej = _unit(d, j)
            for gamma in product(*(range(n + 1) for n in b)):
                rest = tuple(x - y for x, y in zip(b, gamma))
                binom = np.prod([comb(n, k) for n, k in zip(b, gamma)])
                re = re - binom * D(_add(gamma, ej)) * D(_add(rest, ej))
        im = sum(D(_add(b, _unit(d, j, 2))) for j in range(d))
        c_re_best = max(c_re_best, sup_weighted(re))
        c_im_best = max(c_im_best, sup_weighted(im))
        c_best = max(c_best, sup_weighted(np.abs(re + 1j * im)))
    return MNormBreakdown(
        beta=tuple(beta_norms), c=c_best, c_real=c_re_best, c_imag=c_im_best
    )


def m_norm(phi: PhiFamily, bvals: np.ndarray, grid: Grid) -> float:
    return coefficient_m_norms(PhiBasis(phi, grid), bvals).max


@dataclass(frozen=True, slots=True)
class PathBoundReport:
    ok: bool
    worst: float
    worst_time: float
    bound: float


def check_path_bound(
    noise: NoiseRealization,
    horizon: float,
    bound: float,
    grid: Grid,
    basis: PhiBasis | None = None,
) -> PathBoundReport:
    """sup over step nodes t <= horizon of sum_j ||beta_j||_M + ||c||_M against `bound`."""
    if horizon > noise.times[-1] * (1 + 1e-12):
        raise OffGridTimeError(f"horizon {horizon} beyond last noise node {noise.times[-1]}")
    basis = basis or PhiBasis(noise.require_phi(), grid)
    worst, worst_t = 0.0, 0.0
    for t in noise.times[noise.times <= horizon * (1 + 1e-12)]:
        total = coefficient_m_norms(basis, noise.at(t)).total
        if total > worst:
            worst, worst_t = total, float(t)
    ok = worst <= bound
    if not ok:
        logger.info("path_bound_exceeded", seed=noise.seed, worst=worst, at=worst_t, bound=bound)
    return PathBoundReport(ok=ok, worst=worst, worst_time=worst_t, bound=float(bound))


@dataclass(frozen=True, slots=True)
class PathBoundCalibration:
    paths: int
    median_worst: float
    q90_worst: float
    bound: float
    rejected_fraction: float


def calibrate_path_bound(
    phi: PhiFamily,
    grid: Grid,
    times: np.ndarray,
    seeds: Iterable[int],
    factor: float = 3.0,
) -> PathBoundCalibration:
    """Worst M-norm per seed over `times`, and the rejection rate at C = factor * median."""
    basis = PhiBasis(phi, grid)
    dt_root = float(times[1] - times[0]) if len(times) > 1 else 1.0
    worst = np.array(
        [
            check_path_bound(
                sample_brownian(phi.K, times, seed, phi=phi, dt_root=dt_root), times[-1], np.inf, grid, basis
            ).worst
            for seed in seeds
        ]
    )
    if worst.size == 0:
        raise SimulationError("path bound calibration needs at least one seed")
    median = float(np.median(worst))
    bound = factor * median
    return PathBoundCalibration(
        paths=int(worst.size),
        median_worst=median,
        q90_worst=float(np.quantile(worst, 0.9)),
        bound=bound,
        rejected_fraction=float(np.mean(worst > bound)),
    )


def rescaled_coefficients(
    noise: NoiseRealization, t: float, lam: float, x_c: Sequence[float], ygrid: Grid
) -> tuple[float, float]:
    return rescaled_coefficient_sizes(noise.require_phi(), noise.at(t), lam, x_c, ygrid)
