"""
Periodic-grid complex fields: construction, norms, spectral derivatives and
trigonometric interpolation.

Conventions: the box is [center - L, center + L)^d sampled with N points per
axis (x_j = center - L + j*dx, dx = 2L/N); wavenumbers are k = pi*n/L with
n in numpy's fftfreq order, i.e. {-N/2, ..., N/2 - 1}. Arrays use "ij"
indexing in 2d.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.signal import czt

from app.core.errors import (
    FieldNotLocalizedError,
    GridError,
    InvalidDimensionError,
    NonPowerOfTwoError,
)

MIN_POINTS = 16


@dataclass(frozen=True, slots=True)
class Grid:
    d: int
    L: float
    N: int
    center: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.center:
            object.__setattr__(self, "center", (0.0,) * self.d)

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.dx**self.d

    @property
    def size(self) -> int:
        return self.N**self.d

    def axis(self) -> np.ndarray:
        """Coordinates relative to the box center along one axis."""
        return _axis(self.N, self.L)

    def coords(self) -> tuple[np.ndarray, ...]:
        """Relative (y-type) coordinates, one broadcastable array per axis."""
        return _mesh(self.N, self.L, self.d)

    def physical_coords(self) -> tuple[np.ndarray, ...]:
        return tuple(c + x0 for c, x0 in zip(self.coords(), self.center))

    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c**2 for c in self.coords()))

    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        return _kmesh(self.N, self.L, self.d)

    def k_squared(self) -> np.ndarray:
        return _k_squared(self.N, self.L, self.d)

    def recentered(self, center: Sequence[float]) -> "Grid":
        return replace(self, center=tuple(float(c) for c in center))

    def zeros(self) -> "ComplexField":
        return ComplexField(self, np.zeros(self.shape, dtype=np.complex128))


@lru_cache(maxsize=64)
def _axis(N: int, L: float) -> np.ndarray:
    ax = -L + (2.0 * L / N) * np.arange(N)
    ax.setflags(write=False)
    return ax


@lru_cache(maxsize=64)
def _mesh(N: int, L: float, d: int) -> tuple[np.ndarray, ...]:
    ax = _axis(N, L)
    if d == 1:
        return (ax,)
    return tuple(np.meshgrid(ax, ax, indexing="ij", sparse=True))


@lru_cache(maxsize=64)
def _k_axis(N: int, L: float) -> np.ndarray:
    k = np.fft.fftfreq(N, d=1.0 / N) * (np.pi / L)
    k.setflags(write=False)
    return k


@lru_cache(maxsize=64)
def _kmesh(N: int, L: float, d: int) -> tuple[np.ndarray, ...]:
    k = _k_axis(N, L)
    if d == 1:
        return (k,)
    return tuple(np.meshgrid(k, k, indexing="ij", sparse=True))


@lru_cache(maxsize=64)
def _k_squared(N: int, L: float, d: int) -> np.ndarray:
    k2 = sum(k**2 for k in _kmesh(N, L, d))
    k2 = np.broadcast_to(k2, (N,) * d).copy()
    k2.setflags(write=False)
    return k2


@dataclass(frozen=True, slots=True)
class ComplexField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != self.grid.shape:
            raise GridError(
                f"field has shape {self.values.shape}, grid expects {self.grid.shape}"
            )

    def with_values(self, values: np.ndarray) -> "ComplexField":
        return ComplexField(self.grid, np.asarray(values, dtype=np.complex128))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __add__(self, other: "ComplexField") -> "ComplexField":
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ComplexField") -> "ComplexField":
        return self.with_values(self.values - other.values)

    def scaled(self, factor: complex | np.ndarray) -> "ComplexField":
        return self.with_values(self.values * factor)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def make_grid(
    d: int, L: float, N: int, center: Sequence[float] | None = None
) -> Grid:
    if d not in (1, 2):
        raise InvalidDimensionError(f"dimension must be 1 or 2, got {d}")
    if not _is_power_of_two(int(N)) or N < MIN_POINTS:
        raise NonPowerOfTwoError(
            f"N must be a power of two >= {MIN_POINTS}, got {N}"
        )
    if not L > 0:
        raise GridError(f"half-width L must be positive, got {L}")
    c = tuple(float(v) for v in center) if center is not None else (0.0,) * d
    if len(c) != d:
        raise InvalidDimensionError(f"center has {len(c)} components for d={d}")
    return Grid(d=d, L=float(L), N=int(N), center=c)


def field_from_function(grid: Grid, fn, *, physical: bool = False) -> ComplexField:
    """Sample fn(*coords) on the grid (relative coordinates unless physical)."""
    coords = grid.physical_coords() if physical else grid.coords()
    values = np.broadcast_to(fn(*coords), grid.shape).astype(np.complex128)
    return ComplexField(grid, values)


# ==================== norms and pairings ====================


def l2_norm_sq(f: ComplexField) -> float:
    v = f.values
    return float(np.sum(v.real**2 + v.imag**2) * f.grid.cell_volume)


def inner(f: ComplexField, g: ComplexField) -> complex:
    """<f, g> = sum f * conj(g) dx^d."""
    return complex(np.vdot(g.values, f.values) * f.grid.cell_volume)


def real_pairing(f: np.ndarray, eps: np.ndarray, cell_volume: float) -> float:
    """Re sum f * conj(eps) dx^d on raw arrays."""
    return float(np.real(np.vdot(eps, f)) * cell_volume)


# ==================== spectral calculus ====================


def to_fourier(f: ComplexField) -> np.ndarray:
    return np.fft.fftn(f.values)


def from_fourier(grid: Grid, spectrum: np.ndarray) -> ComplexField:
    return ComplexField(grid, np.fft.ifftn(spectrum))


def spectral_gradient(f: ComplexField) -> tuple[ComplexField, ...]:
    spectrum = to_fourier(f)
    return tuple(
        ComplexField(f.grid, np.fft.ifftn(1j * k * spectrum))
        for k in f.grid.wavenumbers()
    )


def gradient_norm_sq(f: ComplexField) -> float:
    """sum_j ||d_j f||^2 via Parseval, without building the gradient fields."""
    spectrum = to_fourier(f)
    n_total = f.grid.size
    return float(
        np.sum(f.grid.k_squared() * np.abs(spectrum) ** 2)
        * f.grid.cell_volume
        / n_total
    )


def h1_norm(f: ComplexField) -> float:
    return float(np.sqrt(l2_norm_sq(f) + gradient_norm_sq(f)))


def weighted_eps_norm(
    eps: ComplexField,
    lam: float | None = None,
    x_c: Sequence[float] | None = None,
) -> float:
    """sum (|grad eps|^2 + |eps|^2 e^{-|y|}) dy^d on the y-grid carried by eps.

    `lam` and `x_c` are accepted for call-site symmetry; the y-grid already
    encodes the rescaling.
    """
    weight = np.exp(-eps.grid.radius())
    v = eps.values
    local = np.sum((v.real**2 + v.imag**2) * weight) * eps.grid.cell_volume
    return float(gradient_norm_sq(eps) + local)


# ==================== interpolation ====================


def _split_nyquist(spectrum: np.ndarray) -> np.ndarray:
    """Centered coefficients c_n, n = -N/2..N/2 on every axis, Nyquist halved."""
    coeffs = np.fft.fftshift(spectrum)
    for axis in range(coeffs.ndim):
        head = np.take(coeffs, [0], axis=axis) * 0.5
        body = np.concatenate([head, np.take(coeffs, range(1, coeffs.shape[axis]), axis=axis)], axis=axis)
        coeffs = np.concatenate([body, head], axis=axis)
    return coeffs


def centered_coefficients(f: ComplexField) -> np.ndarray:
    return _split_nyquist(np.fft.fftn(f.values)) / f.grid.size


def evaluate_lattice(
    f: ComplexField,
    start: Sequence[float],
    step: Sequence[float],
    count: Sequence[int],
    coeffs: np.ndarray | None = None,
) -> np.ndarray:
    """Evaluate the trigonometric interpolant of f at start + m*step per axis.

    Coordinates are physical. Uses one chirp-z transform per axis, so the cost
    is O((N + M) log(N + M)) instead of O(N*M). Pass `coeffs` from
    centered_coefficients(f) to skip the forward transform on repeated calls.
    """
    grid = f.grid
    N, L = grid.N, grid.L
    if coeffs is None:
        coeffs = centered_coefficients(f)
    n_prime = np.arange(N + 1)
    for axis in range(grid.d):
        x0 = grid.center[axis] - L
        offset = float(start[axis]) - x0
        h = float(step[axis])
        m = int(count[axis])
        shape = [1] * grid.d
        shape[axis] = N + 1
        pre = np.exp(1j * np.pi * n_prime * offset / L).reshape(shape)
        w = np.exp(1j * np.pi * h / L)
        coeffs = czt(coeffs * pre, m=m, w=w, a=1.0, axis=axis)
        shape[axis] = m
        post = np.exp(-1j * np.pi * (N / 2) * (offset + h * np.arange(m)) / L)
        coeffs = coeffs * post.reshape(shape)
    return coeffs


def _periodic_offset(a: float, b: float, L: float) -> float:
    """a - b wrapped into [-L, L)."""
    return (a - b + L) % (2.0 * L) - L


def spectral_interpolate(
    f: ComplexField,
    new_grid: Grid,
    center: Sequence[float] | None = None,
    *,
    tol: float = 1e-12,
) -> ComplexField:
    """Trigonometric interpolation of f onto new_grid recentered at `center`.

    The target must be at least as fine as the source and no larger. When the
    target box is smaller, the part of f it drops must be below `tol` relative
    to max|f|, otherwise FieldNotLocalizedError is raised.
    """
    old = f.grid
    target = new_grid.recentered(center) if center is not None else new_grid
    if target.d != old.d:
        raise GridError("interpolation cannot change the dimension")
    if target.dx > old.dx * (1 + 1e-12):
        raise GridError(f"target dx {target.dx} coarser than source dx {old.dx}")
    if target.L > old.L * (1 + 1e-12):
        raise GridError(f"target half-width {target.L} exceeds source {old.L}")

    if any(abs(c_new - c_old) > old.L for c_new, c_old in zip(target.center, old.center)):
        raise GridError("new center lies outside the source box")
    shift = [
        _periodic_offset(c_new, c_old, old.L)
        for c_new, c_old in zip(target.center, old.center)
    ]

    if np.isclose(target.L, old.L, rtol=1e-14, atol=0.0) and target.N % old.N == 0:
        return _zero_pad_shift(f, target, shift)

    _check_localized(f, target, shift, tol)
    start = [c - target.L for c in target.center]
    values = evaluate_lattice(f, start, [target.dx] * old.d, [target.N] * old.d)
    return ComplexField(target, values)


def _zero_pad_shift(f: ComplexField, target: Grid, shift: Sequence[float]) -> ComplexField:
    old = f.grid
    N, M = old.N, target.N
    coeffs = _split_nyquist(np.fft.fftn(f.values)) / old.size
    n = np.arange(-N // 2, N // 2 + 1)
    for axis, s in enumerate(shift):
        shape = [1] * old.d
        shape[axis] = N + 1
        coeffs = coeffs * np.exp(1j * np.pi * n * s / old.L).reshape(shape)
    spectrum = np.zeros(target.shape, dtype=np.complex128)
    idx = np.mod(n, M)
    np.add.at(spectrum, np.ix_(*([idx] * old.d)), coeffs)
    return ComplexField(target, np.fft.ifftn(spectrum) * target.size)


def _check_localized(f: ComplexField, target: Grid, shift: Sequence[float], tol: float) -> None:
    peak = float(np.max(np.abs(f.values)))
    if peak == 0.0:
        return
    outside = np.zeros(f.grid.shape, dtype=bool)
    for axis, (coord, s) in enumerate(zip(f.grid.coords(), shift)):
        rel = np.abs((coord - s + f.grid.L) % (2.0 * f.grid.L) - f.grid.L)
        outside = outside | np.broadcast_to(rel >= target.L - target.dx, f.grid.shape)
    if not outside.any():
        return
    dropped = float(np.max(np.abs(f.values[outside]))) / peak
    if dropped > tol:
        raise FieldNotLocalizedError(
            f"field amplitude {dropped:.3e} (relative) outside the target box exceeds {tol:.1e}"
        )


def boundary_amplitude(f: ComplexField, band: int = 2) -> float:
    """max|f| on the outer `band` cells of the box, relative to max|f|."""
    peak = float(np.max(np.abs(f.values)))
    if peak == 0.0:
        return 0.0
    mask = np.zeros(f.grid.shape, dtype=bool)
    for axis in range(f.grid.d):
        sl = [slice(None)] * f.grid.d
        sl[axis] = np.r_[0:band, f.grid.N - band : f.grid.N]
        mask[tuple(sl)] = True
    return float(np.max(np.abs(f.values[mask]))) / peak


def peak_position(f: ComplexField) -> tuple[float, ...]:
    """Physical coordinates of the grid point where |f| is largest."""
    idx = np.unravel_index(int(np.argmax(np.abs(f.values))), f.grid.shape)
    return tuple(c - f.grid.L + i * f.grid.dx for c, i in zip(f.grid.center, idx))
