import numpy as np
import pytest
from scipy.integrate import quad

from app.core.errors import FieldNotLocalizedError, GridError, InvalidDimensionError, NonPowerOfTwoError
from app.services.grid_field import (
    ComplexField,
    evaluate_lattice,
    field_from_function,
    gradient_norm_sq,
    h1_norm,
    inner,
    l2_norm_sq,
    make_grid,
    peak_position,
    spectral_gradient,
    spectral_interpolate,
    weighted_eps_norm,
)
from tests.conftest import Q1_MASS


def _gaussian(grid, width=1.0, shift=0.0):
    return field_from_function(grid, lambda x: np.exp(-((x - shift) ** 2) / (2 * width**2)), physical=True)


@pytest.mark.parametrize("N", [100, 8, 0])
def test_make_grid_rejects_bad_sizes(N):
    with pytest.raises(NonPowerOfTwoError):
        make_grid(1, 10.0, N)


def test_make_grid_rejects_dimension_and_width():
    with pytest.raises(InvalidDimensionError):
        make_grid(3, 10.0, 64)
    with pytest.raises(GridError):
        make_grid(1, 0.0, 64)
    with pytest.raises(InvalidDimensionError):
        make_grid(2, 10.0, 64, center=[0.0])


def test_ground_state_mass_matches_closed_form(q1d):
    assert l2_norm_sq(q1d) == pytest.approx(Q1_MASS, abs=1e-8)


def test_gradient_of_plane_wave_is_exact():
    grid = make_grid(1, 5.0, 64)
    k = 3 * np.pi / grid.L
    f = field_from_function(grid, lambda x: np.exp(1j * k * x))
    assert gradient_norm_sq(f) == pytest.approx(k**2 * 2 * grid.L, rel=1e-12)
    assert h1_norm(f) == pytest.approx(np.sqrt((1 + k**2) * 2 * grid.L), rel=1e-12)


def test_spectral_gradient_of_gaussian_2d():
    grid = make_grid(2, 10.0, 128)
    f = field_from_function(grid, lambda x, y: np.exp(-(x**2 + 2 * y**2)))
    gx, gy = spectral_gradient(f)
    x, y = grid.coords()
    base = np.exp(-(x**2 + 2 * y**2))
    assert np.max(np.abs(gx.values - (-2 * x * base))) < 1e-10
    assert np.max(np.abs(gy.values - (-4 * y * base))) < 1e-10


def test_inner_is_conjugate_linear_in_second_slot(grid1d):
    f = _gaussian(grid1d)
    g = f.scaled(1j)
    assert inner(f, g) == pytest.approx(-1j * l2_norm_sq(f))


def test_refine_reproduces_gaussian(grid1d):
    f = _gaussian(grid1d)
    fine = spectral_interpolate(f, make_grid(1, grid1d.L, 2 * grid1d.N))
    exact = _gaussian(fine.grid)
    assert np.max(np.abs(fine.values - exact.values)) < 1e-12


def test_zoom_recenters_in_physical_coordinates(grid1d):
    f = _gaussian(grid1d, width=0.5, shift=1.5)
    zoomed = spectral_interpolate(f, make_grid(1, 5.0, 512), center=[1.5], tol=1e-10)
    assert zoomed.grid.center == (1.5,)
    exact = _gaussian(zoomed.grid, width=0.5, shift=1.5)
    assert np.max(np.abs(zoomed.values - exact.values)) < 1e-10
    assert peak_position(zoomed) == pytest.approx((1.5,), abs=zoomed.grid.dx)


def test_zoom_refuses_unlocalized_field(grid1d):
    f = _gaussian(grid1d, width=5.0)
    with pytest.raises(FieldNotLocalizedError):
        spectral_interpolate(f, make_grid(1, 10.0, 512), tol=1e-8)


def test_interpolation_rejects_coarsening(grid1d):
    with pytest.raises(GridError):
        spectral_interpolate(_gaussian(grid1d), make_grid(1, grid1d.L, grid1d.N // 2))


def test_lattice_evaluation_hits_grid_values_and_trig_polynomials():
    grid = make_grid(1, np.pi, 32)
    f = field_from_function(grid, lambda x: np.cos(3 * x) + 0.5j * np.sin(5 * x))
    on_nodes = evaluate_lattice(f, [-grid.L], [grid.dx], [grid.N])
    assert np.max(np.abs(on_nodes - f.values)) < 1e-12

    pts = -1.0 + 0.013 * np.arange(150)
    off = evaluate_lattice(f, [-1.0], [0.013], [150])
    assert np.max(np.abs(off - (np.cos(3 * pts) + 0.5j * np.sin(5 * pts)))) < 1e-12


def test_weighted_norm_of_zero_and_of_ground_state(grid1d, q1d):
    assert weighted_eps_norm(grid1d.zeros()) == 0.0

    def density(y):
        q = 3**0.25 / np.sqrt(np.cosh(2 * y))
        dq = -q * np.tanh(2 * y)
        return dq**2 + q**2 * np.exp(-abs(y))

    reference = 2 * quad(density, 0, 20, limit=200)[0]
    # the e^{-|y|} kink at y = 0 leaves the grid sum an O(dx^2) error, about 1e-3 relative at dx = 0.078
    assert weighted_eps_norm(q1d) == pytest.approx(reference, rel=5e-3)


def test_field_shape_must_match_grid(grid1d):
    with pytest.raises(GridError):
        ComplexField(grid1d, np.zeros(10, dtype=complex))
