import numpy as np
import pytest

from app.core.errors import EmptyTimeGridError, OffGridTimeError
from app.services.grid_field import ComplexField, field_from_function, make_grid, spectral_gradient
from app.services.noise import (
    BrownianTree,
    PhiBasis,
    PhiFamily,
    calibrate_path_bound,
    check_path_bound,
    coefficient_fields,
    eval_W,
    m_norm,
    phi_derivative_at,
    rescaled_coefficient_sizes,
    sample_brownian,
    w_field,
)


@pytest.fixture
def phi1():
    return PhiFamily.from_bumps([(0.7, [0.5], 1.5), (0.3, [-2.0], 0.8)], d=1)


def test_refinement_keeps_shared_nodes_bitwise():
    dt = 0.01
    coarse = sample_brownian(3, dt * np.arange(101), seed=11, dt_root=dt)
    fine = sample_brownian(3, 0.5 * dt * np.arange(201), seed=11, dt_root=dt)
    assert np.array_equal(coarse.bpaths, fine.bpaths[::2])


def test_midpoints_differ_from_linear_interpolation():
    tree = BrownianTree(1, seed=3, dt_root=1.0)
    mid = tree.at_ticks(tree.ticks_of(0.5))
    assert mid[0] != pytest.approx(0.5 * tree.at_ticks(tree.ticks_of(1.0))[0], abs=1e-12)


def test_unit_time_variance():
    samples = np.array([sample_brownian(1, [0.0, 1.0], seed=s).at(1.0)[0] for s in range(10_000)])
    assert samples.var() == pytest.approx(1.0, abs=0.05)
    assert abs(samples.mean()) < 0.05


def test_seed_zero_start_and_errors():
    noise = sample_brownian(2, [0.0, 0.1, 0.2], seed=0)
    assert np.array_equal(noise.at(0.0), np.zeros(2))
    with pytest.raises(OffGridTimeError):
        noise.at(0.1 / 3)
    with pytest.raises(EmptyTimeGridError):
        sample_brownian(2, [], seed=0)
    with pytest.raises(EmptyTimeGridError):
        sample_brownian(2, [0.0, 0.2, 0.1], seed=0)


def test_phi_derivatives_match_finite_differences(phi1):
    x = np.linspace(-4, 4, 81)
    h = 1e-5
    d1 = phi_derivative_at(phi1, (x,), (1,))
    fd = (phi_derivative_at(phi1, (x + h,), (0,)) - phi_derivative_at(phi1, (x - h,), (0,))) / (2 * h)
    assert np.max(np.abs(d1 - fd)) < 1e-8
    d2 = phi_derivative_at(phi1, (x,), (2,))
    fd2 = (phi_derivative_at(phi1, (x + h,), (1,)) - phi_derivative_at(phi1, (x - h,), (1,))) / (2 * h)
    assert np.max(np.abs(d2 - fd2)) < 1e-8


def test_w_field_is_linear_in_b(phi1, grid1d):
    basis = PhiBasis(phi1, grid1d)
    b1, b2 = np.array([0.3, -1.2]), np.array([2.0, 0.4])
    assert np.allclose(w_field(basis, b1 + b2), w_field(basis, b1) + w_field(basis, b2), atol=1e-14)


def test_coefficients_reproduce_conjugated_laplacian(phi1):
    """e^{-iW} Delta (e^{iW} u) = Delta u + i beta . grad u + c u."""
    grid = make_grid(1, 20.0, 1024)
    basis = PhiBasis(phi1, grid)
    bvals = np.array([0.8, -0.5])
    W = w_field(basis, bvals)
    u = field_from_function(grid, lambda x: np.exp(-(x**2)) * (1 + 0.3j * x))
    X = u.with_values(np.exp(1j * W) * u.values)

    def laplacian(f: ComplexField) -> np.ndarray:
        return np.fft.ifft(-grid.k_squared() * np.fft.fft(f.values))

    coeffs = coefficient_fields(basis, bvals)
    (du,) = spectral_gradient(u)
    rhs = laplacian(u) + 1j * coeffs.beta[0] * du.values + coeffs.c * u.values
    assert np.max(np.abs(np.exp(-1j * W) * laplacian(X) - rhs)) < 1e-8


def test_eval_w_uses_the_realization(phi1, grid1d):
    noise = sample_brownian(phi1.K, [0.0, 0.5, 1.0], seed=5, phi=phi1)
    assert np.array_equal(eval_W(noise, 1.0, grid1d), w_field(PhiBasis(phi1, grid1d), noise.at(1.0)))


def test_m_norm_converges_with_grid():
    phi = PhiFamily.from_bumps([(1.0, [0.0], 1.0)], d=1)
    coarse = m_norm(phi, np.array([1.0]), make_grid(1, 10.0, 256))
    dense = m_norm(phi, np.array([1.0]), make_grid(1, 10.0, 2048))
    assert coarse == pytest.approx(dense, rel=0.05)
    assert coarse > 0


def test_path_bound_accepts_and_rejects(phi1, grid1d):
    noise = sample_brownian(phi1.K, 0.01 * np.arange(51), seed=2, phi=phi1, dt_root=0.01)
    loose = check_path_bound(noise, 0.5, 1e6, grid1d)
    assert loose.ok and loose.worst > 0
    tight = check_path_bound(noise, 0.5, loose.worst / 2, grid1d)
    assert not tight.ok
    assert tight.worst == loose.worst
    with pytest.raises(OffGridTimeError):
        check_path_bound(noise, 0.75, 1.0, grid1d)


def test_rescaled_sizes_shrink_with_lambda(phi1):
    ygrid = make_grid(1, 10.0, 256)
    bvals = np.array([1.0, 1.0])
    big = rescaled_coefficient_sizes(phi1, bvals, 0.1, (0.0,), ygrid)
    small = rescaled_coefficient_sizes(phi1, bvals, 0.01, (0.0,), ygrid)
    assert small[0] < big[0] and small[1] < big[1]


def test_path_bound_calibration_rejects_few_paths(fixture_json):
    spec = fixture_json("path_bound.json")
    d = spec["d"]
    phi = PhiFamily.from_bumps([tuple(b) for b in spec["bumps"]], d).scaled(spec["amplitude"])
    grid = make_grid(d, spec["L"], spec["bound_grid_N"])
    n_nodes = int(round(spec["horizon"] / spec["dt0"])) + 1
    seeds = range(spec["base_seed"], spec["base_seed"] + spec["paths"])
    result = calibrate_path_bound(phi, grid, spec["dt0"] * np.arange(n_nodes), seeds, spec["factor"])

    assert result.paths == spec["paths"]
    assert 0 < result.median_worst <= result.q90_worst
    assert result.bound == pytest.approx(spec["factor"] * result.median_worst)
    assert result.rejected_fraction <= spec["max_rejected_fraction"]
