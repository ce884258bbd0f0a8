import numpy as np
import pytest

from app.core.errors import BOutOfRangeError, FlatFieldError, InsufficientSamplesError, InvalidSpecError
from app.services.grid_field import ComplexField, evaluate_lattice, make_grid
from app.services.modulation import (
    InitialDataSpec,
    ModulationContext,
    ModulationParams,
    ModulationState,
    build_initial_data,
    condition_table,
    decompose,
    decompose_warm,
    initial_guess,
    newton_matrix,
    orthogonality_residuals,
    project_orthogonal,
    reconstruct,
    series,
)

ROUND_TRIP_CASES = [
    # lam, b, x0, gamma, (L, N)
    (0.5, 0.0, 0.0, 0.0, (20.0, 2048)),
    (0.5, 0.2, 0.3, 0.7, (20.0, 2048)),
    (0.1, 0.1, -0.05, -1.2, (5.0, 2048)),
    (0.1, 0.3, 0.02, 2.5, (5.0, 2048)),
]


@pytest.mark.parametrize("lam,b,x0,gamma,box", ROUND_TRIP_CASES)
def test_decompose_recovers_ansatz_parameters(ctx1d, ansatz, lam, b, x0, gamma, box):
    grid = make_grid(1, *box)
    u = ansatz(ctx1d, grid, lam, b, x0=[x0], gamma=gamma)
    state = decompose(u, initial_guess(u, ctx1d), alpha=1.0, ctx=ctx1d)

    assert state.status == "converged"
    assert state.lam == pytest.approx(lam, abs=1e-8)
    assert state.b == pytest.approx(b, abs=1e-8)
    assert state.x_c[0] == pytest.approx(x0, abs=1e-8)
    assert state.gamma == pytest.approx(gamma, abs=1e-8)
    assert state.residual_max < 1e-10 * ctx1d.qnorm2
    assert state.eps_l2 < 1e-6


def test_phase_rotation_shifts_only_gamma(ctx1d, ansatz):
    grid = make_grid(1, 20.0, 2048)
    u = ansatz(ctx1d, grid, 0.5, 0.15, gamma=0.7)
    base = decompose(u, initial_guess(u, ctx1d), alpha=1.0, ctx=ctx1d)
    rotated_u = u.scaled(np.exp(1j))
    rotated = decompose(rotated_u, initial_guess(rotated_u, ctx1d), alpha=1.0, ctx=ctx1d)
    assert rotated.gamma == pytest.approx(base.gamma + 1.0, abs=1e-8)
    assert rotated.lam == pytest.approx(base.lam, abs=1e-10)
    assert rotated.b == pytest.approx(base.b, abs=1e-10)


def test_initial_guess_reads_the_chirp(ctx1d, ansatz):
    grid = make_grid(1, 20.0, 2048)
    guess = initial_guess(ansatz(ctx1d, grid, 0.5, 0.1, x0=[0.4]), ctx1d)
    assert guess.b == pytest.approx(0.1, rel=0.1)
    assert guess.lam == pytest.approx(0.5, rel=0.1)
    assert guess.x_c[0] == pytest.approx(0.4, abs=0.05)


def test_large_eps_is_flagged(ctx1d, ansatz):
    grid = make_grid(1, 20.0, 2048)
    u = ansatz(ctx1d, grid, 0.5, 0.25)
    state = decompose(u, initial_guess(u, ctx1d), alpha=0.2, ctx=ctx1d)
    assert state.status == "eps-too-large"
    assert state.converged and not state.valid


def test_warm_start_reuses_last_parameters(ansatz):
    ctx = ModulationContext(1)
    grid = make_grid(1, 20.0, 2048)
    first = decompose_warm(ansatz(ctx, grid, 0.5, 0.1), ctx, 1.0, t=0.0, previous=None)
    assert ctx.warm == first.params
    second = decompose_warm(ansatz(ctx, grid, 0.49, 0.1), ctx, 1.0, t=0.01, previous=first)
    assert second.valid
    assert second.lam == pytest.approx(0.49, abs=1e-8)
    assert second.s == pytest.approx(0.5 * (0.5**-2 + 0.49**-2) * 0.01)


def test_projection_removes_direction_components(ctx1d):
    y = ctx1d.ygrid.coords()[0]
    h = ComplexField(ctx1d.ygrid, (np.exp(-(y**2)) * (1 + 0.5j * y)).astype(np.complex128))
    projected = project_orthogonal(h, 0.2, ctx1d)
    assert np.max(np.abs(orthogonality_residuals(projected, 0.2, ctx1d))) < 1e-10
    assert np.max(np.abs(orthogonality_residuals(h, 0.2, ctx1d))) > 1e-3


def test_flat_field_has_no_decomposition(ctx1d):
    with pytest.raises(FlatFieldError):
        initial_guess(make_grid(1, 20.0, 512).zeros(), ctx1d)


def test_initial_data_report(ctx1d):
    grid = make_grid(1, 5.0, 2048)
    spec = InitialDataSpec(lambda0=0.1, b0=0.2, eps0="bump", eps0_amplitude=1e-3, x0=(0.0,))
    u0, report = build_initial_data(spec, ctx1d.gs, grid, alpha=0.3, ctx=ctx1d)
    assert u0.grid == grid
    assert report.b_positive
    assert report.eps_plus_b_below_alpha
    assert 0 < report.eps0_l2 < 1e-2
    assert report.gamma_b0 == pytest.approx(np.exp(-np.pi / 0.2))
    assert report.log_lambda0 == pytest.approx(np.log(0.1))
    # exp(-exp(0.8 pi / b)) is far below any double-precision lambda
    assert not report.lambda_below_bound
    assert report.energy_bounded and report.momentum_bounded


def test_initial_data_rejects_bad_parameters(ctx1d):
    grid = make_grid(1, 5.0, 512)
    with pytest.raises(InvalidSpecError):
        build_initial_data(InitialDataSpec(lambda0=-1.0, b0=0.2), None, grid, ctx=ctx1d)
    with pytest.raises(InvalidSpecError):
        build_initial_data(InitialDataSpec(lambda0=0.1, b0=0.0), None, grid, ctx=ctx1d)
    with pytest.raises(BOutOfRangeError):
        build_initial_data(InitialDataSpec(lambda0=0.1, b0=0.6), None, grid, ctx=ctx1d)


@pytest.mark.parametrize("b", [0.0, 0.15, 0.3])
def test_newton_matrix_is_well_conditioned(ctx1d, ansatz, b):
    grid = make_grid(1, 20.0, 2048)
    params = ModulationParams(lam=0.5, b=b, x_c=(0.0,), gamma=0.0)
    jac = newton_matrix(ansatz(ctx1d, grid, 0.5, b), params, ctx1d)
    assert jac.shape == (4, 4)
    assert np.isfinite(jac).all()
    assert np.linalg.cond(jac) < 1e4


def test_series_needs_three_samples(ctx1d, ansatz):
    grid = make_grid(1, 20.0, 2048)
    u = ansatz(ctx1d, grid, 0.5, 0.1)
    state = decompose(u, initial_guess(u, ctx1d), alpha=1.0, ctx=ctx1d)
    with pytest.raises(InsufficientSamplesError):
        series([state, state])


def _relative_error(a: ComplexField, b: ComplexField) -> float:
    return float(np.linalg.norm(a.values - b.values) / np.linalg.norm(b.values))


def _states(s, lam, b) -> list[ModulationState]:
    return [
        ModulationState(
            t=float(i),
            lam=float(li),
            b=float(bi),
            x_c=(0.0,),
            gamma=0.0,
            residuals=np.zeros(4),
            status="converged",
            valid=True,
            s=float(si),
        )
        for i, (si, li, bi) in enumerate(zip(s, lam, b))
    ]


def test_rescaled_time_bridges_a_diverged_sample(ansatz):
    ctx = ModulationContext(1)
    grid = make_grid(1, 20.0, 2048)
    first = decompose_warm(ansatz(ctx, grid, 0.5, 0.1), ctx, 1.0, t=0.0, previous=None)
    # no Newton iterations allowed, so neither the warm start nor the fresh guess converges
    stuck = decompose_warm(ansatz(ctx, grid, 0.49, 0.1), ctx, 1.0, t=0.01, previous=first, max_iter=0)
    assert stuck.status == "newton-divergence"
    assert stuck.s == first.s
    third = decompose_warm(ansatz(ctx, grid, 0.48, 0.1), ctx, 1.0, t=0.02, previous=stuck)
    fourth = decompose_warm(ansatz(ctx, grid, 0.47, 0.1), ctx, 1.0, t=0.03, previous=third)

    assert third.valid and fourth.valid
    assert third.s == pytest.approx(0.5 * (0.5**-2 + third.lam**-2) * 0.02)
    assert fourth.s == pytest.approx(third.s + 0.5 * (third.lam**-2 + fourth.lam**-2) * 0.01)

    frame = series([first, stuck, third, fourth])
    assert list(frame["t"]) == [0.0, 0.02, 0.03]
    assert np.all(np.diff(frame["s"]) > 0)


def test_newton_tolerance_and_iteration_cap_are_honoured(ctx1d, ansatz):
    grid = make_grid(1, 20.0, 2048)
    u = ansatz(ctx1d, grid, 0.5, 0.15, x0=[0.1])
    guess = ModulationParams(lam=0.55, b=0.12, x_c=(0.0,), gamma=0.2)
    tight = decompose(u, guess, alpha=1.0, ctx=ctx1d)
    loose = decompose(u, guess, alpha=1.0, ctx=ctx1d, tol=1e-3)
    capped = decompose(u, guess, alpha=1.0, ctx=ctx1d, max_iter=1)

    assert tight.status == "converged" and loose.status == "converged"
    assert loose.iterations < tight.iterations
    assert capped.iterations == 1
    assert capped.status == "newton-divergence"


def test_translation_moves_only_the_center(ctx1d, ansatz):
    grid = make_grid(1, 20.0, 2048)
    u = ansatz(ctx1d, grid, 0.5, 0.15, x0=[0.2], gamma=0.3)
    shift = 0.75
    moved = ComplexField(grid, evaluate_lattice(u, [grid.center[0] - grid.L - shift], [grid.dx], [grid.N]))
    base = decompose(u, initial_guess(u, ctx1d), alpha=1.0, ctx=ctx1d)
    state = decompose(moved, initial_guess(moved, ctx1d), alpha=1.0, ctx=ctx1d)

    assert state.x_c[0] == pytest.approx(base.x_c[0] + shift, abs=1e-8)
    assert state.lam == pytest.approx(base.lam, abs=1e-8)
    assert state.b == pytest.approx(base.b, abs=1e-8)
    assert state.gamma == pytest.approx(base.gamma, abs=1e-8)


def test_mass_preserving_dilation_scales_lambda_and_center(ctx1d, ansatz):
    grid = make_grid(1, 20.0, 2048)
    u = ansatz(ctx1d, grid, 0.4, 0.15, x0=[0.2], gamma=0.3)
    mu = 1.5
    start = (grid.center[0] - grid.L) / mu
    dilated = ComplexField(grid, mu**-0.5 * evaluate_lattice(u, [start], [grid.dx / mu], [grid.N]))
    state = decompose(dilated, initial_guess(dilated, ctx1d), alpha=1.0, ctx=ctx1d)

    assert state.status == "converged"
    assert state.lam == pytest.approx(0.6, abs=1e-8)
    assert state.x_c[0] == pytest.approx(0.3, abs=1e-8)
    assert state.b == pytest.approx(0.15, abs=1e-8)
    assert state.gamma == pytest.approx(0.3, abs=1e-8)


def test_reconstruct_returns_a_perturbed_profile(ctx1d):
    b = 0.12
    y = ctx1d.ygrid.coords()[0]
    bump = ComplexField(ctx1d.ygrid, (1e-3 * np.exp(-((y - 0.5) ** 2)) * (1 + 0.3j)).astype(np.complex128))
    eps0 = project_orthogonal(bump, b, ctx1d)
    assert np.max(np.abs(orthogonality_residuals(eps0, b, ctx1d))) < 1e-10

    truth = ModulationState(
        t=0.0,
        lam=0.5,
        b=b,
        x_c=(0.1,),
        gamma=0.4,
        residuals=np.zeros(4),
        status="converged",
        valid=True,
        eps=eps0,
    )
    grid = make_grid(1, 20.0, 2048)
    u = reconstruct(truth, grid, ctx1d)
    state = decompose(u, initial_guess(u, ctx1d), alpha=1.0, ctx=ctx1d)

    assert state.status == "converged"
    assert state.residual_max < 1e-10 * ctx1d.qnorm2
    assert state.lam == pytest.approx(0.5, abs=1e-8)
    assert state.b == pytest.approx(b, abs=1e-8)
    assert np.max(np.abs(state.eps.values - eps0.values)) < 1e-8
    assert _relative_error(reconstruct(state, grid, ctx1d), u) < 1e-10


def test_two_dimensional_round_trip(ansatz):
    ctx = ModulationContext(2)
    # lam * dy equals dx, so the pull-back lattice lands on grid nodes
    grid = make_grid(2, 8.0, 256)
    u = ansatz(ctx, grid, 0.4, 0.1, gamma=0.5)
    state = decompose(u, initial_guess(u, ctx), alpha=1.0, ctx=ctx)

    assert state.status == "converged"
    assert state.lam == pytest.approx(0.4, abs=1e-6)
    assert state.b == pytest.approx(0.1, abs=1e-6)
    assert np.allclose(state.x_c, (0.0, 0.0), atol=1e-6)
    assert state.gamma == pytest.approx(0.5, abs=1e-6)
    assert _relative_error(reconstruct(state, grid, ctx), u) < 1e-8


def test_series_reads_the_decay_rate_of_lambda():
    s = np.linspace(0.0, 10.0, 41)
    frame = series(_states(s, np.exp(-0.2 * s), np.full_like(s, 0.2)))
    np.testing.assert_allclose(frame["minus_lambda_s_over_lambda"], 0.2, atol=1e-12)
    np.testing.assert_allclose(frame["b_s"], 0.0, atol=1e-14)


def test_series_tracks_a_drifting_b():
    s = np.linspace(0.0, 10.0, 41)
    b = 0.3 - 0.01 * s
    lam = np.exp(-(0.3 * s - 0.005 * s**2))
    frame = series(_states(s, lam, b))

    np.testing.assert_allclose(frame["b_s"], -0.01, atol=1e-12)
    np.testing.assert_allclose(frame["minus_lambda_s_over_lambda"].iloc[1:-1], b[1:-1], atol=1e-10)
    assert np.corrcoef(frame["minus_lambda_s_over_lambda"], frame["b"])[0, 1] > 0.999


def test_newton_condition_stays_within_recorded_bound(fixture_json):
    spec = fixture_json("newton_condition.json")
    grid = make_grid(spec["d"], spec["grid"]["L"], spec["grid"]["N"])
    table = condition_table(spec["d"], spec["lam"], spec["b"], grid=grid)
    assert table["b"].tolist() == spec["b"]
    assert np.isfinite(table["condition"]).all()
    assert (table["condition"] < spec["max_condition"]).all()
