import pytest

from app.services.oracles import ORACLES, noise_identity_oracle, pconf_oracle, run_oracles, soliton_oracle


def test_noise_substep_reproduces_the_phase_identity():
    result = noise_identity_oracle()
    assert result.passed, result.message
    assert result.metrics["identity_sup_error"] < 1e-12
    assert result.metrics["relative_mass_drift"] < 1e-10


def test_soliton_phase_and_second_order_convergence():
    result = soliton_oracle()
    assert result.passed, result.message
    assert result.metrics["order"] == pytest.approx(2.0, abs=0.2)
    assert result.metrics["regrids"] == 0


def test_run_oracles_by_name():
    results = run_oracles(["noise-identity"])
    assert [r.name for r in results] == ["noise-identity"]
    assert set(ORACLES) == {"soliton", "pconf", "noise-identity"}


@pytest.mark.slow
def test_pseudo_conformal_profile_and_rate():
    result = pconf_oracle()
    assert result.passed, result.message
    assert result.metrics["regrids"] >= 1
    assert result.metrics["p_fit"] == pytest.approx(1.0, abs=0.05)
