from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.core.errors import NumericBlowupError
from app.schemas.config import parse_config
from app.services import ensemble
from app.services.ensemble import (
    blowup_paths,
    drift_on_common_window,
    emit_report,
    loglog_preference_rate,
    path_seeds,
    run_ensemble,
    run_single,
    summarize,
)
from app.storage import tables

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def _files(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_seeds_follow_base_seed(quiet_config):
    assert path_seeds(quiet_config(ensemble={"n_paths": 3, "base_seed": 10})) == [10, 11, 12]


def test_empty_ensemble_writes_an_empty_report(quiet_config, tmp_path):
    summary = run_ensemble(quiet_config(ensemble={"n_paths": 0}), out_dir=tmp_path)
    assert summary.n_paths == 0
    assert summary.blowup_fraction is None and summary.blowup_ci is None
    assert (tmp_path / "summary.json").exists()
    assert tables.read_table(tmp_path / "aggregate.csv", tables.AGGREGATE_COLUMNS).empty
    assert (tmp_path / "manifest.json").exists()


def test_soliton_path_reaches_horizon_and_writes_its_files(quiet_config, tmp_path):
    summary = run_ensemble(quiet_config(), out_dir=tmp_path)
    assert summary.n_horizon == 1 and summary.n_blowup == 0
    assert summary.blowup_fraction == 0.0
    low, high = summary.blowup_ci
    assert low == pytest.approx(0.0, abs=1e-12) and 0.0 < high < 1.0

    pdir = tmp_path / "paths" / "seed_0"
    for name in ("path.json", "trajectory.csv", "modulation.csv", "diagnostics.csv", "regrids.csv", "virial.csv"):
        assert (pdir / name).exists(), name
    assert not (pdir / "brownian.csv").exists()
    assert not (pdir / "fit.json").exists()
    assert (tmp_path / "config.toml").exists()
    tables.read_table(pdir / "trajectory.csv", tables.trajectory_columns(1))
    agg = tables.read_table(tmp_path / "aggregate.csv", tables.AGGREGATE_COLUMNS)
    assert np.allclose(agg["inv_lambda_median"], 1.0, atol=1e-6)

    path = summary.paths[0]
    assert path.drift is not None and path.drift.sup_energy_ratio < 1e-6
    assert path.drift_comparison is None
    assert path.energy_scale is not None and path.energy_scale.n_records > 0
    assert path.virial_band is not None and path.virial_band.n_samples >= 3
    virial = tables.read_table(pdir / "virial.csv", tables.VIRIAL_COLUMNS)
    assert len(virial) == path.virial_band.n_samples


def test_noisy_path_records_its_brownian_increments(quiet_config):
    result = run_single(quiet_config(noise={"amplitude": 1.0}), seed=4)
    assert result.summary.error is None
    assert list(result.brownian.columns) == ["t", "B_1"]
    assert result.brownian["t"].iloc[-1] == pytest.approx(0.02)
    assert result.brownian["B_1"].iloc[0] == 0.0


def test_worker_count_does_not_change_the_summary(quiet_config):
    cfg = quiet_config(noise={"amplitude": 1.0}, ensemble={"n_paths": 3})
    inline = run_ensemble(cfg, workers=1)
    pooled = run_ensemble(cfg, workers=2)
    assert inline.model_dump_json() == pooled.model_dump_json()
    assert [p.seed for p in pooled.paths] == [0, 1, 2]


def test_a_failing_path_does_not_stop_the_others(quiet_config, monkeypatch):
    real_runner = ensemble.PathRunner

    class FlakyRunner(real_runner):
        def __init__(self, config, seed, **kwargs):
            if seed == 1:
                raise NumericBlowupError("synthetic failure")
            super().__init__(config, seed, **kwargs)

    monkeypatch.setattr(ensemble, "PathRunner", FlakyRunner)
    summary = run_ensemble(quiet_config(ensemble={"n_paths": 3}), workers=1)
    assert summary.n_paths == 3
    assert summary.n_horizon == 2
    assert summary.n_numeric_failure == 1
    failed = summary.paths[1]
    assert failed.seed == 1
    assert failed.error == "numeric-blowup: synthetic failure"


def test_rejected_paths_leave_the_blowup_denominator(quiet_config):
    results = [
        run_single(quiet_config(), seed=0),
        run_single(quiet_config(noise={"amplitude": 1.0, "path_bound": 1e-12, "bound_grid_N": 64}), seed=1),
    ]
    summary = summarize(results[::-1])
    assert [p.seed for p in summary.paths] == [0, 1]
    assert summary.n_rejected == 1
    assert summary.blowup_fraction == 0.0
    assert blowup_paths(summary) == []
    assert np.isnan(loglog_preference_rate(summary))


def test_re_emitting_a_report_only_changes_the_manifest(quiet_config, tmp_path):
    cfg = quiet_config(noise={"amplitude": 1.0}, ensemble={"n_paths": 2})
    results = [run_single(cfg, seed) for seed in (1, 0)]
    summary = summarize(results)
    emit_report(summary, tmp_path / "a", results=results, config=cfg)
    emit_report(summary, tmp_path / "b", results=results, config=cfg)
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == set(b)
    assert "paths/seed_0/brownian.csv" in a
    differing = sorted(name for name in a if a[name] != b[name])
    assert differing in ([], ["manifest.json"])


@pytest.mark.slow
def test_loglog_ensemble_blows_up_at_the_loglog_rate(tmp_path):
    cfg = parse_config(CONFIG_DIR / "loglog_1d.toml")
    summary = run_ensemble(cfg, out_dir=tmp_path)
    assert summary.n_paths == 20
    assert summary.blowup_fraction >= 0.9
    fitted = [p for p in blowup_paths(summary) if p.p_fit is not None]
    assert fitted
    for p in fitted:
        assert 0.4 <= p.p_fit <= 0.6, p.seed
        assert p.monitor_pass_rates["b_positive"] == 1.0
        assert p.monitor_pass_rates["eps_below_alpha"] == 1.0
        assert p.monitor_pass_rates["monotone_3_2"] == 1.0
        assert p.virial_band is not None and p.virial_band.q_over_gamma_min is not None
        assert np.isfinite([p.virial_band.q_over_gamma_min, p.virial_band.q_over_gamma_max]).all()
    assert loglog_preference_rate(summary) >= 0.8


def test_drift_refinement_reruns_the_path_at_half_steps(quiet_config):
    cfg = quiet_config(
        noise={"amplitude": 1.0, "bumps": [{"amplitude": 0.3, "center": [1.0], "width": 2.0}]},
        time={"horizon": 0.05},
        diagnostics={"drift_refinement": True},
    )
    result = run_single(cfg, seed=2)
    comparison = result.summary.drift_comparison
    assert result.summary.error is None
    assert comparison is not None
    assert comparison.stable
    assert 0.5 <= comparison.energy_ratio <= 2.0


def test_drift_comparison_uses_the_times_both_runs_reached():
    def frame(t, E):
        return pd.DataFrame({"t": t, "energy": E, "P_1": np.zeros(len(t)), "drift_budget": np.zeros(len(t))})

    coarse = frame([0.0, 0.25, 0.5, 0.75, 1.0], [1.0, 1.1, 1.2, 5.0, 9.0])
    fine = frame([0.0, 0.25, 0.5], [1.0, 1.1, 1.2])
    comparison = drift_on_common_window(coarse, fine)
    assert comparison.energy_ratio == pytest.approx(1.0)
    assert comparison.momentum_ratio == 1.0
    assert comparison.stable
    assert drift_on_common_window(coarse.iloc[:1], fine) is None
