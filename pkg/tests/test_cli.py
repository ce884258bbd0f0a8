import argparse
import json

import numpy as np
import pandas as pd
import pytest

from app.main import _seed_range, main
from app.schemas.config import to_toml
from app.storage import tables


def test_seed_ranges_are_inclusive():
    assert _seed_range("3..5") == [3, 4, 5]
    assert _seed_range("7") == [7]
    for bad in ("5..3", "a..b", "-1"):
        with pytest.raises(argparse.ArgumentTypeError):
            _seed_range(bad)


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])
    assert exc.value.code == 2


def test_groundstate_writes_a_radial_table(tmp_path, capsys):
    out = tmp_path / "q1.csv"
    assert main(["groundstate", "--d", "1", "--out", str(out), "--points", "101"]) == 0
    table = tables.read_table(out, tables.GROUND_STATE_COLUMNS)
    assert len(table) == 101
    assert table["Q"].iloc[0] == pytest.approx(3**0.25)
    assert "mass=" in capsys.readouterr().out


def test_invalid_config_exits_with_code_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[grid]\nN = 100\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert "error [validation-error]" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_run_writes_the_requested_seeds(quiet_config, tmp_path, capsys):
    cfg = tmp_path / "quiet.toml"
    cfg.write_text(to_toml(quiet_config()))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--seeds", "2..3", "--workers", "1"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [p["seed"] for p in summary["paths"]] == [2, 3]
    assert summary["n_horizon"] == 2
    assert "paths=2" in capsys.readouterr().out


def test_fit_on_a_stored_series(tmp_path, capsys):
    tau = np.logspace(-7, -2.5, 120)
    lam = (np.log(np.abs(np.log(tau))) / tau) ** -0.5
    frame = pd.DataFrame({"t": 0.01 - tau, "lambda": lam, "status": "converged"})
    frame.loc[5, "status"] = "newton-divergence"
    frame.loc[5, "lambda"] = 10.0
    traj = tmp_path / "modulation.csv"
    frame.to_csv(traj, index=False)

    out = tmp_path / "fit.json"
    assert main(["fit", "--traj", str(traj), "--lambda-lo", "1e-4", "--out", str(out)]) == 0
    fit = json.loads(out.read_text())
    assert fit["n_samples"] == 119
    assert fit["loglog_beats_power"]
    assert json.loads(capsys.readouterr().out)["p"] == pytest.approx(fit["p"])


def test_fit_without_lambda_column_is_an_input_error(tmp_path, capsys):
    traj = tmp_path / "bad.csv"
    pd.DataFrame({"t": [0.0, 1.0]}).to_csv(traj, index=False)
    assert main(["fit", "--traj", str(traj)]) == 2
    assert "lacks columns" in capsys.readouterr().err


def test_noise_identity_oracle_from_the_command_line(capsys):
    assert main(["oracle", "--case", "noise-identity"]) == 0
    assert capsys.readouterr().out.startswith("PASS noise-identity")
