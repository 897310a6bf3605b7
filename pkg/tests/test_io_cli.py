import numpy as np
import pytest

from conftest import SCENARIOS
from ellitube import harness, io
from ellitube.cli import main
from ellitube.scenario import with_overrides

DI_TOML = str(SCENARIOS / "double_integrator.toml")


def test_csv_round_trip_exact(tmp_path, rng):
    table = rng.standard_normal((5, 3)) * 10.0 ** rng.integers(-20, 20, (5, 3))
    path = io.write_csv(tmp_path / "a.csv", ["a", "b", "c"], table)
    header, data = io.read_csv(path)
    assert header == ["a", "b", "c"]
    assert np.array_equal(data, table)


def test_log_csv_columns(tmp_path, di_config):
    cfg = with_overrides(di_config, steps=4)
    log = harness.run_closed_loop(cfg, 0)
    header, data = io.read_csv(io.write_log_csv(log, tmp_path / "log.csv"))
    assert header == io.log_columns(log)
    assert data.shape == (5, len(header))
    assert np.array_equal(data[:, header.index("x_1")], log.x[:, 1])


def test_schedule_csv(tmp_path):
    m = np.arange(6.0).reshape(2, 3)
    header, data = io.read_csv(io.write_schedule_csv(m, tmp_path / "s.csv"))
    assert header == ["step", "row_0", "row_1"]
    assert np.array_equal(data[:, 1:].T, m)


def test_cli_tighten_and_tune(capsys):
    assert main(["tighten", DI_TOML, "--steps", "3"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0].startswith("step,row_0") and len(out) == 5
    assert main(["tune", DI_TOML, "--grid-step", "0.1"]) == 0
    assert "beta=" in capsys.readouterr().out


def test_cli_run_writes_csv(tmp_path):
    assert main(["run", DI_TOML, "--seed", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "double_integrator_proposed_seed2.csv").exists()


def test_cli_errors(tmp_path, capsys):
    assert main(["table1", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("horizen = 3\n")
    assert main(["run", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["frobnicate"])
