import json

import numpy as np
import pytest

from fsi_cli import build_parser, main
from libraries.config import parse_config
from tools.tool_studies import check_convergence_slopes, run_convergence_ladder

SMALL = """
[mesh]
nx = 4
ny = 2

[time]
tau = 2.5e-3
final_time = 0.01

[output]
snapshot_every = 2
"""


@pytest.fixture(autouse=True)
def log_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("FSI_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("FSI_THREADS", "1")


@pytest.fixture
def write_config(tmp_path):
    def factory(text, name="run.ini"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)

    return factory


def test_run_writes_every_artifact(tmp_path, write_config, capsys, monkeypatch):
    monkeypatch.setenv("FSI_SEED", "7")
    out = tmp_path / "out"
    assert main(["run", "--config", write_config(SMALL), "--out", str(out)]) == 0
    names = {path.name for path in out.iterdir()}
    assert {"energy.csv", "gcl.csv", "final_state.npz", "manifest.json", "snapshot_00004.vtk"} <= names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "run"
    assert manifest["config"]["simulation"]["tau"] == 2.5e-3
    assert len(manifest["build_id"]) == 12
    assert manifest["seed"] == 7
    assert manifest["timings"]["wall_clock"] > 0.0
    final = np.load(out / "final_state.npz")
    assert int(final["step"]) == 4
    assert "min_height=" in capsys.readouterr().out


def test_zero_data_gives_zero_outputs(tmp_path, write_config):
    out = tmp_path / "out"
    config = write_config(SMALL + "\n[forcing]\namplitude = 0\n")
    assert main(["run", "--config", config, "--out", str(out), "--scheme", "full"]) == 0
    final = np.load(out / "final_state.npz")
    assert np.all(final["velocity"] == 0.0)
    assert np.all(final["displacement"] == 0.0)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["simulation"]["scheme"] == "fully_implicit"


def test_output_directory_must_be_empty(tmp_path, write_config):
    out = tmp_path / "out"
    out.mkdir()
    (out / "old.csv").write_text("x")
    config = write_config(SMALL)
    assert main(["run", "--config", config, "--out", str(out)]) == 2
    assert main(["run", "--config", config, "--out", str(out), "--overwrite"]) == 0


def test_config_errors_exit_with_two(tmp_path, write_config):
    out = str(tmp_path / "out")
    assert main(["run", "--config", write_config("[time]\ntau = -1\n"), "--out", out]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.ini"), "--out", out]) == 2
    assert main(["convergence", "--config", write_config(SMALL), "--out", out, "--levels", "2"]) == 2


def test_invalid_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(["run", "--scheme", "explicit"])
    assert excinfo.value.code == 2


def test_contact_exits_with_three(tmp_path, write_config):
    config = write_config(SMALL + "\n[solver]\ncontact_floor = 1.0\n")
    assert main(["run", "--config", config, "--out", str(tmp_path / "out")]) == 3


def test_energy_check_reports_both_conventions(tmp_path, write_config, capsys):
    out = tmp_path / "out"
    assert main(["energy-check", "--config", write_config(SMALL), "--out", str(out)]) == 0
    names = {path.name for path in out.iterdir()}
    assert {"energy_scheme_r.csv", "energy_appendix.csv", "gcl_scheme_r.csv", "manifest.json"} <= names
    assert "appendix=" in capsys.readouterr().out


def test_small_ladder_has_a_row_per_level():
    config = parse_config(SMALL + "\n[convergence]\naxis = tau\nlevels = 3\nreference_levels = 1\nfinal_time = 0.02\n")
    table = run_convergence_ladder(config.simulation, config.convergence)
    assert [row.tau for row in table.rows] == [2.5e-3, 1.25e-3, 6.25e-4]
    assert set(table.slopes) == {"uLiL2", "xiLiL2", "etaLiL2", "gradetaLiL2", "LapetaLiL2", "graduL2L2"}


@pytest.mark.slow
def test_time_step_ladder(tmp_path, write_config):
    config = write_config(
        "[mesh]\nnx = 32\nny = 16\n[time]\ntau = 4e-3\nfinal_time = 0.4\n"
        "[convergence]\naxis = tau\nlevels = 4\nreference_levels = 2\n",
    )
    assert main(["convergence", "--config", config, "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "errors_tau.csv").exists()


@pytest.mark.slow
def test_mesh_size_ladder():
    config = parse_config(
        "[mesh]\nnx = 8\nny = 4\n[time]\ntau = 2.5e-3\nfinal_time = 0.1\n"
        "[convergence]\naxis = h\nlevels = 3\nreference_levels = 2\n",
    )
    table = run_convergence_ladder(config.simulation, config.convergence)
    assert [row.h for row in table.rows] == sorted((row.h for row in table.rows), reverse=True)
    assert check_convergence_slopes(table, config.convergence) == []


@pytest.mark.slow
def test_semi_and_fully_implicit_comparison(tmp_path, write_config):
    config = write_config(
        "[mesh]\nnx = 16\nny = 8\n[compare]\ntaus = 4e-3, 2e-3, 1e-3\nreference_levels = 2\nfinal_time = 0.4\n",
    )
    assert main(["compare", "--config", config, "--out", str(tmp_path / "out")]) == 0
    lines = (tmp_path / "out" / "compare.csv").read_text().splitlines()
    assert lines[0].startswith("tau,scheme,uLiL2")
    assert len(lines) == 7


def test_invalid_seed_is_a_config_error(tmp_path, write_config, monkeypatch):
    monkeypatch.setenv("FSI_SEED", "-1")
    assert main(["run", "--config", write_config(SMALL), "--out", str(tmp_path / "out")]) == 2
