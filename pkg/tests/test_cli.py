import json

import numpy as np
import pytest

from shrinkflow import __version__
from shrinkflow.cli import main


@pytest.fixture(scope="module")
def traj_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "traj"
    assert main(["flow", "--mesh", "icosphere:2", "--dt", "1e-3", "--record-every", "2", "--out", str(out)]) == 0
    return out


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def test_flow_result(traj_dir, capsys):
    manifest = json.loads((traj_dir / "manifest.json").read_text())
    assert manifest
    assert main(["flow", "--mesh", "icosphere:2", "--dt", "1e-3", "--record-every", "2",
                 "--out", str(traj_dir.parent / "again")]) == 0
    res = last_json(capsys.readouterr().out)
    assert res["t_explosion_estimate"] == pytest.approx(0.25, rel=0.02)


def test_missing_mesh_is_config_error(tmp_path, capsys):
    assert main(["flow", "--mesh", str(tmp_path / "nope.off"), "--out", str(tmp_path / "o")]) == 2
    assert last_json(capsys.readouterr().err)["error"] == "ConfigError"


def test_missing_seed_is_config_error(traj_dir, tmp_path, capsys):
    code = main(["simulate", "--traj", str(traj_dir), "--start", "1,1,1@t0", "--t0", "0.02", "--t1", "0.05",
                 "--out", str(tmp_path / "s.csv")])
    assert code == 2
    assert "seed" in last_json(capsys.readouterr().err)["message"]


def test_bad_convention(traj_dir, tmp_path):
    assert main(["simulate", "--traj", str(traj_dir), "--start", "1,1,1@t0", "--t0", "0.02", "--t1", "0.05",
                 "--seed", "1", "--conv", "two", "--out", str(tmp_path / "s.csv")]) == 2


def test_missing_trajectory(tmp_path):
    assert main(["pde", "--traj", str(tmp_path), "--eps", "0.01", "--out", str(tmp_path / "p.csv")]) == 2


def run_simulate(traj_dir, out, seed):
    return main(["simulate", "--traj", str(traj_dir), "--start", "1,1,1@t3", "--t0", "0.02", "--t1", "0.06",
                 "--dt", "1e-3", "--paths", "120", "--record-every", "5", "--seed", str(seed), "--conv", "one",
                 "--out", str(out)])


def test_simulate_deterministic_with_header(traj_dir, tmp_path):
    assert run_simulate(traj_dir, tmp_path / "a.csv", 4) == 0
    assert run_simulate(traj_dir, tmp_path / "b.csv", 4) == 0
    assert run_simulate(traj_dir, tmp_path / "c.csv", 5) == 0
    a, b, c = ((tmp_path / f"{k}.csv").read_bytes() for k in "abc")
    assert a == b and a != c
    rep = json.loads((tmp_path / "a.json").read_text())
    assert rep["shrinkflow_version"] == __version__
    assert rep["convention_c"] == 1.0
    assert "martingale" in rep["report"]


def test_pde_uniform_and_delta(traj_dir, tmp_path, capsys):
    assert main(["pde", "--traj", str(traj_dir), "--init", "delta:3", "--eps", "0.02", "--t-end", "0.1",
                 "--dt", "1e-3", "--write-every", "10", "--out", str(tmp_path / "p.csv")]) == 0
    assert last_json(capsys.readouterr().out)["mass_drift"] < 1e-10
    rep = json.loads((tmp_path / "p.json").read_text())
    assert rep["convention_c"] == 0.5
    data = np.genfromtxt(tmp_path / "p.csv", delimiter=",", names=True)
    times = np.unique(data["t"])
    assert times[0] == pytest.approx(0.02) and times[-1] == pytest.approx(0.1)
    for t in times:
        rows = data[data["t"] == t]
        assert np.dot(rows["h"], rows["area"]) == pytest.approx(1.0, abs=1e-10)


def test_pde_values_file(traj_dir, tmp_path):
    n = 162
    np.savetxt(tmp_path / "v.csv", np.linspace(1, 2, n), delimiter=",")
    assert main(["pde", "--traj", str(traj_dir), "--init", str(tmp_path / "v.csv"), "--eps", "0.02", "--t-end", "0.03",
                 "--dt", "1e-3", "--out", str(tmp_path / "p.csv")]) == 0
    assert main(["pde", "--traj", str(traj_dir), "--init", str(tmp_path / "none.csv"), "--eps", "0.02",
                 "--out", str(tmp_path / "p.csv")]) == 2


def test_couple_small(traj_dir, tmp_path, capsys):
    assert main(["couple", "--traj", str(traj_dir), "--start-a", "1,1,1@t0", "--start-b", "1,1,1@t200",
                 "--window", "0.05:0.12", "--runs", "12", "--dt", "1e-3", "--seed", "3", "--conv", "one",
                 "--out", str(tmp_path / "c")]) == 0
    assert len(list((tmp_path / "c").glob("run_*.csv"))) == 12
    summary = json.loads((tmp_path / "c" / "summary.json").read_text())
    assert 0.0 <= summary["report"]["coupling_probability"] <= 1.0
