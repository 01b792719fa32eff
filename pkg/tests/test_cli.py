import csv
import json

import pytest

from logbranch.cli import DEFAULT_OUT, OUT_ENV, main
from logbranch.measures import family_to_json, moran_family


@pytest.fixture
def model(tmp_path):
    path = tmp_path / "moran.json"
    doc = family_to_json(moran_family(1))
    doc["K"] = 50
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(OUT_ENV, raising=False)


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_missing_model_file(tmp_path, capsys):
    assert main(["simulate", "--model", str(tmp_path / "nope.json")]) == 2
    assert "model file not found" in capsys.readouterr().err


def test_bad_experiment_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["duality", "--experiment", str(bad)]) == 2
    bad.write_text(json.dumps({"kind": "duality", "replicates": 0}))
    assert main(["duality", "--experiment", str(bad)]) == 2


def test_unknown_command_and_usage(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["--help"]) == 0


def test_simulate_horizon_zero(model, tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--model", model, "--horizon", "0", "--out", str(out)]) == 0
    r = rows(out / "trajectory.csv")
    assert len(r) == 2 and r[1][1:3] == ["50", "0"]


def test_simulate_deterministic(model, tmp_path, capsys):
    args = ["simulate", "--model", model, "--horizon", "5", "--seed", "11", "--n-minus", "20"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "trajectory.csv").read_bytes()
    assert a == (tmp_path / "b" / "trajectory.csv").read_bytes() and len(a) > 100
    assert main(["simulate", "--model", model, "--horizon", "5", "--seed", "12", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "trajectory.csv").read_bytes() != a
    assert " | " in capsys.readouterr().out


def test_simulate_bad_overrides(model):
    assert main(["simulate", "--model", model, "--horizon", "-1"]) == 2
    assert main(["simulate", "--model", model, "--K", "0"]) == 2
    assert main(["simulate", "--model", model, "--seed", "-3"]) == 2


def test_env_output_directory(model, tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert main(["simulate", "--model", model, "--horizon", "0"]) == 0
    assert (tmp_path / "env" / "trajectory.csv").exists()
    assert main(["simulate", "--model", model, "--horizon", "0", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "trajectory.csv").exists()
    monkeypatch.delenv(OUT_ENV)
    assert main(["simulate", "--model", model, "--horizon", "0"]) == 0
    assert (tmp_path / DEFAULT_OUT / "trajectory.csv").exists()


def test_duality_t0(tmp_path, capsys):
    exp = tmp_path / "exp.json"
    exp.write_text(json.dumps({"grid": {"w0": [0.2, 0.7], "n0": [1, 3], "t": [0.0]}, "replicates": 20,
                               "theta_plus": 0.5}))
    out = tmp_path / "d"
    assert main(["duality", "--experiment", str(exp), "--out", str(out)]) == 0
    doc = json.loads((out / "duality.json").read_text())
    assert len(doc["cells"]) == 4 and all(c["z"] == 0 for c in doc["cells"])
    assert "max_abs_z=0" in capsys.readouterr().out


def test_duality_jobs_identical(tmp_path):
    exp = tmp_path / "exp.json"
    exp.write_text(json.dumps({"grid": {"w0": [0.5], "n0": [2], "t": [0.1], "dt": 1e-3}, "replicates": 60,
                               "theta_plus": 0.5, "seed": 3}))
    for jobs, d in (("1", "a"), ("2", "b")):
        assert main(["duality", "--experiment", str(exp), "--jobs", jobs, "--out", str(tmp_path / d)]) == 0
    for name in ("duality.json", "duality.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_limits(tmp_path):
    exp = tmp_path / "exp.json"
    exp.write_text(json.dumps({"grid": {"K": [1000, 10000], "n": [1, 2, 3]}}))
    assert main(["limits", "--experiment", str(exp), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "limits_probe.json").read_text())
    by = {(c["K"], c["n"]): c for c in doc["cells"]}
    assert abs(by[(10000, 3)]["plus_sum"] - 3) < abs(by[(1000, 3)]["plus_sum"] - 3)


def test_asg_dual_sde_commands(model, tmp_path):
    out = tmp_path / "g"
    assert main(["asg", "--model", model, "--K", "200", "--m", "3", "--T", "0.2", "--L", "4", "--out", str(out)]) == 0
    assert rows(out / "lineages.csv")[0] == ["t_backward", "count"]
    assert (out / "auxiliary.csv").exists() and (out / "events.jsonl").stat().st_size > 0
    assert main(["asg", "--model", model, "--K", "200", "--m", "1000", "--T", "0.1", "--out", str(out)]) == 3
    assert main(["dual", "--theta-plus", "0.5", "--n0", "2", "--out", str(out)]) == 0
    assert rows(out / "dual.csv")[1] == ["0.0", "2"]
    assert main(["dual", "--theta-minus", "0.5", "--out", str(out)]) == 2
    assert main(["sde", "--w0", "0.3", "--horizon", "0.1", "--dt", "0.01", "--out", str(out)]) == 0
    assert len(rows(out / "sde.csv")) == 12
    assert main(["sde", "--w0", "1.5", "--out", str(out)]) == 2


def test_growth_and_run(tmp_path):
    exp = tmp_path / "g.json"
    exp.write_text(json.dumps({"kind": "growth", "grid": {"K": [20, 40], "stop_size": 300}, "replicates": 4}))
    assert main(["growth", "--experiment", str(exp), "--beta", "0.5", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "growth.json").read_text())
    assert doc["meta"]["spec"]["grid"]["beta"] == 0.5 and "strictly_decreasing" in doc["summary"]
    exp.write_text(json.dumps({"kind": "decay_probe", "grid": {"K": [500], "t": [1.0, 2.0]}, "replicates": 5}))
    assert main(["run", "--experiment", str(exp), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "decay_probe.csv").exists()
    assert main(["run", "--out", str(tmp_path)]) == 2


def test_selftest(capsys):
    assert main(["--selftest"]) == 0
    assert "pass" in capsys.readouterr().out.lower()
