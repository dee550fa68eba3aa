import csv
import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest
import yaml

from livcurve import Sample
from livcurve.cli import ConfigError, DataError, RunConfig, load_config, main, read_sample, run_estimate, write_sample
from livcurve.simulation import SimConfig, generate

DATA = resources.files("livcurve") / "data"
EXAMPLE_PSI = 1.7254576980784693  # DR estimate on the bundled seed-2024 dataset, frozen at release

COLUMNS = {"z": "z", "a": "a", "y": "y", "x": ["x1", "x2", "x3", "x4"], "v": []}


def example_config(tmp_path, **overrides):
    raw = yaml.safe_load((DATA / "example.yaml").read_text())
    raw["data"]["path"] = str(DATA / "sim_n1000.csv")
    for key, value in overrides.items():
        raw[key] = value
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def small_csv(tmp_path, n=300, seed=0):
    path = tmp_path / "small.csv"
    write_sample(generate(SimConfig(n=n), seed).sample, path)
    return path


def test_sample_round_trip(tmp_path):
    s = generate(SimConfig(n=200), 1).sample
    write_sample(s, tmp_path / "d.csv")
    back = read_sample(tmp_path / "d.csv", COLUMNS)
    for name in ("x", "z", "a", "y"):
        assert getattr(back, name).tobytes() == getattr(s, name).tobytes()


def test_read_sample_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("z,a,y,x1\n0.1,1,2.0,0.5\n0.2,0,oops,0.1\n")
    with pytest.raises(DataError, match=r"row 3, column 'y'"):
        read_sample(path, {"z": "z", "a": "a", "y": "y", "x": ["x1"], "v": []})
    path.write_text("z,a,y,x1\n0.1,2,2.0,0.5\n")
    with pytest.raises(DataError, match="treatment must be 0 or 1"):
        read_sample(path, {"z": "z", "a": "a", "y": "y", "x": ["x1"], "v": []})
    with pytest.raises(DataError, match="'x9' not found"):
        read_sample(path, {"z": "z", "a": "a", "y": "y", "x": ["x9"], "v": []})


def test_read_sample_with_modifier(tmp_path):
    path = tmp_path / "v.csv"
    path.write_text("z,a,y,x1,g\n0.1,1,2.0,0.5,1\n0.2,0,1.0,0.1,0\n")
    s = read_sample(path, {"z": "z", "a": "a", "y": "y", "x": ["x1", "g"], "v": ["g"]})
    np.testing.assert_array_equal(s.v[:, 0], [1.0, 0.0])


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"bogus": 1}, "estimate")
    with pytest.raises(ConfigError, match="data.columns.y"):
        RunConfig.from_dict({"data": {"path": "d.csv", "columns": {"z": "z", "a": "a"}}}, "estimate")
    with pytest.raises(ConfigError, match="variant"):
        RunConfig.from_dict({"estimator": {"variant": "OLS"}}, "estimate")
    with pytest.raises(ConfigError, match="candidate"):
        RunConfig.from_dict({"select": {"candidates": [1, "two"]}}, "select")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml", "estimate")


def test_frozen_example_estimate(tmp_path):
    res, rows, header = run_estimate(load_config(example_config(tmp_path), "estimate"))
    assert res.psi_hat[0] == pytest.approx(EXAMPLE_PSI, rel=1e-9)
    assert res.residual_norm <= 1e-8
    assert header == ["t", "gamma"] and len(rows) == 101


def test_estimate_command_outputs(tmp_path, capsys):
    out = tmp_path / "est.json"
    assert main(["estimate", "--config", str(example_config(tmp_path)), "--output", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["psi_hat"][0] == pytest.approx(EXAMPLE_PSI, rel=1e-9)
    lo, hi = payload["ci"][0]
    assert lo < payload["psi_hat"][0] < hi and payload["se"][0] > 0
    with open(tmp_path / "est.curve.csv") as fh:
        curve = list(csv.reader(fh))
    assert curve[0] == ["t", "gamma"] and len(curve) == 102


def test_seed_gives_identical_bytes(tmp_path):
    data = small_csv(tmp_path)
    cfg = example_config(tmp_path, estimator={"variant": "CROSSFIT", "folds": 2})
    raw = yaml.safe_load(cfg.read_text())
    raw["data"]["path"] = str(data)
    cfg.write_text(yaml.safe_dump(raw))
    outs = []
    for name in ("a.json", "b.json"):
        assert main(["estimate", "--config", str(cfg), "--seed", "7", "--output", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


def test_select_command(tmp_path):
    data = small_csv(tmp_path)
    cfg = example_config(tmp_path, select={"candidates": [2], "folds": 2})
    raw = yaml.safe_load(cfg.read_text())
    raw["data"]["path"] = str(data)
    cfg.write_text(yaml.safe_dump(raw))
    out = tmp_path / "risk.csv"
    assert main(["select", "--config", str(cfg), "--output", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "risk", "selected"] and rows[1][0] == "2" and rows[1][2] == "1"


def test_malformed_candidate_fails_before_reading_data(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"data": {"path": "nowhere.csv", "columns": {"z": "z", "a": "a", "y": "y"}},
                                   "select": {"candidates": [1, 0]}}))
    assert main(["select", "--config", str(cfg)]) == 1
    assert "invalid candidate 0" in capsys.readouterr().err


def test_missing_column_exit_code(tmp_path, capsys):
    data = small_csv(tmp_path)
    cfg = example_config(tmp_path)
    raw = yaml.safe_load(cfg.read_text())
    raw["data"]["path"] = str(data)
    raw["data"]["columns"]["x"] = ["x1", "income"]
    cfg.write_text(yaml.safe_dump(raw))
    assert main(["estimate", "--config", str(cfg), "--output", str(tmp_path / "o.json")]) == 2
    assert "'income' not found" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path, capsys):
    s = generate(SimConfig(n=200), 3).sample
    write_sample(Sample(s.x, s.z, np.ones(200), s.y), tmp_path / "ones.csv")
    cfg = example_config(tmp_path)
    raw = yaml.safe_load(cfg.read_text())
    raw["data"]["path"] = str(tmp_path / "ones.csv")
    cfg.write_text(yaml.safe_dump(raw))
    assert main(["estimate", "--config", str(cfg), "--output", str(tmp_path / "o.json")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["estimate"])
    assert exc.value.code == 1
    assert main(["estimate", "--config", str(tmp_path / "none.yaml")]) == 1
    assert main(["estimate", "--config", str(example_config(tmp_path)), "--jobs", "0"]) == 1


def test_simulate_standard_grid(tmp_path):
    cfg = tmp_path / "sim.yaml"
    cfg.write_text(yaml.safe_dump({"simulate": {"n": 200, "n_reps": 2, "export_data": str(tmp_path / "d.csv")},
                                   "seed": 3}))
    out = tmp_path / "metrics.csv"
    assert main(["simulate", "--config", str(cfg), "--output", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    assert {r["variant"] for r in rows} == {"IPW", "REG", "DR"}
    assert read_sample(tmp_path / "d.csv", COLUMNS).n == 200


def test_simulate_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "sim.yaml"
    cfg.write_text(yaml.safe_dump({"simulate": {"reps": 2}}))
    assert main(["simulate", "--config", str(cfg)]) == 1


def test_module_entry_point(tmp_path):
    out = tmp_path / "e.json"
    proc = subprocess.run([sys.executable, "-m", "livcurve.cli", "estimate", "--config",
                           str(example_config(tmp_path)), "--output", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert Path(proc.stdout.strip()) == out


def test_simulated_export_reproduces_in_process_estimate(tmp_path):
    from livcurve import estimate_variant, make_linear_origin_model
    from livcurve.simulation import correct_spec, default_weight

    sim = tmp_path / "sim.yaml"
    sim.write_text(yaml.safe_dump({"simulate": {"n": 400, "n_reps": 1, "cells": [{"variant": "DR"}],
                                                "export_data": str(tmp_path / "d.csv")}, "seed": 9}))
    assert main(["simulate", "--config", str(sim), "--output", str(tmp_path / "m.csv")]) == 0
    cfg = example_config(tmp_path, seed=9)
    raw = yaml.safe_load(cfg.read_text())
    raw["data"]["path"] = str(tmp_path / "d.csv")
    cfg.write_text(yaml.safe_dump(raw))
    out = tmp_path / "e.json"
    assert main(["estimate", "--config", str(cfg), "--output", str(out)]) == 0
    sample = generate(SimConfig(n=400, n_reps=1, rng_seed=9), np.random.default_rng(9)).sample
    direct = estimate_variant(sample, make_linear_origin_model(), default_weight(), correct_spec(), "DR")
    assert json.loads(out.read_text())["psi_hat"][0] == float(direct.psi_hat[0])
