import csv
import json

import pytest

from hybrid_lnms.cli import RunConfig, ConfigError, main


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"env": "cart1", "ocp": {"N": 6}, "experiment": {"rollouts": 2, "seed": 3}}))
    return path


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_run_writes_artifacts(config, tmp_path, capsys):
    out = tmp_path / "a"
    assert main(["--config", str(config), "--out", str(out), "run"]) == 0
    names = set(_files(out))
    assert {"config.json", "rollout_000.json", "rollout_001.json", "store.jsonl"} <= names
    rec = json.loads((out / "rollout_000.json").read_text())
    assert rec["terminated"] == "Converged"
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["ocp"]["N"] == 6 and echoed["experiment"]["rollouts"] == 2
    assert "rollout 1" in capsys.readouterr().out


def test_rerun_is_byte_identical(config, tmp_path):
    out = tmp_path / "a"
    args = ["run", "--config", str(config), "--out", str(out), "--strip-timing"]
    assert main(args) == 0
    first = _files(out)
    assert main(args) == 0
    assert _files(out) == first


def test_flag_overrides(config, tmp_path):
    out = tmp_path / "a"
    assert main(["--config", str(config), "--out", str(out), "--seed", "9", "run", "--rollouts", "1", "--steps", "4"]) == 0
    assert not (out / "rollout_001.json").exists()
    rec = json.loads((out / "rollout_000.json").read_text())
    assert len(rec["inputs"]) <= 4
    assert json.loads((out / "config.json").read_text())["experiment"]["seed"] == 9


def test_missing_config(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "nope.json"), "run"]) == 2
    assert "config not found" in capsys.readouterr().err


def test_unknown_bench_kind(config):
    assert main(["--config", str(config), "bench", "--which", "foo"]) == 2


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"env": "cart9"},
    {"ocp": {"N": 0}},
    {"ocp": {"horizon": 3}},
    {"experiment": {"seed": -1}},
    {"experiment": {"budget": "fast"}},
    {"solver": {"gap_tol": -1.0}},
    {"lnms": {"weights": [1.0, -1.0]}},
    {"system": {"m": 0.0}},
    {"experiment": {"region": [[0.0, 0.0], [5.0, 1.0]]}},
])
def test_bad_configs_exit_with_usage_error(doc, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["--config", str(path), "--out", str(tmp_path / "o"), "run"]) == 2


def test_bad_config_raises_in_library():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"experiment": {"window": 0}})


def test_improve_and_partition(config, tmp_path):
    out = tmp_path / "a"
    assert main(["--config", str(config), "--out", str(out), "run"]) == 0
    assert main(["--config", str(config), "--out", str(out), "improve", "--budget", "0.5"]) == 0
    rows = list(csv.reader(open(out / "improvement.csv")))
    assert rows[0] == ["index", "old_obj", "new_obj", "changed"]
    assert (out / "store_improved.jsonl").exists()
    assert main(["--config", str(config), "--out", str(out), "partition", "--resolution", "8"]) == 0
    rows = list(csv.reader(open(out / "partition.csv")))
    assert rows[0] == ["x1", "x2", "region_id", "u0"] and len(rows) == 65


def test_improve_without_store(config, tmp_path):
    assert main(["--config", str(config), "--out", str(tmp_path / "empty"), "improve"]) == 1


def test_bench_wallclock(config, tmp_path):
    out = tmp_path / "b"
    assert main(["--config", str(config), "--out", str(out), "bench", "--which", "wallclock", "--n", "2"]) == 0
    doc = json.loads((out / "wallclock.json").read_text())
    assert doc["n_ocps"] == 2 and doc["ratio"] > 0


def test_bench_mip_fraction(config, tmp_path):
    out = tmp_path / "b"
    assert main(["--config", str(config), "--out", str(out), "bench", "--which", "mip-fraction", "--n", "2"]) == 0
    doc = json.loads((out / "mip_fraction.json").read_text())
    assert doc["n_rollouts"] == 2
    assert (out / "mip_fraction_curve.csv").exists()
