import json
import subprocess
import sys

import pytest
import yaml

import streamwsl.experiments as ex
from streamwsl.cli import main

TINY = {
    "n_trials": 1,
    "budgets": [3],
    "auto_shift": False,
    "world": {"n_labeled": 60, "n_unlabeled": 40, "n_test": 30, "shift_magnitude": 10.0, "run_length": 4},
    "policies": ["fixed_window"],
    "shift_levels": [{"name": "large", "shift": 10.0}],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_generate_then_eval(tmp_path, config, capsys):
    out = tmp_path / "world"
    assert main(["generate", "--config", str(config), "--seed", "3", "--out", str(out), "--seed-model", "--gzip"]) == 0
    for name in ("source", "stream", "stream_answers", "test"):
        assert (out / f"{name}.jsonl.gz").exists()
    assert (out / "seed_model.json").exists() and (out / "world.yaml").exists()
    capsys.readouterr()
    res = tmp_path / "eval.json"
    assert main(["eval", "--model", str(out / "seed_model.json"), "--data", str(out / "test.jsonl.gz"),
                 "--out", str(res)]) == 0
    payload = json.loads(res.read_text())
    assert 0.0 <= payload["mean_ap"] <= 1.0 and set(payload["per_class"]) <= {str(c) for c in range(5)}
    # the stream file has no labels to evaluate against
    assert main(["eval", "--model", str(out / "seed_model.json"), "--data", str(out / "stream.jsonl.gz")]) == 2


def test_sweep_and_report(tmp_path, config, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(config), "--seed", "1", "--out", str(out), "--set", "world.run_length=2"]) == 0
    printed = capsys.readouterr().out
    assert "fixed_window" in printed and "±" in printed
    assert (out / "plots" / "fixed_window.csv").read_text().splitlines()[0] == "k,mean_map,std_map"
    saved = yaml.safe_load((out / "sweep_config.yaml").read_text())
    assert saved["seed"] == 1 and saved["world"]["run_length"] == 2
    rep = tmp_path / "report"
    assert main(["report", str(out / "sweep_trials.csv"), "--out", str(rep)]) == 0
    assert (rep / "summary.csv").read_bytes() == (out / "sweep_summary.csv").read_bytes()


def test_shift_command(tmp_path, config):
    out = tmp_path / "shift"
    assert main(["shift", "--config", str(config), "--seed", "2", "--out", str(out)]) == 0
    assert (out / "plots" / "large_ss_pos_only.csv").exists()


def test_aborted_cell_gives_nonzero_exit(tmp_path, config, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("stream source died")

    monkeypatch.setattr(ex, "weakly_supervised_phase", boom)
    assert main(["sweep", "--config", str(config), "--seed", "1", "--out", str(tmp_path / "o")]) == 1


def test_bad_config_exits_2(tmp_path, config):
    assert main(["sweep", "--config", str(config), "--seed", "1", "--out", str(tmp_path), "--set", "budgets=[]"]) == 2
    assert main(["sweep", "--config", str(tmp_path / "missing.yaml"), "--seed", "1", "--out", str(tmp_path)]) == 2


def test_required_flags():
    with pytest.raises(SystemExit):
        main(["sweep", "--config", "x.yaml", "--out", "o"])


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "streamwsl.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep" in r.stdout
