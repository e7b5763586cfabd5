"""Tests for the fedfraud command line."""

import json
import socket
import sys
from pathlib import Path

import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from main import main


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("FEDFRAUD_SEED", "FEDFRAUD_PORT", "FEDFRAUD_HOST", "FEDFRAUD_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


def gen(out, n=400, seed=1):
    assert main(["gen-synthetic", "--out", str(out), "--n", str(n), "--fraud-rate", "0.2", "--seed", str(seed)]) == 0


def preprocess(out, seed=1, extra=()):
    args = ["preprocess", str(out / "synthetic.csv"), "--schema", str(out / "synthetic_schema.json"),
            "--out", str(out), "--seed", str(seed), *extra]
    return main(args)


@pytest.fixture
def prepared(tmp_path):
    """Directory with a synthetic table preprocessed into three shards."""
    gen(tmp_path)
    assert preprocess(tmp_path) == 0
    return tmp_path


def test_gen_synthetic(tmp_path, capsys):
    gen(tmp_path, n=150)
    frame = pd.read_csv(tmp_path / "synthetic.csv")
    assert len(frame) == 150
    assert list(frame.columns)[0] == "fraud_bool"
    assert json.loads((tmp_path / "synthetic_schema.json").read_text())["target"] == "fraud_bool"
    assert "Wrote 150 rows" in capsys.readouterr().out


def test_preprocess_writes_artifacts(prepared):
    for name in ("processed.json", "correlation.csv", "test.json", "run_config.json",
                 "shard_1.json", "shard_2.json", "shard_3.json"):
        assert (prepared / name).exists(), name
    assert not (prepared / "shard_4.json").exists()


def test_preprocess_client_count(tmp_path):
    gen(tmp_path)
    assert preprocess(tmp_path, extra=("--clients", "2")) == 0
    assert (tmp_path / "shard_2.json").exists()
    assert not (tmp_path / "shard_3.json").exists()


def test_preprocess_is_deterministic(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        gen(out)
        assert preprocess(out) == 0
    for name in ("processed.json", "test.json", "shard_1.json", "shard_3.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_preprocess_missing_input(tmp_path, capsys):
    code = main(["preprocess", str(tmp_path / "nope.csv"), "--out", str(tmp_path)])
    assert code == 1
    assert capsys.readouterr().err.startswith("error: path_error:")


def test_preprocess_parse_error(tmp_path, capsys):
    csv_path = tmp_path / "bad.csv"
    csv_path.write_text("fraud_bool,income\n0,0.5\n1,high\n")
    assert main(["preprocess", str(csv_path), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: parse_error:")
    assert "row 2" in err and "income" in err


def test_simulate_and_report(prepared, capsys):
    assert main(["simulate", "--out", str(prepared), "--rounds", "1", "--seed", "1"]) == 0
    summary = json.loads((prepared / "simulation.json").read_text())
    assert summary["rounds_completed"] == 1
    assert summary["final_params_file"] == "final_params.json"
    assert len(pd.read_csv(prepared / "metrics.csv")) == 1
    assert json.loads((prepared / "final_params.json").read_text())["format"] == "fedfraud.params"
    capsys.readouterr()

    assert main(["report", "--out", str(prepared)]) == 0
    out = capsys.readouterr().out
    assert "rounds completed: 1" in out
    assert "best accuracy" in out


def test_report_without_simulation(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 1
    assert "path_error" in capsys.readouterr().err


def test_explain_and_predict(prepared, capsys):
    assert main(["simulate", "--out", str(prepared), "--rounds", "1", "--seed", "1"]) == 0
    assert main(["explain", "--out", str(prepared), "--rows", "0,1", "--seed", "1"]) == 0
    document = json.loads((prepared / "explanations.json").read_text())
    assert len(document["explanations"]) == 6
    assert all(e["reconciled"] for e in document["explanations"])
    assert {e["label"]["client_id"] for e in document["explanations"]} == {"client-1", "client-2", "client-3"}
    assert document["global_importance"]
    assert "Global feature importance" in (prepared / "explanations.txt").read_text()
    capsys.readouterr()

    assert main(["predict", "--out", str(prepared), "--rows", "0,2"]) == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result["rows"] == [0, 2]
    assert len(result["probabilities"]) == 2
    assert all(0.0 < p < 1.0 for p in result["probabilities"])


def test_explain_sampled(prepared):
    assert main(["simulate", "--out", str(prepared), "--rounds", "1"]) == 0
    code = main(["explain", "--out", str(prepared), "--sampled", "--permutations", "50"])
    assert code == 0
    document = json.loads((prepared / "explanations.json").read_text())
    assert {e["method"] for e in document["explanations"]} == {"sampled"}
    assert document["explanations"][0]["n_permutations"] == 50


def test_config_file_and_precedence(prepared, monkeypatch):
    config_path = prepared / "run.json"
    config_path.write_text(json.dumps({"seed": 3, "federation": {"max_rounds": 1}}))
    monkeypatch.setenv("FEDFRAUD_SEED", "5")
    assert main(["simulate", "--out", str(prepared), "--config", str(config_path)]) == 0
    assert json.loads((prepared / "simulation.json").read_text())["rounds_completed"] == 1

    assert preprocess(prepared, seed=9) == 0
    assert json.loads((prepared / "run_config.json").read_text())["seed"] == 9
    assert main(["preprocess", str(prepared / "synthetic.csv"), "--schema", str(prepared / "synthetic_schema.json"),
                 "--out", str(prepared), "--config", str(config_path)]) == 0
    assert json.loads((prepared / "run_config.json").read_text())["seed"] == 5


def test_unknown_config_key(tmp_path, capsys):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"federation": {"rounds": 3}}))
    assert main(["simulate", "--out", str(tmp_path), "--config", str(config_path)]) == 1
    assert capsys.readouterr().err.startswith("error: config_error:")


def test_serve_port_in_use(tmp_path, capsys):
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind(("127.0.0.1", 0))
        sock.listen(1)
        port = sock.getsockname()[1]
        assert main(["serve", "--out", str(tmp_path), "--port", str(port)]) == 1
    assert "already in use" in capsys.readouterr().err


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--rounds", "many"])
    assert exc.value.code == 2
