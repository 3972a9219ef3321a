import json

import pytest

from ocnopt.cli import EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main, summarize_metrics
from ocnopt.config import TrainConfig
from ocnopt.data import load_csv


@pytest.fixture
def config_path(tmp_path):
    cfg = TrainConfig.from_dict({"seed": 0, "data": {"kind": "two-moons", "n": 100},
                                 "network": {"hidden": [6]}, "train": {"epochs": 2}})
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    return str(p)


def test_train_prints_summary(tmp_path, config_path, capsys):
    out = tmp_path / "run"
    assert main(["train", config_path, "--out", str(out)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["epochs"] == 2 and (out / "metrics.csv").exists()


def test_train_resume(tmp_path, config_path, capsys):
    out = tmp_path / "run"
    main(["train", config_path, "--out", str(out), "--epochs", "1"])
    assert main(["train", config_path, "--out", str(out),
                 "--resume", str(out / "checkpoint.ocno")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["epochs"] == 2


def test_train_divergence_exit(tmp_path, config_path):
    rc = main(["train", config_path, "--set", "optimizer.mode=sgd", "--set", "optimizer.lr=1e8",
               "--set", "data.kind=linear-regression", "--set", "network.act=relu"])
    assert rc == EXIT_DIVERGED


@pytest.mark.parametrize("argv", [
    ["bogus"],
    [],
    ["train", "/nonexistent/cfg.json"],
    ["verify", "--level", "slow"],
])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_invalid_override_is_usage_error(config_path):
    assert main(["train", config_path, "--set", "optimizer.lr=-1"]) == EXIT_USAGE


def test_bad_csv_is_usage_error(tmp_path, config_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,label\n1,0\nx,1\n")
    rc = main(["train", config_path, "--set", f"data.path={bad}"])
    assert rc == EXIT_USAGE
    assert "bad.csv:3:1" in capsys.readouterr().err


def test_verify_exit_codes(capsys):
    assert main(["verify", "--only", "radicand"]) == EXIT_OK
    assert main(["verify", "--only", "radicand", "--mutate", "radicand-sign"]) == EXIT_VERIFY
    assert main(["verify", "--only", "no-such-claim"]) == EXIT_VERIFY
    assert "FAIL" in capsys.readouterr().out


def test_bench_adds_timing(tmp_path, config_path, capsys):
    assert main(["bench", config_path, "--epochs", "1"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["ms_per_step"] > 0 and res["train_s"] >= 0


def test_plot_summarizes_metrics(tmp_path, config_path, capsys):
    out = tmp_path / "run"
    main(["train", config_path, "--out", str(out)])
    capsys.readouterr()
    assert main(["plot", str(out / "metrics.csv")]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res == summarize_metrics(str(out / "metrics.csv"))
    assert res["columns"]["step"]["last"] == res["rows"]
    assert res["columns"]["val_acc"]["count"] == 2


def test_gen_data_round_trips(tmp_path, capsys):
    p = tmp_path / "circles.csv"
    assert main(["gen-data", "circles", str(p), "--n", "60", "--seed", "2"]) == EXIT_OK
    ds = load_csv(str(p))
    assert ds.n == 60 and ds.in_dim == 2 and ds.n_classes == 2
