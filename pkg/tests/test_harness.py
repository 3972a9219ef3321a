import json
import os

import numpy as np
import pytest

from ocnopt import checkpoint as ckpt
from ocnopt.config import TrainConfig
from ocnopt.data import load_csv, make_synthetic, split_indices, write_csv
from ocnopt.errors import ConfigError, DivergedError, ParseError
from ocnopt.train import METRIC_COLUMNS, TrainRun, train


def small_config(**sections):
    d = {"seed": 3, "data": {"kind": "two-moons", "n": 120, "noise": 0.15},
         "network": {"hidden": [8, 8]}, "optimizer": {"mode": "ocnopt-adaptive", "lr": 0.02},
         "train": {"epochs": 3, "batch_size": 16}}
    for k, v in sections.items():
        d.setdefault(k, {})
        if isinstance(v, dict):
            d[k].update(v)
        else:
            d[k] = v
    return TrainConfig.from_dict(d)


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


# -- data -------------------------------------------------------------------

def test_toy_csv(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text("a,b,label\n1,2,0\n3,4,1\n5,6,0\n7,8,1\n")
    ds = load_csv(str(p))
    assert ds.n == 4 and ds.in_dim == 2 and ds.n_classes == 2
    assert ds.feature_names == ("a", "b")


def test_wine_format_csv(tmp_path):
    wine = make_synthetic("wine")
    p = tmp_path / "wine.csv"
    write_csv(str(p), wine.X, wine.y, "class")
    ds = load_csv(str(p), "class")
    assert (ds.in_dim, ds.n_classes) == (13, 3)
    assert np.array_equal(ds.X, wine.X) and np.array_equal(ds.y, wine.y)


@pytest.mark.parametrize("body,line,col", [
    ("a,b,label\n1,2,0\n3,nan,1\n", 3, 2),
    ("a,b,label\n1,2,0\n3,x,1\n", 3, 2),
    ("a,b,label\n1,2,0\n3,4\n", 3, None),
    ("a,b,label\n1,inf,0\n", 2, 2),
])
def test_csv_errors_name_the_cell(tmp_path, body, line, col):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(ParseError) as exc:
        load_csv(str(p))
    assert exc.value.line == line and exc.value.column == col


def test_csv_missing_label_column(tmp_path):
    p = tmp_path / "nolabel.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ParseError) as exc:
        load_csv(str(p))
    assert exc.value.line == 1


def test_noiseless_moons_follow_their_arcs():
    ds = make_synthetic("two-moons", n=200, noise=0.0, seed=0)
    X, y = ds.X, ds.y
    upper = np.hypot(X[:, 0], X[:, 1])
    lower = np.hypot(X[:, 0] - 1.0, X[:, 1] - 0.5)
    assert np.allclose(upper[y == 0], 1.0) and np.allclose(lower[y == 1], 1.0)
    assert np.all(X[y == 0, 1] >= -1e-12) and np.all(X[y == 1, 1] <= 0.5 + 1e-12)


@pytest.mark.parametrize("kind", ["two-moons", "spirals", "circles", "linear-regression"])
def test_generators_are_seed_stable(kind):
    a, b = make_synthetic(kind, 100, seed=4), make_synthetic(kind, 100, seed=4)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.X, make_synthetic(kind, 100, seed=5).X)


def test_generator_errors():
    with pytest.raises(ValueError):
        make_synthetic("mnist")
    with pytest.raises(ValueError):
        make_synthetic("spirals", n=5)


def test_splits_disjoint_and_train_normalized():
    ds = make_synthetic("digits", seed=1)
    tr, va, te = set(ds.train), set(ds.val), set(ds.test)
    assert not (tr & va or tr & te or va & te)
    assert len(tr | va | te) == ds.n
    Xtr, _ = ds.split("train")
    assert np.allclose(Xtr.mean(axis=0), 0.0, atol=1e-12)
    assert np.all(np.isfinite(ds.split("test")[0]))
    assert np.allclose(ds.mean, ds.X[ds.train].mean(axis=0))


def test_split_fractions():
    tr, va, te = split_indices(100, 0)
    assert (len(tr), len(va), len(te)) == (70, 15, 15)


def test_spirals_smoke():
    cfg = TrainConfig.from_dict({"seed": 0, "data": {"kind": "spirals", "n": 500},
                                 "network": {"hidden": [32, 32, 32]},
                                 "optimizer": {"mode": "ocnopt-adaptive", "lr": 0.01},
                                 "train": {"epochs": 300, "batch_size": 32}})
    assert TrainRun(cfg).run()["train_acc"] >= 0.95


# -- configuration -------------------------------------------------------------

def test_config_overrides():
    cfg = TrainConfig().with_overrides(["curvature.kind=kfac", "optimizer.lr=0.5",
                                        "network.hidden=[4, 4]", "game.alignment=bandit"])
    assert cfg.curvature.kind == "kfac" and cfg.optimizer.lr == 0.5
    assert cfg.network.hidden == [4, 4] and cfg.game.alignment == "bandit"


@pytest.mark.parametrize("bad", [["optimizer.lr=0"], ["optimizer.beta=1.5"], ["optimizer.gamma=-1"],
                                 ["nope.key=1"], ["optimizer.nope=1"], ["optimizer.lr"]])
def test_config_rejects_invalid(bad):
    with pytest.raises(ConfigError):
        TrainConfig().with_overrides(bad)


def test_config_unknown_keys():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"optimizer": {"learning_rate": 1}})


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_identical(tmp_path, rng):
    arrays = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5)}
    meta = {"step": 7, "rng": np.random.default_rng(0).bit_generator.state}
    p1, p2 = tmp_path / "a.ocno", tmp_path / "b.ocno"
    ckpt.save(str(p1), arrays, meta)
    a2, m2 = ckpt.load(str(p1))
    ckpt.save(str(p2), a2, m2)
    assert read(p1) == read(p2)
    assert read(p1)[:4] == b"OCNO"
    assert all(np.array_equal(arrays[k], a2[k]) for k in arrays)


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "c.ocno"
    ckpt.save(str(p), {"x": np.ones(3)})
    data = read(p)
    (tmp_path / "bad.ocno").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "short.ocno").write_bytes(data[:-8])
    for name in ("bad.ocno", "short.ocno"):
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load(str(tmp_path / name))


def test_training_checkpoint_round_trip(tmp_path):
    out = tmp_path / "run"
    train(small_config(curvature={"kind": "kfac"}), str(out))
    path = out / "checkpoint.ocno"
    run = TrainRun.from_checkpoint(str(path))
    run.save_checkpoint(str(tmp_path / "again.ocno"))
    assert read(path) == read(tmp_path / "again.ocno")


# -- training loop -------------------------------------------------------------

def test_zero_epochs_writes_header_and_initial_checkpoint(tmp_path):
    cfg = small_config(train={"epochs": 0})
    out = tmp_path / "zero"
    train(cfg, str(out))
    assert (out / "metrics.csv").read_text() == ",".join(METRIC_COLUMNS) + "\n"
    arrays, meta = ckpt.load(str(out / "checkpoint.ocno"))
    fresh = TrainRun(cfg)
    assert meta["step"] == 0
    assert all(np.array_equal(arrays[f"param.{i}"], th) for i, th in enumerate(fresh.logical))


@pytest.mark.parametrize("extra", [
    {},
    {"curvature": {"kind": "kfac"}},
    {"network": {"residual_blocks": 1, "residual_width": 6, "residual_depth": 2},
     "game": {"alignment": "bandit", "reward_period": 3}},
    {"game": {"players": 2}},
    {"ode": {"enabled": True, "steps": 6, "augment": 1, "horizon_opt": True},
     "curvature": {"gamma_mode": "damped"}, "optimizer": {"gamma": 1e-3}},
])
def test_runs_are_bit_identical(tmp_path, extra):
    cfg = small_config(**extra)
    for name in ("a", "b"):
        train(cfg, str(tmp_path / name))
    assert read(tmp_path / "a" / "metrics.csv") == read(tmp_path / "b" / "metrics.csv")
    assert read(tmp_path / "a" / "checkpoint.ocno") == read(tmp_path / "b" / "checkpoint.ocno")


@pytest.mark.parametrize("extra", [
    {"curvature": {"kind": "kfac", "refresh": 3}},
    {"network": {"residual_blocks": 1, "residual_width": 6, "residual_depth": 2},
     "game": {"alignment": "bandit", "reward_period": 3, "players": 2}},
    {"ode": {"enabled": True, "steps": 6, "augment": 1, "horizon_opt": True},
     "curvature": {"gamma_mode": "damped"}, "optimizer": {"gamma": 1e-3}},
])
def test_resume_reproduces_continuation(tmp_path, extra):
    cfg = small_config(train={"epochs": 4, "checkpoint_every": 2}, **extra)
    train(cfg, str(tmp_path / "full"))
    first = TrainRun(cfg, str(tmp_path / "split"))
    first.run(2)
    resumed = TrainRun.from_checkpoint(str(tmp_path / "split" / "checkpoint-epoch2.ocno"),
                                       str(tmp_path / "split"))
    resumed.run()
    assert read(tmp_path / "full" / "metrics.csv") == read(tmp_path / "split" / "metrics.csv")
    assert read(tmp_path / "full" / "checkpoint.ocno") == read(tmp_path / "split" / "checkpoint.ocno")


def test_sgd_equals_identity_without_feedback(tmp_path):
    a = small_config(optimizer={"mode": "sgd", "lr": 0.1, "gamma": 1e-4})
    b = small_config(optimizer={"mode": "ocnopt-identity", "lr": 0.1, "gamma": 1e-4,
                                "feedback": False})
    train(a, str(tmp_path / "a"))
    train(b, str(tmp_path / "b"))
    assert read(tmp_path / "a" / "metrics.csv") == read(tmp_path / "b" / "metrics.csv")


def test_metrics_and_manifest(tmp_path):
    cfg = small_config(ode={"enabled": True, "steps": 6, "augment": 1, "horizon_opt": True},
                       curvature={"gamma_mode": "damped"})
    summary = train(cfg, str(tmp_path))
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == list(METRIC_COLUMNS)
    rows = [dict(zip(METRIC_COLUMNS, l.split(","))) for l in lines[1:]]
    assert [int(r["step"]) for r in rows] == list(range(1, len(rows) + 1))
    assert all(r["horizon"] for r in rows)
    assert sum(bool(r["val_acc"]) for r in rows) == cfg.train.epochs
    timing = (tmp_path / "timing.csv").read_text().splitlines()
    assert len(timing) == len(lines)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"] == cfg.to_dict()
    assert summary["horizon"] == pytest.approx(float(rows[-1]["horizon"]), rel=0.5)


def test_regression_task_runs(tmp_path):
    cfg = small_config(data={"kind": "linear-regression", "n": 100, "noise": 0.1},
                       optimizer={"mode": "ocnopt-identity", "lr": 0.05})
    s = train(cfg)
    assert s["train_acc"] is None and s["train_loss"] < 0.5


def test_divergence_carries_context(tmp_path):
    cfg = small_config(optimizer={"mode": "sgd", "lr": 1e6}, network={"act": "relu"},
                       data={"kind": "linear-regression", "n": 100})
    with pytest.raises(DivergedError) as exc:
        train(cfg, str(tmp_path))
    assert "epoch" in str(exc.value) and "step" in str(exc.value)


def test_ode_rejects_players():
    with pytest.raises(ConfigError):
        TrainRun(small_config(ode={"enabled": True, "augment": 1}, game={"players": 2}))


def test_thread_count_does_not_change_results(tmp_path):
    from threadpoolctl import threadpool_limits
    cfg = small_config(data={"kind": "digits"}, network={"hidden": [32]}, train={"epochs": 1})
    with threadpool_limits(limits=1):
        train(cfg, str(tmp_path / "one"))
    with threadpool_limits(limits=4):
        train(cfg, str(tmp_path / "four"))
    assert read(tmp_path / "one" / "metrics.csv") == read(tmp_path / "four" / "metrics.csv")
