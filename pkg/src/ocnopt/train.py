"""Training loop, metrics sink and checkpoint/resume.

A run writes into its output directory:

* ``metrics.csv``   one row per optimizer step, fixed columns (``METRIC_COLUMNS``);
* ``timing.csv``    wall-clock milliseconds per step, kept apart so that the
  metrics file is bit-identical between runs with the same seed;
* ``manifest.json`` the full configuration and dataset summary;
* ``checkpoint.ocno`` at the end (and ``checkpoint-epochN.ocno`` every
  ``train.checkpoint_every`` epochs).

Three generators are derived from the seed: one for the dataset split, one
for parameter initialization, and one for everything drawn during training
(shuffles, player noise, alignment choices).  Only the last one carries
state across epochs and it is stored in every checkpoint.
"""
import csv
import json
import os
import time

import numpy as np

from . import checkpoint as ckpt
from .config import TrainConfig
from .core import PassDiagnostics, make_optimizer
from .data import load_dataset
from .errors import ConfigError, DivergedError
from .game import (AlignmentPolicy, PlayerSplit, alignment_arms, cooperative_step,
                   split_players)
from .netgraph import Dense, MultiPath, NetworkSpec, ResidualArch, accuracy, forward
from .node import OdeField, OdeModel, horizon_step, node_step

METRIC_COLUMNS = ("step", "epoch", "loss", "train_acc", "val_loss", "val_acc", "test_loss",
                  "test_acc", "gain_q", "gain_p", "radicand_clamps", "horizon", "arm")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def build_network(cfg: TrainConfig, in_dim, out_dim, loss):
    """Plain or multi-path MLP, or a residual architecture when configured."""
    nc = cfg.network
    if nc.residual_blocks > 0:
        w = nc.residual_width
        stem = [Dense(in_dim, w, nc.act)]
        blocks = []
        for _ in range(nc.residual_blocks):
            main = [Dense(w, w, nc.act) for _ in range(nc.residual_depth - 1)]
            main.append(Dense(w, w, "identity"))
            blocks.append((main, Dense(w, w, "identity")))
        head = [Dense(w, out_dim, nc.out_act)]
        return ResidualArch(stem, blocks, head, loss)
    sizes = [in_dim] + list(nc.hidden)
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        if nc.paths > 1:
            layers.append(MultiPath([Dense(a, b, nc.act) for _ in range(nc.paths)]))
        else:
            layers.append(Dense(a, b, nc.act))
    layers.append(Dense(sizes[-1], out_dim, nc.out_act))
    return NetworkSpec(layers, loss)


class TrainRun:
    """State of one training run: data, model, optimizer(s), counters."""

    def __init__(self, config: TrainConfig, out_dir=None):
        self.cfg = config
        self.out_dir = out_dir
        seed = config.seed
        self.data = load_dataset(config.data, seed)
        self.rng = np.random.default_rng([seed, 2])
        init_rng = np.random.default_rng([seed, 1])
        self.step = 0
        self.epoch = 0
        self.diverged = None
        task = self.data.task
        loss = config.network.loss or ("softmax-ce" if task == "classification" else "mse")
        out_dim = self.data.out_dim
        self.arch = None
        self.ode = None
        self.players = None
        self.policy = None
        self.arm = None
        self.optimizers = {}
        if config.ode.enabled:
            self._build_ode(loss, out_dim, init_rng)
            return
        model = build_network(config, self.data.in_dim, out_dim, loss)
        if isinstance(model, ResidualArch):
            self.arch = model
            self.logical = model.init(init_rng)
            arms = alignment_arms(model.block_depths)
            g = config.game
            self.policy = AlignmentPolicy(g.alignment, arms, self.rng, g.explore)
            self.arm = self.policy.select(0)
        else:
            self.net = model.init(init_rng)
            self.logical = self.net.params
        if config.game.players > 1:
            self.players = split_players(self.logical, config.game.players, self.rng)
            self.logical = self.players.collapse()
            if self.arch is None:
                self.net.params = self.logical

    def _build_ode(self, loss, out_dim, init_rng):
        oc = self.cfg.ode
        if self.cfg.game.players > 1:
            raise ConfigError("fictitious players are not supported for ODE models")
        dim = self.data.in_dim + oc.augment
        if out_dim > dim:
            raise ConfigError(f"ode state ({dim}) narrower than the output ({out_dim}); raise ode.augment")
        sizes = [dim + 1] + list(oc.hidden)
        layers = [Dense(a, b, oc.act) for a, b in zip(sizes[:-1], sizes[1:])]
        layers.append(Dense(sizes[-1], dim, "identity"))
        fnet = NetworkSpec(layers, "mse").init(init_rng)
        self.ode = OdeModel(OdeField(fnet, oc.horizon, oc.steps), loss, out_dim, self.data.in_dim)

    # -- model plumbing -------------------------------------------------

    def current_net(self):
        if self.ode is not None:
            return None
        if self.arch is not None:
            return self.arch.build(self.policy.arms[self.arm], self.logical)
        return self.net

    def optimizer(self, key=None):
        if key not in self.optimizers:
            self.optimizers[key] = make_optimizer(self.cfg.optimizer.mode, self.cfg)
        return self.optimizers[key]

    def predict(self, X):
        if self.ode is not None:
            return self.ode.predict(X)
        return forward(self.current_net(), X).output

    def loss_fn(self):
        return self.ode.loss if self.ode is not None else self.current_net().loss

    def evaluate(self, split):
        X, y = self.data.split(split)
        if len(y) == 0:
            return None, None
        out = self.predict(X)
        loss = self.loss_fn().value(out, y)
        acc = accuracy(out, y) if self.data.task == "classification" else None
        return loss, acc

    # -- one step -------------------------------------------------------

    def _train_step(self, X, y):
        if self.ode is not None:
            oc, opt = self.cfg.ode, self.cfg.optimizer
            res = node_step(self.ode, X, y, gamma=opt.gamma, lr=opt.lr,
                            curvature=self.cfg.curvature.kind or "kfac",
                            gamma_mode=self.cfg.curvature.gamma_mode)
            if oc.horizon_opt:
                horizon_step(self.ode, res, opt.gamma, oc.penalty_c, oc.lr_T,
                             oc.t_min, oc.t_max, oc.horizon_rule)
            out = self.ode.readout(res.traj.xs[-1])
            return res.loss, out, PassDiagnostics()
        net = self.current_net()
        opt = self.optimizer(self.arm)
        alignment = self.policy.arms[self.arm] if self.arch is not None else None
        if self.players is not None:
            stage_split = self._stage_players(alignment)
            res = cooperative_step(stage_split, net, X, y, opt)
            self._store_players(stage_split, alignment)
        else:
            res = opt.step(net, X, y)
        if self.arch is not None:
            self.logical = self.arch.from_stages(net.params, alignment)
        else:
            self.logical = net.params
        return res.loss, res.output, res.diagnostics

    def _stage_players(self, alignment):
        if self.arch is None:
            return PlayerSplit([P.copy() for P in self.players.players])
        N = self.players.n_players
        rows = [self.arch.to_stages([P[n] for P in self.players.players], alignment)
                for n in range(N)]
        return PlayerSplit([np.vstack([rows[n][k] for n in range(N)])
                            for k in range(len(rows[0]))])

    def _store_players(self, stage_split, alignment):
        if self.arch is None:
            self.players = stage_split
            return
        N = stage_split.n_players
        rows = [self.arch.from_stages([P[n] for P in stage_split.players], alignment)
                for n in range(N)]
        self.players = PlayerSplit([np.vstack([rows[n][k] for n in range(N)])
                                    for k in range(len(rows[0]))])

    def _maybe_realign(self):
        if self.policy is None or self.policy.kind == "fixed":
            return
        period = max(1, self.cfg.game.reward_period)
        if self.step > 0 and self.step % period == 0:
            _, acc = self.evaluate("val")
            self.policy.reward(self.arm, acc if acc is not None else 0.0)
            self.arm = self.policy.select(self.step // period)

    # -- loop -----------------------------------------------------------

    def run(self, epochs=None):
        """Train until ``epochs`` total epochs are done (default: config)."""
        total = self.cfg.train.epochs if epochs is None else epochs
        Xtr, ytr = self.data.split("train")
        bs = self.cfg.train.batch_size
        metrics, timing = self._open_sinks()
        try:
            while self.epoch < total:
                perm = self.rng.permutation(len(ytr))
                n_batches = (len(perm) + bs - 1) // bs
                for b in range(n_batches):
                    idx = perm[b * bs:(b + 1) * bs]
                    self._maybe_realign()
                    t0 = time.perf_counter()
                    try:
                        loss, out, diag = self._train_step(Xtr[idx], ytr[idx])
                    except DivergedError as exc:
                        self.diverged = f"epoch {self.epoch + 1}, step {self.step + 1}: {exc}"
                        raise DivergedError(f"training diverged at {self.diverged}",
                                            layer=exc.layer) from exc
                    ms = 1e3 * (time.perf_counter() - t0)
                    self.step += 1
                    last = b == n_batches - 1
                    every = self.cfg.train.eval_every
                    row = self._row(Xtr[idx], ytr[idx], loss, out, diag,
                                    evaluate=last or (every > 0 and self.step % every == 0))
                    if metrics is not None:
                        metrics.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
                        timing.writerow([self.step, f"{ms:.3f}"])
                self.epoch += 1
                ce = self.cfg.train.checkpoint_every
                if self.out_dir and ce > 0 and self.epoch % ce == 0:
                    self.save_checkpoint(os.path.join(self.out_dir, f"checkpoint-epoch{self.epoch}.ocno"))
        finally:
            self._close_sinks()
        if self.out_dir:
            self.save_checkpoint(os.path.join(self.out_dir, "checkpoint.ocno"))
        return self.summary()

    def _row(self, Xb, yb, loss, out, diag, evaluate):
        row = dict.fromkeys(METRIC_COLUMNS)
        row.update(step=self.step, epoch=self.epoch + 1, loss=loss,
                   gain_q=diag.gain_q, gain_p=diag.gain_p, radicand_clamps=diag.clamps)
        if self.data.task == "classification":
            row["train_acc"] = accuracy(out, yb)
        if evaluate:
            row["val_loss"], row["val_acc"] = self.evaluate("val")
            row["test_loss"], row["test_acc"] = self.evaluate("test")
        if self.ode is not None:
            row["horizon"] = self.ode.field.T
        if self.arm is not None:
            row["arm"] = self.arm
        return row

    def summary(self):
        out = {"epochs": self.epoch, "steps": self.step}
        for split in ("train", "val", "test"):
            loss, acc = self.evaluate(split)
            out[f"{split}_loss"] = loss
            out[f"{split}_acc"] = acc
        if self.ode is not None:
            out["horizon"] = self.ode.field.T
        if self.arm is not None:
            out["arm"] = self.arm
        return out

    # -- sinks ------------------------------------------------------------

    def _open_sinks(self):
        self._files = []
        if not self.out_dir:
            return None, None
        os.makedirs(self.out_dir, exist_ok=True)
        mpath = os.path.join(self.out_dir, "metrics.csv")
        tpath = os.path.join(self.out_dir, "timing.csv")
        fresh = self.step == 0 or not os.path.exists(mpath)
        mf = open(mpath, "w" if fresh else "a", newline="")
        tf = open(tpath, "w" if fresh else "a", newline="")
        self._files = [mf, tf]
        metrics, timing = csv.writer(mf, lineterminator="\n"), csv.writer(tf, lineterminator="\n")
        if fresh:
            metrics.writerow(METRIC_COLUMNS)
            timing.writerow(["step", "ms"])
            self.write_manifest()
        return metrics, timing

    def _close_sinks(self):
        for f in getattr(self, "_files", []):
            f.close()
        self._files = []

    def write_manifest(self):
        d = self.data
        manifest = {"config": self.cfg.to_dict(),
                    "dataset": {"n": d.n, "in_dim": d.in_dim, "out_dim": d.out_dim,
                                "task": d.task, "train": len(d.train), "val": len(d.val),
                                "test": len(d.test)},
                    "metrics_columns": list(METRIC_COLUMNS)}
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    # -- checkpoints ------------------------------------------------------

    def state_arrays(self):
        arrays = {}
        if self.ode is not None:
            params = self.ode.field.params
        else:
            params = self.logical
        for i, th in enumerate(params):
            arrays[f"param.{i}"] = th
        if self.players is not None:
            for i, P in enumerate(self.players.players):
                arrays[f"player.{i}"] = P
        for key in sorted(self.optimizers, key=lambda k: -1 if k is None else k):
            cv = self.optimizers[key].curvature
            if cv is not None:
                for name, arr in cv.state_dict().items():
                    arrays[f"curv.{'-' if key is None else key}.{name}"] = arr
        if self.policy is not None and self.policy.bandit is not None:
            arrays.update(self.policy.bandit.state_dict())
        return arrays

    def state_meta(self):
        meta = {"step": self.step, "epoch": self.epoch, "rng": self.rng.bit_generator.state,
                "config": self.cfg.to_dict()}
        if self.ode is not None:
            meta["horizon"] = self.ode.field.T
        if self.arm is not None:
            meta["arm"] = self.arm
        return meta

    def save_checkpoint(self, path):
        ckpt.save(path, self.state_arrays(), self.state_meta())

    @classmethod
    def from_checkpoint(cls, path, out_dir=None, config=None):
        arrays, meta = ckpt.load(path)
        cfg = config or TrainConfig.from_dict(meta["config"])
        run = cls(cfg, out_dir)
        run.load_state(arrays, meta)
        return run

    def load_state(self, arrays, meta):
        self.step, self.epoch = int(meta["step"]), int(meta["epoch"])
        self.rng.bit_generator.state = meta["rng"]
        params = [arrays[f"param.{i}"] for i in range(sum(k.startswith("param.") for k in arrays))]
        if self.ode is not None:
            self.ode.field.net.params = params
            self.ode.field.T = float(meta["horizon"])
        else:
            self.logical = params
            if self.arch is None:
                self.net.params = params
        if self.players is not None:
            self.players = PlayerSplit([arrays[f"player.{i}"] for i in range(len(params))])
        curv = {}
        for name, arr in arrays.items():
            if name.startswith("curv."):
                _, key, rest = name.split(".", 2)
                curv.setdefault(None if key == "-" else int(key), {})[rest] = arr
        for key, state in curv.items():
            self.optimizer(key).curvature.load_state_dict(state)
        if self.policy is not None:
            self.arm = int(meta["arm"])
            if self.policy.bandit is not None:
                self.policy.bandit.load_state_dict(arrays)


def train(config, out_dir=None, resume=None):
    """Run (or resume) training; returns the summary dict."""
    if isinstance(config, dict):
        config = TrainConfig.from_dict(config)
    run = TrainRun.from_checkpoint(resume, out_dir, config) if resume else TrainRun(config, out_dir)
    return run.run()
