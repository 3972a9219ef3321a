"""Game-theoretic extensions: fictitious players and alignment selection.

Fictitious players split each layer's parameters into ``N`` parts whose sum
is the layer parameter.  The layer map depends on the players only through
the sum, so every player sees the same Jacobian ``f^theta``.  Expanding the
Bellman objective over the stacked player vector gives the curvature
``(1 1^T) kron C`` whose pseudo-inverse is ``(1 1^T / N^2) kron C^+``; the
cooperative solution hands each player ``1/N`` of the step computed from
the player-averaged ``Q^theta``.  With per-player weight decay
``gamma/2 ||theta_n||^2`` that average equals the collapsed ``Q^theta``
with weight decay ``gamma / N``.

Alignment selection treats each placement of the skip layers of a residual
network as an arm of an exponential-weights bandit whose reward is the
validation accuracy.
"""
import itertools
import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .core import Optimizer

NOISE_SCALE = 1e-3


def _ordered_sum(parts):
    total = parts[0].copy()
    for p in parts[1:]:
        total = total + p
    return total


def _complete(theta, head):
    """Append the last player so that the ordered sum reproduces ``theta``.

    Entries where rounding would break the identity fall back to the
    noise-free split ``theta / N``, which always collapses exactly.
    """
    N = len(head) + 1
    if N == 1:
        return theta.copy()[None, :]
    players = np.vstack(head + [np.zeros_like(theta)])
    players[-1] = theta - _ordered_sum(list(players[:-1]))
    bad = _ordered_sum(list(players)) != theta
    if np.any(bad):
        players[:-1, bad] = theta[bad] / N
        players[-1, bad] = theta[bad] - _ordered_sum(list(players[:-1, bad]))
    return players


@dataclass
class PlayerSplit:
    """``players[k]`` has shape ``(N, P_k)``; rows sum to layer ``k``'s parameters."""

    players: List[np.ndarray]

    @property
    def n_players(self):
        return self.players[0].shape[0] if self.players else 1

    def collapse(self):
        return [_ordered_sum(list(P)) for P in self.players]


def split_players(net, N, rng, noise_scale=NOISE_SCALE):
    """Split every layer into ``N`` players ``theta/N + zeta_n`` with ``sum zeta_n = 0``.

    ``net`` is a ``NetworkSpec`` or a plain list of parameter arrays.
    """
    if N < 1:
        raise ValueError("player count must be at least 1")
    params = net.params if hasattr(net, "params") else net
    out = []
    for th in params:
        th = np.asarray(th, dtype=np.float64)
        if N == 1 or th.size == 0:
            out.append(np.tile(th, (N, 1)) / N if th.size == 0 else th.copy()[None, :])
            continue
        scale = noise_scale * np.linalg.norm(th) / math.sqrt(th.size)
        zeta = rng.normal(0.0, 1.0, size=(N, th.size)) * scale
        zeta -= zeta.mean(axis=0)
        head = [th / N + zeta[n] for n in range(N - 1)]
        out.append(_complete(th, head))
    return PlayerSplit(out)


def cooperative_step(split: PlayerSplit, net, X, y, opt: Optimizer):
    """One cooperative update of all players.

    ``net.params`` must equal ``split.collapse()``.  The joint subproblem is
    solved by one optimizer step on the collapsed network with weight decay
    ``gamma / N``; each player then moves by ``1/N`` of the collapsed update
    and the last player is re-derived to keep the sum exact.  ``net.params``
    is replaced by the new collapsed parameters.
    """
    N = split.n_players
    old = [th.copy() for th in net.params]
    gamma = opt.gamma
    opt.gamma = gamma / N
    try:
        res = opt.step(net, X, y)
    finally:
        opt.gamma = gamma
    new_players = []
    for P, th_old, th_new in zip(split.players, old, net.params):
        if th_new.size == 0:
            new_players.append(P)
            continue
        delta = th_new - th_old
        head = [P[n] + delta / N for n in range(N - 1)]
        new_players.append(_complete(th_new, head))
    split.players = new_players
    net.params = split.collapse()
    return res


class AlignmentBandit:
    """Exponential weights over arms with uniform exploration mixing.

    Probabilities are ``(1 - explore) * w / sum(w) + explore / n``.  A reward
    ``r`` in [0, 1] for the pulled arm becomes the importance-weighted loss
    ``(b - r) / prob`` and the arm's log-weight drops by ``lr`` times that,
    where the baseline ``b`` is the mean of the rewards seen before (the
    first reward is its own baseline).  Subtracting a baseline shared by all
    arms leaves the expected update unchanged up to a common shift, which
    exponential weights ignore, and removes the drift that equal rewards
    would otherwise cause.  The default learning rate is
    ``sqrt(ln(n) / horizon)``.
    """

    def __init__(self, n_arms, rng, explore=0.05, horizon=1000, lr=None):
        if n_arms < 1:
            raise ValueError("bandit needs at least one arm")
        self.n = int(n_arms)
        self.rng = rng
        self.explore = float(explore)
        self.lr = math.sqrt(math.log(self.n) / horizon) if lr is None else float(lr)
        self.logw = np.zeros(self.n)
        self.clamps = 0
        self.reward_sum = 0.0
        self.history = []

    @property
    def floor(self):
        return self.explore / self.n

    def probabilities(self):
        w = np.exp(self.logw - self.logw.max())
        return (1.0 - self.explore) * w / w.sum() + self.explore / self.n

    def select(self, round_index=None):
        if self.n == 1:
            return 0
        probs = self.probabilities()
        u = self.rng.random()
        arm = int(np.searchsorted(np.cumsum(probs), u, side="right"))
        return min(arm, self.n - 1)

    def reward(self, arm, r):
        r = float(r)
        if not 0.0 <= r <= 1.0:
            self.clamps += 1
            r = min(max(r, 0.0), 1.0)
        probs = self.probabilities()
        base = self.reward_sum / len(self.history) if self.history else r
        self.logw[arm] -= self.lr * (base - r) / probs[arm]
        self.reward_sum += r
        self.logw -= self.logw.max()
        self.history.append((int(arm), r))

    def state_dict(self):
        return {"bandit.logw": self.logw.copy(),
                "bandit.stats": np.array([float(self.clamps), self.reward_sum,
                                          float(len(self.history))])}

    def load_state_dict(self, state):
        if "bandit.logw" in state:
            self.logw = np.array(state["bandit.logw"], dtype=np.float64)
            clamps, self.reward_sum, n = state["bandit.stats"]
            self.clamps = int(clamps)
            self.history = [(-1, self.reward_sum / n)] * int(n) if n else []


def alignment_arms(block_depths, max_arms=None):
    """All joint placements of one skip per block, in lexicographic order."""
    arms = list(itertools.product(*[range(d) for d in block_depths]))
    return arms[:max_arms] if max_arms else arms


class AlignmentPolicy:
    """``fixed:i``, ``random`` or ``bandit`` choice of an arm per round."""

    def __init__(self, spec, arms, rng, explore=0.05, horizon=1000):
        self.arms = list(arms)
        self.rng = rng
        self.bandit = None
        if spec.startswith("fixed"):
            self.kind = "fixed"
            idx = int(spec.split(":", 1)[1]) if ":" in spec else 0
            if not 0 <= idx < len(self.arms):
                raise ValueError(f"alignment index {idx} outside 0..{len(self.arms) - 1}")
            self.fixed = idx
        elif spec == "random":
            self.kind = "random"
        elif spec == "bandit":
            self.kind = "bandit"
            self.bandit = AlignmentBandit(len(self.arms), rng, explore, horizon)
        else:
            raise ValueError(f"unknown alignment strategy {spec!r}")

    def select(self, round_index=0):
        if self.kind == "fixed":
            return self.fixed
        if self.kind == "random":
            return int(self.rng.integers(len(self.arms)))
        return self.bandit.select(round_index)

    def reward(self, arm, r):
        if self.bandit is not None:
            self.bandit.reward(arm, r)
