"""Layer-wise dynamic-programming updates with rank-1 feedback policies.

One optimizer step:

1. forward the batch and keep the hidden states;
2. sweep backward from the loss, building for every layer the open-loop step
   ``g = Q_tt^+ Q_t`` and the closed-loop pair ``(h = Q_tt^+ p, q)`` while
   carrying the value gradient ``V^x`` and the rank-1 Hessian factor ``r``;
3. sweep forward once more, feeding each layer the state deviation produced
   by the updates already applied upstream.

The mini-batch is one stacked system: ``q`` and ``r`` hold one row per
sample, the parameter-space vectors ``p``, ``g``, ``h`` are batch sums, and
``q . dX`` contracts over the whole batch.
"""
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .curvature import make_curvature
from .errors import DivergedError
from .netgraph import forward

DEFAULT_BETA = 0.1
RADICAND_SLACK = 1e-10


def _radicand(quad):
    return 1.0 - quad


@dataclass
class FeedbackPolicy:
    """``dtheta(dX) = -(g + h * <q, dX>)``."""

    g: np.ndarray
    h: np.ndarray
    q: np.ndarray

    @property
    def closed_loop(self):
        return bool(np.any(self.h))

    def __call__(self, dX=None):
        if dX is None or not self.closed_loop:
            return -self.g
        return -(self.g + self.h * float(np.sum(self.q * dX)))


@dataclass
class BackwardState:
    vx: np.ndarray
    r: np.ndarray
    radicand: float = 1.0
    p: np.ndarray = None


@dataclass
class PassDiagnostics:
    clamps: int = 0
    radicands: List[float] = field(default_factory=list)
    q_norms: List[float] = field(default_factory=list)
    p_norms: List[float] = field(default_factory=list)

    @property
    def gain_q(self):
        return float(np.sqrt(np.sum(np.square(self.q_norms))))

    @property
    def gain_p(self):
        return float(np.sqrt(np.sum(np.square(self.p_norms))))


def _finite(k, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergedError(f"non-finite value in backward pass at layer {k}", layer=k)


def clamp_radicand(rad, diag=None):
    clamped = min(max(rad, 0.0), 1.0)
    if diag is not None and (rad < -RADICAND_SLACK or rad > 1.0 + RADICAND_SLACK):
        diag.clamps += 1
    return clamped


def backward_pass(net, acts, targets, curvature, gamma=0.0, beta=DEFAULT_BETA,
                  feedback=True, update_curvature=True, terminal=None):
    """Backward sweep producing one feedback policy per layer.

    ``terminal`` optionally overrides the rank-1 terminal factor ``y``
    (default ``beta * dL/dx_K``).  Returns ``(policies, states, diagnostics)``
    where ``states[k]`` holds ``V^x_k`` and ``r_k`` for ``k = 0..K``.
    """
    K = net.depth
    Vx = net.loss.grad(acts.output, targets)
    r = beta * Vx if terminal is None else np.asarray(terminal, dtype=np.float64).reshape(Vx.shape)
    states = [None] * (K + 1)
    policies = [None] * K
    states[K] = BackwardState(Vx, r)
    diag = PassDiagnostics()
    for k in range(K - 1, -1, -1):
        layer, th, X = net.layers[k], net.params[k], acts.xs[k]
        Qx = layer.vjp_x(X, th, Vx)
        Qt = gamma * th + layer.vjp_theta(X, th, Vx)
        if update_curvature:
            curvature.update_stats(k, layer, X, th, Vx, Qt)
        g = curvature.apply_pinv(k, Qt)
        q = layer.vjp_x(X, th, r)
        if feedback:
            p = layer.vjp_theta(X, th, r)
            h = curvature.apply_pinv(k, p)
            Vx = Qx - q * float(p @ g)
            rad = _radicand(float(p @ h))
            r = np.sqrt(clamp_radicand(rad, diag)) * q
            diag.p_norms.append(float(np.linalg.norm(p)))
        else:
            p = None
            h = np.zeros_like(g)
            Vx, r, rad = Qx, q, 1.0
        _finite(k, Vx, r, g, h)
        diag.radicands.append(rad)
        diag.q_norms.append(float(np.linalg.norm(q)))
        policies[k] = FeedbackPolicy(g, h, q)
        states[k] = BackwardState(Vx, r, rad, p)
    diag.radicands.reverse()
    diag.q_norms.reverse()
    diag.p_norms.reverse()
    return policies, states, diag


def forward_update(net, acts, policies, lr):
    """Apply ``theta_k <- theta_k + lr * dtheta_k(dx_k)`` layer by layer.

    The state deviation ``dx_k`` is measured on the trajectory of the
    parameters actually written, starting from ``dx_0 = 0``.  Returns the new
    parameter list and the deviations ``dx_0 .. dx_K``.
    """
    dX = np.zeros_like(acts.xs[0])
    deltas = [dX]
    new_params = []
    need_forward = any(pol.closed_loop for pol in policies)
    for k, (layer, th, pol) in enumerate(zip(net.layers, net.params, policies)):
        th_new = th + lr * pol(dX)
        new_params.append(th_new)
        if need_forward:
            dX = layer.forward(acts.xs[k] + dX, th_new) - acts.xs[k + 1]
            if not np.all(np.isfinite(dX)):
                raise DivergedError(f"non-finite state deviation after layer {k}", layer=k)
            deltas.append(dX)
    if not need_forward:
        deltas.extend(np.zeros_like(x) for x in acts.xs[1:])
    for k, th in enumerate(new_params):
        if not np.all(np.isfinite(th)):
            raise DivergedError(f"non-finite parameters at layer {k}", layer=k)
    return new_params, deltas


def scalar_gn_backward(net, acts, targets, curvature, beta=DEFAULT_BETA):
    """Scalar recursion for the Gauss-Newton terminal with no weight decay.

    Returns ``(alphas, alpha_bars, grads)`` indexed ``0..K`` such that
    ``r_k = alphas[k] * grads[k]`` and ``V^x_k = alpha_bars[k] * grads[k]``,
    where ``grads[k] = dL/dx_k``.  The curvature is read, never updated.
    """
    K = net.depth
    grads = [None] * (K + 1)
    grads[K] = net.loss.grad(acts.output, targets)
    alphas = [0.0] * (K + 1)
    bars = [0.0] * (K + 1)
    alphas[K], bars[K] = float(beta), 1.0
    for k in range(K - 1, -1, -1):
        layer, th, X = net.layers[k], net.params[k], acts.xs[k]
        grads[k] = layer.vjp_x(X, th, grads[k + 1])
        pg = layer.vjp_theta(X, th, grads[k + 1])
        s = curvature.quadratic_form(k, pg) if pg.size else 0.0
        a2s = alphas[k + 1] ** 2 * s
        alphas[k] = float(np.sqrt(clamp_radicand(_radicand(a2s))) * alphas[k + 1])
        bars[k] = float(bars[k + 1] * _radicand(a2s))
    return alphas, bars, grads


MODES = {
    "ocnopt-identity": ("identity", True),
    "ocnopt-adaptive": ("adaptive", True),
    "ocnopt-kfac": ("kfac", True),
    "sgd": ("identity", False),
    "rmsprop-like": ("adaptive", False),
    "ekfac-like": ("kfac", False),
    "newton-oracle": (None, False),
}


@dataclass
class StepResult:
    loss: float
    diagnostics: PassDiagnostics
    deltas: list = None
    output: np.ndarray = None


class Optimizer:
    """Stateful wrapper that runs one full update per call to ``step``."""

    def __init__(self, mode, lr, gamma=0.0, beta=DEFAULT_BETA, curvature=None,
                 feedback=None):
        if mode not in MODES:
            raise ValueError(f"unknown optimizer mode {mode!r}; choose from {sorted(MODES)}")
        kind, default_feedback = MODES[mode]
        self.mode, self.lr, self.gamma, self.beta = mode, float(lr), float(gamma), float(beta)
        self.feedback = default_feedback if feedback is None else bool(feedback)
        if mode == "newton-oracle":
            self.curvature = None
        else:
            self.curvature = curvature if curvature is not None else make_curvature(kind)

    def step(self, net, X, y):
        """Update ``net.params`` in place; returns the pre-update loss."""
        acts = forward(net, X)
        loss = net.loss.value(acts.output, y)
        if not np.isfinite(loss):
            raise DivergedError("loss is not finite")
        if self.mode == "newton-oracle":
            from .oracle import newton_reference
            steps = newton_reference(net, X, y, self.gamma)
            net.params = [th + self.lr * d for th, d in zip(net.params, steps)]
            return StepResult(loss, PassDiagnostics(), output=acts.output)
        policies, _, diag = backward_pass(net, acts, y, self.curvature, self.gamma,
                                          self.beta, feedback=self.feedback)
        net.params, deltas = forward_update(net, acts, policies, self.lr)
        return StepResult(loss, diag, deltas, acts.output)


def make_optimizer(mode, hyper=None, **overrides):
    """Build an optimizer from a mode string and a ``TrainConfig`` (or dict).

    Baseline modes are the same machinery with the closed-loop gain off.
    """
    from .config import TrainConfig
    if hyper is None:
        hyper = TrainConfig()
    elif isinstance(hyper, dict):
        hyper = TrainConfig.from_dict(hyper)
    if mode not in MODES:
        raise ValueError(f"unknown optimizer mode {mode!r}; choose from {sorted(MODES)}")
    opt = hyper.optimizer
    kind = MODES[mode][0]
    if kind is not None and hyper.curvature.kind:
        kind = hyper.curvature.kind
    curvature = None
    if kind is not None:
        cc = hyper.curvature
        damping = opt.gamma if cc.damping is None else cc.damping
        curvature = make_curvature(kind, eps=cc.eps, ema=cc.ema, refresh=cc.refresh,
                                   damping=damping, gamma_mode=cc.gamma_mode,
                                   pinv_tol=cc.pinv_tol)
    kw = dict(lr=opt.lr, gamma=opt.gamma, beta=opt.beta, curvature=curvature,
              feedback=opt.feedback)
    kw.update(overrides)
    return Optimizer(mode, **kw)
