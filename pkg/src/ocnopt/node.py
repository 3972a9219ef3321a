"""Second-order training of neural ODEs ``dx/dt = F(t, x, theta)``.

The field ``F`` is a feed-forward ``NetworkSpec`` evaluated on ``[x, t]``.
Integration is classical RK4 on ``M`` uniform steps over ``[0, T]``.  The
backward sweep integrates the adjoint ``q`` and the parameter factor ``p``
with RK4 on the reversed clock, reading the state at half steps from a cubic
Hermite interpolant of the stored nodes, and accumulates per-layer Kronecker
factors with the trapezoid rule on the same nodes.

The integration horizon ``T`` can be optimized jointly: the penalized
terminal cost is ``L(x_T) + c T^2 / 2`` and the horizon step is a scalar
Newton step on the second-order expansion in ``T`` with the state deviation
dropped.
"""
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .curvature import KfacCurvature
from .errors import DimensionError, DivergedError
from .netgraph import NetworkSpec, make_loss

T_MIN, T_MAX = 0.05, 4.0


class OdeField:
    """``F(t, x) = net([x, t])`` with ``T`` and step count ``M``."""

    def __init__(self, net: NetworkSpec, horizon=1.0, steps=20):
        if net.in_dim != net.out_dim + 1:
            raise DimensionError("field network must map [x, t] (d + 1) to d")
        if steps < 4:
            raise ValueError("at least 4 integration steps are required")
        self.net, self.T, self.steps = net, float(horizon), int(steps)

    @property
    def dim(self):
        return self.net.out_dim

    @property
    def params(self):
        return self.net.params

    @property
    def n_params(self):
        return sum(p.size for p in self.net.params)

    def _inputs(self, t, X):
        return np.hstack([X, np.full((X.shape[0], 1), float(t))])

    def __call__(self, t, X, params=None):
        params = self.net.params if params is None else params
        Z = self._inputs(t, X)
        for layer, th in zip(self.net.layers, params):
            Z = layer.forward(Z, th)
        return Z

    def vjp(self, t, X, Q, params=None, blocks=False):
        """``(F^x^T Q, [F^theta_k^T Q], kfac blocks or None)`` at ``(t, X)``."""
        params = self.net.params if params is None else params
        zs = [self._inputs(t, X)]
        for layer, th in zip(self.net.layers, params):
            zs.append(layer.forward(zs[-1], th))
        V = Q
        grads = [None] * len(params)
        kb = [None] * len(params) if blocks else None
        for k in range(len(params) - 1, -1, -1):
            layer, th = self.net.layers[k], params[k]
            grads[k] = layer.vjp_theta(zs[k], th, V)
            if blocks:
                kb[k] = layer.kfac_blocks(zs[k], th, V)
            V = layer.vjp_x(zs[k], th, V)
        return V[:, :-1], grads, kb


@dataclass
class Trajectory:
    T: float
    xs: np.ndarray      # (M + 1, B, d) states at the nodes
    fs: np.ndarray      # (M + 1, B, d) field values at the nodes

    @property
    def steps(self):
        return self.xs.shape[0] - 1

    @property
    def h(self):
        return self.T / self.steps

    def t(self, n):
        return n * self.h

    def midpoint(self, n):
        """Hermite interpolant of the state halfway between nodes n, n+1."""
        x0, x1, f0, f1 = self.xs[n], self.xs[n + 1], self.fs[n], self.fs[n + 1]
        return 0.5 * (x0 + x1) + 0.125 * self.h * (f0 - f1)


def _blowup(n, X):
    if not np.all(np.isfinite(X)):
        raise DivergedError(f"ODE state blew up at node {n}", layer=n)


def ode_forward(fld: OdeField, X0, params=None):
    X = np.asarray(X0, dtype=np.float64)
    M, h = fld.steps, fld.T / fld.steps
    xs = np.empty((M + 1,) + X.shape)
    fs = np.empty_like(xs)
    xs[0] = X
    for n in range(M):
        t = n * h
        k1 = fld(t, X, params)
        k2 = fld(t + 0.5 * h, X + 0.5 * h * k1, params)
        k3 = fld(t + 0.5 * h, X + 0.5 * h * k2, params)
        k4 = fld(t + h, X + h * k3, params)
        fs[n] = k1
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _blowup(n + 1, X)
        xs[n + 1] = X
    fs[M] = fld(M * h, X, params)
    return Trajectory(fld.T, xs, fs)


@dataclass
class OdeBackwardFactors:
    qs: np.ndarray                  # (M + 1, B, d)
    ps: np.ndarray                  # (M + 1, P) stacked layer factors
    p0: List[np.ndarray]            # per-layer p at t = 0
    grad: List[np.ndarray]          # p0 + gamma T theta
    A: list = field(default_factory=list)   # per layer: list of (slice, A)
    Bf: list = field(default_factory=list)  # per layer: list of B factors

    @property
    def q0(self):
        return self.qs[0]


def _accumulate(acc, blocks, w):
    for k, kb in enumerate(blocks):
        if acc[k] is None:
            acc[k] = [[sl, 0.0, 0.0] for sl, _, _ in kb]
        for slot, (_, xa, vh) in zip(acc[k], kb):
            Bn = xa.shape[0]
            slot[1] = slot[1] + w * (xa.T @ xa) / Bn
            slot[2] = slot[2] + w * Bn * (vh.T @ vh)


def ode_backward(fld: OdeField, traj: Trajectory, gT, gamma=0.0, params=None, factors=True):
    """Integrate ``-dq/dt = F^x^T q`` and ``-dp/dt = F^theta^T q`` from ``T`` to 0.

    ``gT`` is ``dL/dx_T``.  With ``factors`` the per-layer Kronecker factors
    ``A_k = int mean(z z^T) dt`` and ``B_k = int B sum(v_h v_h^T) dt`` are
    accumulated by the trapezoid rule on the stored nodes.
    """
    params = fld.params if params is None else params
    M, h = traj.steps, traj.h
    q = np.asarray(gT, dtype=np.float64).copy()
    sizes = [p.size for p in params]
    p = np.zeros(sum(sizes))
    qs = np.empty_like(traj.xs)
    ps = np.empty((M + 1, p.size))
    qs[M], ps[M] = q, p
    acc = [None] * len(params)

    def rhs(t, X, Q, with_blocks=False):
        gx, gth, kb = fld.vjp(t, X, Q, params, blocks=with_blocks)
        return gx, np.concatenate(gth) if gth else np.zeros(0), kb

    for n in range(M - 1, -1, -1):
        t1, tm, t0 = (n + 1) * h, (n + 0.5) * h, n * h
        xm = traj.midpoint(n)
        k1q, k1p, kb = rhs(t1, traj.xs[n + 1], q, factors)
        if factors:
            _accumulate(acc, kb, h if n + 1 < M else 0.5 * h)
        k2q, k2p, _ = rhs(tm, xm, q + 0.5 * h * k1q)
        k3q, k3p, _ = rhs(tm, xm, q + 0.5 * h * k2q)
        k4q, k4p, _ = rhs(t0, traj.xs[n], q + h * k3q)
        q = q + (h / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
        p = p + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        _blowup(n, q)
        qs[n], ps[n] = q, p
    if factors:
        _, _, kb = rhs(0.0, traj.xs[0], q, True)
        _accumulate(acc, kb, 0.5 * h)
    offs = np.cumsum([0] + sizes)
    p0 = [p[offs[k]:offs[k + 1]].copy() for k in range(len(sizes))]
    grad = [pk + gamma * traj.T * th for pk, th in zip(p0, params)]
    out = OdeBackwardFactors(qs, ps, p0, grad)
    if factors:
        out.A = [[(sl, a) for sl, a, _ in slots] for slots in acc]
        out.Bf = [[g for _, _, g in slots] for slots in acc]
    return out


class OdeModel:
    """Neural-ODE predictor: zero-pad the input, integrate, read the first coordinates."""

    def __init__(self, fld: OdeField, loss="softmax-ce", n_out=None, in_dim=None):
        self.field = fld
        self.loss = make_loss(loss) if isinstance(loss, str) else loss
        self.n_out = fld.dim if n_out is None else int(n_out)
        self.in_dim = fld.dim if in_dim is None else int(in_dim)
        if self.n_out > fld.dim or self.in_dim > fld.dim:
            raise DimensionError("state must be at least as wide as the input and the output")

    def embed(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.in_dim:
            raise DimensionError(f"input has {X.shape[1]} features, expected {self.in_dim}")
        return np.hstack([X, np.zeros((X.shape[0], self.field.dim - self.in_dim))])

    def readout(self, XT):
        return XT[:, :self.n_out]

    def terminal_grad(self, XT, y):
        G = np.zeros_like(XT)
        G[:, :self.n_out] = self.loss.grad(self.readout(XT), y)
        return G

    def predict(self, X):
        return self.readout(ode_forward(self.field, self.embed(X)).xs[-1])

    def objective(self, X, y, gamma=0.0, c=0.0):
        """``L(x_T) + T * gamma/2 ||theta||^2 + c T^2 / 2``."""
        traj = ode_forward(self.field, self.embed(X))
        reg = 0.5 * gamma * sum(float(th @ th) for th in self.field.params)
        T = self.field.T
        return self.loss.value(self.readout(traj.xs[-1]), y) + T * reg + 0.5 * c * T * T


@dataclass
class NodeStepResult:
    loss: float
    deltas: List[np.ndarray]
    traj: Trajectory
    factors: OdeBackwardFactors
    gT: np.ndarray


def layer_curvature(factors: OdeBackwardFactors, damping, gamma_mode="additive", pinv_tol=1e-12):
    """Kronecker curvature model built from the integrated factors."""
    cv = KfacCurvature(damping=damping, gamma_mode=gamma_mode, pinv_tol=pinv_tol)
    for k, (Ak, Bk) in enumerate(zip(factors.A, factors.Bf)):
        if Ak:
            cv.set_factors(k, [(a, b) for (_, a), b in zip(Ak, Bk)], [sl for sl, _ in Ak])
    return cv


def node_step(model: OdeModel, X, y, gamma=0.0, lr=0.1, curvature="kfac",
              gamma_mode="additive", update=True):
    """One open-loop preconditioned step on the field parameters.

    ``curvature`` is ``"kfac"`` (integrated Kronecker factors, damping
    ``gamma T``) or ``"identity"`` (plain gradient step).  Returns the
    pre-update loss and the applied parameter deltas.
    """
    fld = model.field
    traj = ode_forward(fld, model.embed(X))
    XT = traj.xs[-1]
    loss = model.loss.value(model.readout(XT), y)
    if not np.isfinite(loss):
        raise DivergedError("loss is not finite")
    gT = model.terminal_grad(XT, y)
    fac = ode_backward(fld, traj, gT, gamma=gamma, factors=curvature == "kfac")
    if curvature == "kfac":
        cv = layer_curvature(fac, gamma * traj.T, gamma_mode)
        steps = [-cv.apply_pinv(k, g) if g.size else g for k, g in enumerate(fac.grad)]
    elif curvature == "identity":
        steps = [-g for g in fac.grad]
    else:
        raise ValueError(f"unknown ODE curvature {curvature!r}")
    deltas = [lr * s for s in steps]
    if update:
        new = [th + d for th, d in zip(fld.net.params, deltas)]
        for k, th in enumerate(new):
            if not np.all(np.isfinite(th)):
                raise DivergedError(f"non-finite parameters at layer {k}", layer=k)
        fld.net.params = new
    return NodeStepResult(loss, deltas, traj, fac, gT)


@dataclass
class HorizonState:
    T: float
    c: float = 0.1
    QT: float = 0.0
    QTT: float = 0.0
    QTtheta: np.ndarray = None
    dT: float = 0.0
    skipped: bool = False


def horizon_terms(model: OdeModel, res: NodeStepResult, gamma=0.0, c=0.1):
    """Second-order expansion of the penalized objective in ``T`` at ``t = 0``.

    With the Gauss-Newton terminal ``L^xx = g g^T`` the mixed terms
    ``Q^Tx_t`` and ``Q^Ttheta_t`` solve the same linear ODEs as ``q_t`` and
    ``p_t`` scaled by ``s = F(T, x_T) . g``, so
    ``Q^Ttheta_0 = s p_0`` without a further sweep.
    """
    fld = model.field
    T = res.traj.T
    g = res.gT
    s = float(np.sum(res.traj.fs[-1] * g))
    ell = 0.5 * gamma * sum(float(th @ th) for th in fld.params)
    QT = ell + c * T + s
    QTT = c + s * s
    QTtheta = s * np.concatenate(res.factors.p0) if res.factors.p0 else np.zeros(0)
    return QT, QTT, QTtheta


def horizon_step(model: OdeModel, res: NodeStepResult, gamma=0.0, c=0.1, lr_T=0.1,
                 t_min=T_MIN, t_max=T_MAX, rule="second-order"):
    """Update ``model.field.T`` from the terms of the last step.

    ``rule="second-order"`` applies ``dT = -(Q^TT)^+ (Q^T + Q^Ttheta . dtheta)``
    with ``dtheta`` the parameter update just applied; ``"first-order"`` is
    the plain ``dT = -Q^T`` baseline.  Both are scaled by ``lr_T`` and the
    result is clamped to ``[t_min, t_max]``.
    """
    QT, QTT, QTth = horizon_terms(model, res, gamma, c)
    st = HorizonState(model.field.T, c, QT, QTT, QTth)
    if rule == "first-order":
        st.dT = -QT
    elif rule == "second-order":
        if QTT <= 0.0:
            st.skipped = True
            return st
        dtheta = np.concatenate(res.deltas) if res.deltas else np.zeros(0)
        st.dT = -(QT + float(QTth @ dtheta)) / QTT
    else:
        raise ValueError(f"unknown horizon rule {rule!r}")
    model.field.T = float(np.clip(model.field.T + lr_T * st.dT, t_min, t_max))
    st.T = model.field.T
    return st


def build_field(dim, hidden=(16,), act="tanh", horizon=1.0, steps=20, rng=None):
    """Field network ``[x, t] -> hidden -> x`` with identity output."""
    from .netgraph import Dense
    sizes = [dim + 1] + list(hidden)
    layers = [Dense(a, b, act) for a, b in zip(sizes[:-1], sizes[1:])]
    layers.append(Dense(sizes[-1], dim, "identity"))
    net = NetworkSpec(layers, "mse")
    net.init(rng if rng is not None else np.random.default_rng(0))
    return OdeField(net, horizon, steps)
