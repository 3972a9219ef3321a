"""Equivalence claims checked against the dense reference implementations.

Each claim runs a small randomized experiment and reports the largest error
observed next to its tolerance.  ``run_claims("fast")`` covers every
discrete-time identity plus the ODE adjoint gradient; ``"full"`` adds the
dense matrix-ODE comparisons, which take a few seconds more.
"""
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import core
from .core import backward_pass, scalar_gn_backward
from .curvature import AdaptiveCurvature, IdentityCurvature, KfacCurvature
from .linalg import pinv_psd
from .netgraph import Dense, NetworkSpec, forward, predict
from .node import OdeModel, build_field, horizon_terms, node_step, ode_backward, ode_forward
from .oracle import (backprop_reference, dense_ddp_step, dense_matrix_odes, newton_reference,
                     ode_unrolled_gradients, rank_n_backward)

ACTS = ("tanh", "sigmoid", "identity")


@dataclass
class ClaimResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error <= self.tol)


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def random_net(rng, depth=(2, 5), max_dim=6, loss="softmax-ce", batch=2):
    K = int(rng.integers(depth[0], depth[1] + 1))
    dims = rng.integers(2, max_dim + 1, size=K + 1)
    layers = [Dense(a, b, ACTS[int(rng.integers(len(ACTS)))]) for a, b in zip(dims[:-2], dims[1:-1])]
    layers.append(Dense(dims[-2], dims[-1], "identity"))
    net = NetworkSpec(layers, loss).init(rng)
    net.params = [th + 0.1 * rng.normal(size=th.shape) for th in net.params]
    X = rng.normal(size=(batch, dims[0]))
    if loss == "softmax-ce":
        y = rng.integers(0, dims[-1], size=batch)
    else:
        y = rng.normal(size=(batch, dims[-1]))
    return net, X, y


def random_adaptive(rng, net, scale=1.0, uniform=False):
    cv = AdaptiveCurvature(eps=1e-8)
    for k, th in enumerate(net.params):
        sq = np.ones(th.size) if uniform else rng.uniform(0.2, 2.0, th.size)
        cv.set_state(k, scale * sq)
    return cv


def ordered_curvature(rng, net, X, y, terminal="gauss-newton", uniform=False, beta=1.0):
    """Random diagonal curvature scaled until Q_tt dominates p p^T at every layer.

    The rank-1 factorization only holds under that ordering, so the scale is
    chosen by checking that the dense value Hessians stay PSD.
    """
    sq = [np.ones(th.size) if uniform else rng.uniform(0.2, 2.0, th.size) for th in net.params]
    for scale in 10.0 ** np.arange(0, 13, 2):
        cv = AdaptiveCurvature(eps=1e-8)
        for k, v in enumerate(sq):
            cv.set_state(k, scale * v)
        dd = dense_ddp_step(net, X, y, 0.0, terminal=terminal, beta=beta, quu=cv)
        if all(np.linalg.eigvalsh(dd[k]["Vxx"]).min() >= -1e-12 * max(1.0, np.abs(dd[k]["Vxx"]).max())
               for k in range(net.depth)):
            return cv
    return cv


def backprop_equivalence(seeds=20, gammas=(0.0, 1e-4)):
    """Dense DDP with Q_tt := I and Q_tx := 0 is backprop plus gradient descent."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        net, X, y = random_net(rng)
        gt, gx = backprop_reference(net, X, y)
        for gamma in gammas:
            for qxx_zero in (True, False):
                dd = dense_ddp_step(net, X, y, gamma, quu="identity", qux_zero=True,
                                    qxx_zero=qxx_zero)
                for k in range(net.depth):
                    err = max(err, np.abs(dd[k]["Vx"] - gx[k].ravel()).max(),
                              np.abs(dd[k]["k_open"] + gt[k] + gamma * net.params[k]).max())
    return err


def sgd_trajectory(seeds=3, steps=20, gammas=(0.0, 1e-4)):
    """Optimizer in sgd mode versus a hand-written gradient-descent loop."""
    err = 0.0
    for s in range(seeds):
        for gamma in gammas:
            rng = np.random.default_rng(100 + s)
            net, X, y = random_net(rng, depth=(3, 4), batch=4)
            ref = net.copy()
            opt = core.Optimizer("sgd", lr=0.1, gamma=gamma)
            for _ in range(steps):
                opt.step(net, X, y)
                gt, _ = backprop_reference(ref, X, y)
                ref.params = [th - 0.1 * (g + gamma * th) for th, g in zip(ref.params, gt)]
            err = max(err, max(np.abs(a - b).max() for a, b in zip(net.params, ref.params)))
    return err


def newton_equivalence(seeds=8, gamma=0.1):
    """Dense DDP with Q_tx := 0 and exact curvature equals layer-wise Newton."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(200 + s)
        net, X, _ = random_net(rng, depth=(2, 3), loss="mse")
        Y = predict(net, X) + 0.05 * rng.normal(size=(X.shape[0], net.out_dim))
        dd = dense_ddp_step(net, X, Y, gamma, include_f_second=True, terminal="exact-hessian",
                            qux_zero=True)
        nr = newton_reference(net, X, Y, gamma)
        err = max(err, max(rel(dd[k]["k_open"], nr[k]) for k in range(net.depth)))
    return err


def _rank1_case(net, X, y, cv, beta):
    acts = forward(net, X)
    pols, states, _ = backward_pass(net, acts, y, cv, beta=beta, update_curvature=False)
    dd = dense_ddp_step(net, X, y, 0.0, terminal="gauss-newton", beta=beta, quu=cv)
    err = 0.0
    for k in range(net.depth):
        q, p, r = pols[k].q.ravel(), states[k].p, states[k].r.ravel()
        err = max(err, rel(np.outer(q, q), dd[k]["Qxx"]), rel(np.outer(q, p), dd[k]["Qxt"]),
                  rel(np.outer(r, r), dd[k]["Vxx"]), rel(states[k].vx.ravel(), dd[k]["Vx"]))
    return err


def rank1_factorization(seeds=50, beta=1.0):
    """Rank-1 factors reproduce the dense Q_xx, Q_xtheta and V_xx recursions."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(300 + s)
        net, X, y = random_net(rng)
        cv = ordered_curvature(rng, net, X, y, uniform=s % 2 == 0, beta=beta)
        err = max(err, _rank1_case(net, X, y, cv, beta))
    return err


def scalar_recursion(seeds=50, beta=0.5):
    """The scalar alpha recursion reproduces the vector recursion when gamma = 0."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(400 + s)
        net, X, y = random_net(rng)
        cv = IdentityCurvature() if s % 2 == 0 else random_adaptive(rng, net)
        acts = forward(net, X)
        _, states, _ = backward_pass(net, acts, y, cv, beta=beta, update_curvature=False)
        alphas, bars, grads = scalar_gn_backward(net, acts, y, cv, beta=beta)
        for k in range(net.depth + 1):
            g = grads[k].ravel()
            r = states[k].r.ravel()
            err = max(err, np.abs(states[k].vx.ravel() - bars[k] * g).max(),
                      np.abs(np.outer(r, r) - alphas[k] ** 2 * np.outer(g, g)).max())
    return err


def value_hessian_identity(seeds=20, beta=1.0):
    """Dense V_xx equals q (1 - p^T Q_tt^+ p) q^T layer by layer."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(500 + s)
        net, X, y = random_net(rng)
        cv = ordered_curvature(rng, net, X, y, beta=beta)
        acts = forward(net, X)
        pols, states, _ = backward_pass(net, acts, y, cv, beta=beta, update_curvature=False)
        dd = dense_ddp_step(net, X, y, 0.0, terminal="gauss-newton", beta=beta, quu=cv)
        for k in range(net.depth):
            q, p = pols[k].q.ravel(), states[k].p
            scal = 1.0 - p @ dd[k]["Qtt_pinv"] @ p
            err = max(err, np.abs(dd[k]["Vxx"] - scal * np.outer(q, q)).max())
    return err


def radicand_closed_form(seeds=20):
    """With Q_tt = p p^T + gamma I the radicand is gamma / (gamma + |p|^2)."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(600 + s)
        n = int(rng.integers(2, 9))
        p = rng.normal(size=n)
        gamma = float(rng.uniform(0.01, 2.0))
        Q = np.outer(p, p) + gamma * np.eye(n)
        rad = core._radicand(float(p @ pinv_psd(Q) @ p))
        err = max(err, abs(rad - gamma / (gamma + p @ p)))
    return err


def rank_n(seeds=10, ranks=(1, 2, 3)):
    """Rank-N factor propagation matches the dense recursion; N = 1 matches rank-1."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(700 + s)
        net, X, y = random_net(rng, depth=(2, 4))
        for N in ranks:
            R = 0.5 * rng.normal(size=(N,) + (X.shape[0], net.out_dim)) / X.shape[0]
            T = sum(np.outer(r.ravel(), r.ravel()) for r in R)
            cv = ordered_curvature(rng, net, X, y, terminal=T)
            fac = rank_n_backward(net, X, y, R, cv)
            dd = dense_ddp_step(net, X, y, 0.0, terminal=T, quu=cv)
            for k in range(net.depth):
                V = sum(np.outer(r.ravel(), r.ravel()) for r in fac[k])
                err = max(err, rel(V, dd[k]["Vxx"]))
            if N == 1:
                acts = forward(net, X)
                _, states, _ = backward_pass(net, acts, y, cv, update_curvature=False, terminal=R[0])
                for k in range(net.depth):
                    a, b = fac[k][0].ravel(), states[k].r.ravel()
                    err = max(err, rel(np.outer(a, a), np.outer(b, b)))
    return err


def kron_eigenbasis(seeds=20, gammas=(0.0, 0.1)):
    """Eigenbasis Kronecker pseudo-inverse equals the dense (1/gamma) I + (A kron G)^+."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(800 + s)
        m, n = (int(v) for v in rng.integers(1, 6, size=2))
        ra, rg = int(rng.integers(1, m + 1)), int(rng.integers(1, n + 1))
        La, Lg = rng.normal(size=(m, ra)), rng.normal(size=(n, rg))
        A, G = La @ La.T, Lg @ Lg.T
        v = rng.normal(size=m * n)
        for gamma in gammas:
            cv = KfacCurvature(damping=gamma, gamma_mode="additive")
            cv.set_factors(0, [(A, G)], [slice(0, m * n)])
            dense = pinv_psd(np.kron(A, G), tol=1e-12)
            if gamma > 0:
                dense = dense + np.eye(m * n) / gamma
            err = max(err, rel(cv.apply_pinv(0, v), dense @ v))
    return err


def ode_gradient(seeds=3, steps=50):
    """Adjoint (q_0, p_0) equals backprop through the unrolled RK4 graph."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(900 + s)
        d = int(rng.integers(2, 5))
        fld = build_field(d, (4,), "tanh", 1.0, steps, rng)
        X = rng.normal(size=(2, d))
        Y = rng.normal(size=(2, d))
        traj = ode_forward(fld, X)
        fac = ode_backward(fld, traj, traj.xs[-1] - Y, factors=False)
        a, gth = ode_unrolled_gradients(fld, X, lambda XT: XT - Y)
        scale = max(1.0, np.abs(a).max())
        err = max(err, np.abs(a - fac.q0).max() / scale,
                  max(np.abs(g - p).max() for g, p in zip(gth, fac.p0)) / scale)
    return err


def ode_matrix_odes(seeds=2, steps=200, gamma=0.01):
    """(q, p) outer products equal the integrated dense second-order ODEs."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(1000 + s)
        d = int(rng.integers(2, 5))
        fld = build_field(d, (4,), "tanh", 1.0, steps, rng)
        X = rng.normal(size=(1, d))
        traj = ode_forward(fld, X)
        gT = traj.xs[-1] - rng.normal(size=(1, d))
        fac = ode_backward(fld, traj, gT, gamma=gamma, factors=False)
        xx, xt, tt = dense_matrix_odes(fld, traj, gT, gamma)
        for m in range(steps + 1):
            q, p = fac.qs[m].ravel(), fac.ps[m]
            left = gamma * traj.T * (1 - m / steps)
            err = max(err, np.abs(xx[m] - np.outer(q, q)).max(),
                      np.abs(xt[m] - np.outer(q, p)).max(),
                      np.abs(tt[m] - np.outer(p, p) - left * np.eye(p.size)).max())
    return err


def _horizon_case(seed, steps=100, gamma=0.01, c=0.1):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 5))
    fld = build_field(d, (4,), "tanh", float(rng.uniform(0.5, 1.5)), steps, rng)
    model = OdeModel(fld, "mse")
    X, Y = rng.normal(size=(3, d)), rng.normal(size=(3, d))
    res = node_step(model, X, Y, gamma, lr=0.0, curvature="identity", update=False)
    return model, X, Y, res, horizon_terms(model, res, gamma, c)


def horizon_gradient(seeds=3, gamma=0.01, c=0.1, eps=1e-5):
    """Q^T equals the derivative of the penalized objective with respect to T."""
    err = 0.0
    for s in range(seeds):
        model, X, Y, _, (QT, _, _) = _horizon_case(1100 + s, gamma=gamma, c=c)
        T = model.field.T
        vals = []
        for dT in (eps, -eps):
            model.field.T = T + dT
            vals.append(model.objective(X, Y, gamma, c))
        model.field.T = T
        fd = (vals[0] - vals[1]) / (2 * eps)
        err = max(err, abs(QT - fd) / max(1.0, abs(fd)))
    return err


def horizon_mixed(seeds=3, gamma=0.01, c=0.1):
    """Closed-form Q^Ttheta equals J^T (g g^T) F(T, x_T) with J from the unrolled graph."""
    err = 0.0
    for s in range(seeds):
        model, X, Y, res, (_, QTT, QTth) = _horizon_case(1200 + s, gamma=gamma, c=c)
        fld = model.field
        rows = []
        for idx in np.ndindex(*res.gT.shape):
            E = np.zeros_like(res.gT)
            E[idx] = 1.0
            _, gth = ode_unrolled_gradients(fld, model.embed(X), lambda XT, E=E: E)
            rows.append(np.concatenate(gth))
        J = np.array(rows)
        g, F = res.gT.ravel(), res.traj.fs[-1].ravel()
        dense = J.T @ g * float(g @ F)
        err = max(err, rel(QTth, dense), abs(QTT - (c + float(g @ F) ** 2)) / QTT)
    return err


FAST = [
    ("open-loop step equals backprop gradient descent", backprop_equivalence, 1e-12),
    ("sgd-mode optimizer trajectory", sgd_trajectory, 1e-12),
    ("newton equivalence without cross terms (rel)", newton_equivalence, 1e-5),
    ("rank-1 factorization (rel)", rank1_factorization, 1e-8),
    ("scalar gauss-newton recursion", scalar_recursion, 1e-10),
    ("value hessian scalar identity", value_hessian_identity, 1e-10),
    ("radicand closed form", radicand_closed_form, 1e-10),
    ("rank-N factor propagation (rel)", rank_n, 1e-8),
    ("kronecker eigenbasis pseudo-inverse (rel)", kron_eigenbasis, 1e-9),
    ("ODE adjoint equals unrolled backprop", ode_gradient, 1e-6),
]
FULL = FAST + [
    ("ODE factorization vs dense matrix ODEs", ode_matrix_odes, 1e-6),
    ("horizon first derivative vs finite difference", horizon_gradient, 1e-6),
    ("horizon mixed term vs unrolled jacobian (rel)", horizon_mixed, 1e-6),
]


@contextmanager
def radicand_sign_error():
    """Negative control: flip the sign inside the rank-1 radicand."""
    original = core._radicand
    core._radicand = lambda quad: 1.0 + quad
    try:
        yield
    finally:
        core._radicand = original


def run_claims(level="fast", only=None):
    claims = FAST if level == "fast" else FULL
    results = []
    for name, fn, tol in claims:
        if only and only not in name:
            continue
        t0 = time.perf_counter()
        try:
            err = float(fn())
        except Exception:
            err = float("inf")
        results.append(ClaimResult(name, err, tol, time.perf_counter() - t0))
    return results


def format_table(results):
    lines = [f"{'claim':<50} {'max error':>11} {'tolerance':>10} {'time':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<50} {r.error:>11.3e} {r.tol:>10.1e} {r.seconds:>6.2f}s  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
