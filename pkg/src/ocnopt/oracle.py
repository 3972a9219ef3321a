"""Dense reference implementations for tiny networks.

Everything here builds explicit Jacobians and second-order matrices over the
stacked batch state (row-major flattening of the ``(B, d)`` state) and solves
the layer-wise quadratic subproblems exactly.  Second derivatives of the layer
maps are central finite differences of the analytic vector-Jacobian
products, which limits those quantities to roughly 1e-7 accuracy.
"""
import numpy as np

from .errors import DimensionError, FactorizationError, IndefiniteError
from .linalg import pinv_from_eig, sym_eig
from .netgraph import block_diag_stack, forward

MAX_DIM = 16
FD_STEP = 1e-4


def _guard(net, X):
    widths = [net.in_dim] + [l.out_dim for l in net.layers]
    if max(widths) > MAX_DIM:
        raise DimensionError(f"oracle limited to state widths <= {MAX_DIM}")
    if max(l.n_params for l in net.layers) > MAX_DIM * (MAX_DIM + 1):
        raise DimensionError(f"oracle limited to {MAX_DIM * (MAX_DIM + 1)} parameters per layer")
    if X.shape[0] * max(widths) > MAX_DIM * MAX_DIM:
        raise DimensionError("stacked batch state too large for the oracle")


def jacobians(layer, X, theta):
    """Dense ``(f^x, f^theta)`` of one layer over the stacked batch."""
    B = X.shape[0]
    Fx = np.zeros((B * layer.out_dim, B * layer.in_dim))
    for j in range(B * layer.in_dim):
        e = np.zeros(B * layer.in_dim)
        e[j] = 1.0
        Fx[:, j] = layer.jvp_x(X, theta, e.reshape(B, layer.in_dim)).ravel()
    Ft = np.zeros((B * layer.out_dim, layer.n_params))
    for j in range(layer.n_params):
        e = np.zeros(layer.n_params)
        e[j] = 1.0
        Ft[:, j] = layer.jvp_theta(X, theta, e).ravel()
    return Fx, Ft


def second_contractions(layer, X, theta, V, step=FD_STEP):
    """``(f^xx . V, f^xtheta . V, f^thetatheta . V)`` by differencing vjps."""
    B, n, P = X.shape[0], X.size, layer.n_params
    fxx = np.zeros((n, n))
    for j in range(n):
        d = np.zeros(n)
        d[j] = step
        d = d.reshape(X.shape)
        fxx[:, j] = (layer.vjp_x(X + d, theta, V) - layer.vjp_x(X - d, theta, V)).ravel() / (2 * step)
    fxt = np.zeros((n, P))
    ftt = np.zeros((P, P))
    for j in range(P):
        d = np.zeros(P)
        d[j] = step
        fxt[:, j] = (layer.vjp_x(X, theta + d, V) - layer.vjp_x(X, theta - d, V)).ravel() / (2 * step)
        ftt[:, j] = (layer.vjp_theta(X, theta + d, V) - layer.vjp_theta(X, theta - d, V)) / (2 * step)
    return 0.5 * (fxx + fxx.T), fxt, 0.5 * (ftt + ftt.T)


def loss_hessian(net, Z, y):
    return block_diag_stack(net.loss.hessian_blocks(Z, y))


def dense_ddp_step(net, X, y, gamma=0.0, include_f_second=False, terminal="gauss-newton",
                   beta=0.1, quu="exact", qux_zero=False, qxx_zero=False):
    """One exact DDP backward sweep.

    ``terminal`` is ``"gauss-newton"`` (``yy^T`` with ``y = beta dL/dx_K``),
    ``"exact-hessian"``, or an explicit ``V^xx_K`` matrix.  ``quu`` is
    ``"exact"``, ``"identity"``, or a curvature model whose pseudo-inverse
    replaces ``(Q^tt)^+``.  Returns one dict per layer with the dense
    ``Q`` blocks, ``V^x``, ``V^xx`` (of layer ``k``'s input state), the
    open-loop step ``k_open`` and the feedback matrix ``K_fb`` such that
    ``dtheta*(dx) = k_open + K_fb dx``.  The final dict (index ``K``) holds
    the terminal ``Vx``/``Vxx``.
    """
    X = np.asarray(X, dtype=np.float64)
    _guard(net, X)
    acts = forward(net, X)
    Z = acts.output
    g = net.loss.grad(Z, y).ravel()
    if isinstance(terminal, str):
        if terminal == "gauss-newton":
            yv = beta * g
            Vxx = np.outer(yv, yv)
        elif terminal == "exact-hessian":
            Vxx = loss_hessian(net, Z, y)
        else:
            raise ValueError(f"unknown terminal {terminal!r}")
    else:
        Vxx = np.asarray(terminal, dtype=np.float64)
    Vx = g
    out = [None] * (net.depth + 1)
    out[net.depth] = {"Vx": Vx, "Vxx": Vxx}
    for k in range(net.depth - 1, -1, -1):
        layer, th, Xk = net.layers[k], net.params[k], acts.xs[k]
        Fx, Ft = jacobians(layer, Xk, th)
        P = layer.n_params
        Qx = Fx.T @ Vx
        Qt = gamma * th + Ft.T @ Vx
        Qxx = Fx.T @ Vxx @ Fx
        Qxt = Fx.T @ Vxx @ Ft
        Qtt = Ft.T @ Vxx @ Ft + gamma * np.eye(P)
        if include_f_second:
            fxx, fxt, ftt = second_contractions(layer, Xk, th, Vx.reshape(Z.shape[0], -1))
            Qxx, Qxt, Qtt = Qxx + fxx, Qxt + fxt, Qtt + ftt
        Qtt = 0.5 * (Qtt + Qtt.T)
        if qux_zero:
            Qxt = np.zeros_like(Qxt)
        if qxx_zero:
            Qxx = np.zeros_like(Qxx)
        if isinstance(quu, str) and quu == "identity":
            Qtt_pinv = np.eye(P)
        elif isinstance(quu, str) and quu == "exact":
            Qtt_pinv = _pinv_pd(Qtt, k) if P else np.zeros((0, 0))
        else:
            Qtt_pinv = quu.dense_pinv(k, P)
        k_open = -Qtt_pinv @ Qt
        K_fb = -Qtt_pinv @ Qxt.T
        Vx = Qx - Qxt @ Qtt_pinv @ Qt
        Vxx = Qxx - Qxt @ Qtt_pinv @ Qxt.T
        Vxx = 0.5 * (Vxx + Vxx.T)
        out[k] = {"Qx": Qx, "Qt": Qt, "Qxx": Qxx, "Qxt": Qxt, "Qtt": Qtt, "Qtt_pinv": Qtt_pinv,
                  "Vx": Vx, "Vxx": Vxx, "k_open": k_open, "K_fb": K_fb}
    return out


def _pinv_pd(Q, k, tol=1e-12):
    eig = sym_eig(Q)
    lam_min = float(eig.eigenvalues[-1])
    if lam_min <= tol * max(abs(float(eig.eigenvalues[0])), 1e-300):
        raise IndefiniteError(
            f"Q_tt of layer {k} is not positive definite (min eigenvalue {lam_min:.3e})",
            min_eigenvalue=lam_min)
    return pinv_from_eig(eig)


def backprop_reference(net, X, y):
    """Plain reverse accumulation: ``(dL/dtheta_k list, dL/dx_k list)``."""
    acts = forward(net, X)
    gx = [None] * (net.depth + 1)
    gt = [None] * net.depth
    gx[-1] = net.loss.grad(acts.output, y)
    for k in range(net.depth - 1, -1, -1):
        layer, th, Xk = net.layers[k], net.params[k], acts.xs[k]
        gt[k] = layer.vjp_theta(Xk, th, gx[k + 1])
        gx[k] = layer.vjp_x(Xk, th, gx[k + 1])
    return gt, gx


def newton_reference(net, X, y, gamma=0.0, step=FD_STEP):
    """Layer-wise Newton steps ``-(d2(L+l)/dtheta_k^2)^+ (dL/dtheta_k + gamma theta_k)``.

    The block Hessians are central differences of the backprop gradient.
    """
    X = np.asarray(X, dtype=np.float64)
    _guard(net, X)
    grads, _ = backprop_reference(net, X, y)
    steps = []
    for k, th in enumerate(net.params):
        P = th.size
        H = np.zeros((P, P))
        for j in range(P):
            d = np.zeros(P)
            d[j] = step
            plus = list(net.params)
            minus = list(net.params)
            plus[k], minus[k] = th + d, th - d
            gp, _ = backprop_reference(net.with_params(plus), X, y)
            gm, _ = backprop_reference(net.with_params(minus), X, y)
            H[:, j] = (gp[k] - gm[k]) / (2 * step)
        H = 0.5 * (H + H.T) + gamma * np.eye(P)
        steps.append(-_pinv_pd(H, k) @ (grads[k] + gamma * th) if P else np.zeros(0))
    return steps


def rank_n_backward(net, X, y, terminal_factors, curvature, tol=1e-10):
    """Propagate ``N`` terminal factors so that ``V^xx_k = sum_i r_k^i r_k^i^T``.

    ``terminal_factors`` has shape ``(N, B, d_K)``.  At each layer the mixing
    matrix ``S = I - P^T Q_tt^+ P`` is re-diagonalised and the factors are
    rotated into its eigenbasis.  Returns ``factors[k]`` of shape
    ``(N, B, d_k)`` for ``k = 0..K``.
    """
    acts = forward(net, X)
    R = np.asarray(terminal_factors, dtype=np.float64)
    if R.ndim == 2:
        R = R[None]
    N = R.shape[0]
    if N > 4:
        raise DimensionError("rank_n_backward supports N <= 4")
    _guard(net, np.asarray(X, dtype=np.float64))
    factors = [None] * (net.depth + 1)
    factors[-1] = R
    for k in range(net.depth - 1, -1, -1):
        layer, th, Xk = net.layers[k], net.params[k], acts.xs[k]
        Qs = np.stack([layer.vjp_x(Xk, th, r) for r in R])
        Ps = [layer.vjp_theta(Xk, th, r) for r in R]
        Hs = [curvature.apply_pinv(k, p) for p in Ps]
        S = np.eye(N) - np.array([[Ps[i] @ Hs[j] for j in range(N)] for i in range(N)])
        U, sig = sym_eig(0.5 * (S + S.T))
        scale = max(1.0, float(np.abs(sig).max()))
        if sig[-1] < -tol * scale:
            raise FactorizationError(
                f"mixing matrix of layer {k} is indefinite (min eigenvalue {sig[-1]:.3e})")
        sig = np.clip(sig, 0.0, None)
        mixed = np.einsum("ji,jbd->ibd", U, Qs)
        R = np.sqrt(sig)[:, None, None] * mixed
        factors[k] = R
    return factors


def _field_stage_inputs(fld, t, X, params):
    zs = [np.hstack([X, np.full((X.shape[0], 1), float(t))])]
    for layer, th in zip(fld.net.layers, params):
        zs.append(layer.forward(zs[-1], th))
    return zs


def ode_unrolled_gradients(fld, X0, gT_fn, params=None):
    """Backprop through the unrolled RK4 graph.

    ``gT_fn(X_T)`` returns ``dL/dx_T``.  Returns ``(dL/dx_0, [dL/dtheta_k])``
    of the discrete map, computed stage by stage without any adjoint ODE.
    """
    params = fld.params if params is None else params
    M, h = fld.steps, fld.T / fld.steps
    X = np.asarray(X0, dtype=np.float64)
    stages = []
    for n in range(M):
        t = n * h
        k1 = fld(t, X, params)
        a2 = X + 0.5 * h * k1
        k2 = fld(t + 0.5 * h, a2, params)
        a3 = X + 0.5 * h * k2
        k3 = fld(t + 0.5 * h, a3, params)
        a4 = X + h * k3
        k4 = fld(t + h, a4, params)
        stages.append((t, X, a2, a3, a4))
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    a = np.asarray(gT_fn(X), dtype=np.float64)
    gth = [np.zeros_like(p) for p in params]

    def vjp(t, Z, V):
        gx, gp, _ = fld.vjp(t, Z, V, params)
        for k, g in enumerate(gp):
            gth[k] += g
        return gx

    for t, X, a2, a3, a4 in reversed(stages):
        c1 = c4 = (h / 6.0) * a
        c2 = c3 = (h / 3.0) * a
        aX = a.copy()
        g4 = vjp(t + h, a4, c4)
        aX += g4
        c3 = c3 + h * g4
        g3 = vjp(t + 0.5 * h, a3, c3)
        aX += g3
        c2 = c2 + 0.5 * h * g3
        g2 = vjp(t + 0.5 * h, a2, c2)
        aX += g2
        c1 = c1 + 0.5 * h * g2
        aX += vjp(t, X, c1)
        a = aX
    return a, gth


def field_jacobians(fld, t, X, params=None):
    """Dense ``(F^x, F^theta)`` of the field over the stacked batch state."""
    params = fld.params if params is None else params
    zs = _field_stage_inputs(fld, t, X, params)
    layers = fld.net.layers
    B, d = X.shape

    def push(k0, W):
        for k in range(k0, len(layers)):
            W = layers[k].jvp_x(zs[k], params[k], W)
        return W.ravel()

    Fx = np.zeros((B * d, B * d))
    for j in range(B * d):
        W = np.zeros((B, d + 1))
        W[j // d, j % d] = 1.0
        Fx[:, j] = push(0, W)
    cols = []
    for k, layer in enumerate(layers):
        for j in range(layer.n_params):
            e = np.zeros(layer.n_params)
            e[j] = 1.0
            cols.append(push(k + 1, layer.jvp_theta(zs[k], params[k], e)))
    Ft = np.column_stack(cols) if cols else np.zeros((B * d, 0))
    return Fx, Ft


def dense_matrix_odes(fld, traj, gT, gamma=0.0, params=None):
    """Integrate the dense second-order ODEs of the continuous-time expansion.

    Backward from ``T`` with ``Q^xx_T = g g^T``, ``Q^xtheta_T = 0``,
    ``Q^thetatheta_T = 0`` and f second derivatives omitted.  Returns lists
    ``(Qxx, Qxt, Qtt)`` indexed by node.
    """
    params = fld.params if params is None else params
    M, h = traj.steps, traj.h
    g = np.asarray(gT, dtype=np.float64).ravel()
    n, P = g.size, sum(p.size for p in params)
    Qxx, Qxt, Qtt = np.outer(g, g), np.zeros((n, P)), np.zeros((P, P))
    out = [None] * (M + 1)
    out[M] = (Qxx, Qxt, Qtt)

    def rhs(t, X, S):
        Fx, Ft = field_jacobians(fld, t, X, params)
        xx, xt, tt = S
        return (Fx.T @ xx + xx @ Fx, Fx.T @ xt + xx @ Ft,
                Ft.T @ xt + xt.T @ Ft + gamma * np.eye(P))

    def axpy(S, a, D):
        return tuple(s + a * d for s, d in zip(S, D))

    S = out[M]
    for m in range(M - 1, -1, -1):
        x0, x1, f0, f1 = traj.xs[m], traj.xs[m + 1], traj.fs[m], traj.fs[m + 1]
        xm = 0.5 * (x0 + x1) + 0.125 * h * (f0 - f1)
        t1, tm, t0 = (m + 1) * h, (m + 0.5) * h, m * h
        k1 = rhs(t1, x1, S)
        k2 = rhs(tm, xm, axpy(S, 0.5 * h, k1))
        k3 = rhs(tm, xm, axpy(S, 0.5 * h, k2))
        k4 = rhs(t0, x0, axpy(S, h, k3))
        S = tuple(s + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d)
                  for s, a, b, c, d in zip(S, k1, k2, k3, k4))
        out[m] = S
    return [o[0] for o in out], [o[1] for o in out], [o[2] for o in out]
