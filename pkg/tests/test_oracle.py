import numpy as np
import pytest

from conftest import fd_grad
from ocnopt.core import backward_pass
from ocnopt.curvature import AdaptiveCurvature
from ocnopt.errors import DimensionError, FactorizationError, IndefiniteError
from ocnopt.netgraph import Dense, NetworkSpec, forward, predict
from ocnopt.oracle import (backprop_reference, dense_ddp_step, newton_reference,
                           rank_n_backward)
from ocnopt.verify import newton_equivalence, value_hessian_identity, ordered_curvature, random_net, backprop_equivalence


def linear_net(rng, dims=(3, 4, 2)):
    layers = [Dense(a, b, "identity") for a, b in zip(dims[:-1], dims[1:])]
    return NetworkSpec(layers, "mse").init(rng)


def test_linear_quadratic_value_hessian_closed_form(rng):
    net = linear_net(rng)
    X, Y = rng.normal(size=(1, 3)), rng.normal(size=(1, 2))
    gamma = 0.5
    dd = dense_ddp_step(net, X, Y, gamma, terminal="exact-hessian")
    acts = forward(net, X)
    V = np.eye(2)
    for k in (1, 0):
        layer, th = net.layers[k], net.params[k]
        W = th[:layer.in_dim * layer.out_dim].reshape(layer.in_dim, layer.out_dim)
        Fx = W.T
        Ft = np.kron(np.append(acts.xs[k][0], 1.0), np.eye(layer.out_dim))
        Qtt = Ft.T @ V @ Ft + gamma * np.eye(layer.n_params)
        Qxt = Fx.T @ V @ Ft
        V = Fx.T @ V @ Fx - Qxt @ np.linalg.solve(Qtt, Qxt.T)
        assert np.abs(dd[k]["Vxx"] - V).max() < 1e-10


def test_large_damping_gives_scaled_gradient_step(rng):
    net, X, y = random_net(rng, depth=(2, 2), max_dim=4)
    dd = dense_ddp_step(net, X, y, 1e8)
    for k in range(net.depth):
        assert np.abs(dd[k]["k_open"] + dd[k]["Qt"] / 1e8).max() < 1e-10
        # the weight-decay term grows with gamma, so only the data part vanishes
        assert np.abs(dd[k]["k_open"] + net.params[k]).max() < 1e-7


def test_second_order_matrices_symmetric(rng):
    net, X, y = random_net(rng, depth=(3, 3), max_dim=4)
    dd = dense_ddp_step(net, X, y, 10.0, include_f_second=True, terminal="exact-hessian")
    for k in range(net.depth):
        for key in ("Qxx", "Qtt", "Vxx"):
            M = dd[k][key]
            assert np.abs(M - M.T).max() <= 1e-8 * max(1.0, np.abs(M).max())


@pytest.mark.parametrize("seed", range(5))
def test_gauss_newton_blocks_are_rank_one_factors(seed):
    rng = np.random.default_rng(seed)
    net, X, y = random_net(rng, depth=(2, 4), max_dim=5)
    cv = ordered_curvature(rng, net, X, y, beta=0.4)
    pols, states, _ = backward_pass(net, forward(net, X), y, cv, beta=0.4, update_curvature=False)
    dd = dense_ddp_step(net, X, y, 0.0, beta=0.4, quu=cv)
    for k in range(net.depth):
        q, p = pols[k].q.ravel(), states[k].p
        assert np.linalg.matrix_rank(dd[k]["Qxx"], tol=1e-10 * (1 + np.abs(dd[k]["Qxx"]).max())) <= 1
        assert np.linalg.norm(dd[k]["Qxx"] - np.outer(q, q)) <= 1e-8 * np.linalg.norm(dd[k]["Qxx"])
        assert np.linalg.norm(dd[k]["Qxt"] - np.outer(q, p)) <= 1e-8 * np.linalg.norm(dd[k]["Qxt"])


def test_open_loop_dense_form():
    assert backprop_equivalence(seeds=10) < 1e-12


def test_qxx_free_or_zero_gives_same_update(rng):
    net, X, y = random_net(rng, depth=(3, 3), max_dim=5)
    a = dense_ddp_step(net, X, y, 0.1, quu="identity", qux_zero=True, qxx_zero=True)
    b = dense_ddp_step(net, X, y, 0.1, quu="identity", qux_zero=True, qxx_zero=False)
    for k in range(net.depth):
        assert np.array_equal(a[k]["k_open"], b[k]["k_open"])


def test_newton_equivalence():
    assert newton_equivalence(seeds=6) < 1e-6


def test_newton_large_damping_is_scaled_gradient(rng):
    net, X, y = random_net(rng, depth=(2, 2), max_dim=4)
    gt, _ = backprop_reference(net, X, y)
    steps = newton_reference(net, X, y, 1e6)
    for k in range(net.depth):
        expect = -(gt[k] + 1e6 * net.params[k]) / 1e6
        assert np.abs(steps[k] - expect).max() < 1e-6 * (1 + np.abs(expect).max())


def test_indefinite_curvature_reported(rng):
    net = NetworkSpec([Dense(2, 3, "tanh"), Dense(3, 2, "identity")], "mse").init(rng)
    X, Y = rng.normal(size=(2, 2)), 20 * rng.normal(size=(2, 2))
    with pytest.raises(IndefiniteError) as exc:
        for seed in range(20):
            net.params = [p + rng.normal(size=p.shape) for p in net.params]
            dense_ddp_step(net, X, Y, 0.0, include_f_second=True, terminal="exact-hessian")
    assert exc.value.min_eigenvalue < 0


def test_dimension_guard(rng):
    net = NetworkSpec([Dense(17, 2)], "mse").init(rng)
    with pytest.raises(DimensionError):
        dense_ddp_step(net, np.zeros((1, 17)), np.zeros((1, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_rank_one_propagation_equals_single_factor_recursion(seed):
    rng = np.random.default_rng(seed)
    net, X, y = random_net(rng, depth=(2, 4), max_dim=5)
    R = rng.normal(size=(1, X.shape[0], net.out_dim)) / X.shape[0]
    cv = ordered_curvature(rng, net, X, y, terminal=np.outer(R.ravel(), R.ravel()))
    fac = rank_n_backward(net, X, y, R, cv)
    _, states, _ = backward_pass(net, forward(net, X), y, cv, update_curvature=False, terminal=R[0])
    for k in range(net.depth + 1):
        assert np.abs(np.abs(fac[k][0]) - np.abs(states[k].r)).max() < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_rank_two_matches_dense(seed):
    rng = np.random.default_rng(seed)
    net, X, y = random_net(rng, depth=(2, 4), max_dim=5)
    R = rng.normal(size=(2, X.shape[0], net.out_dim)) / X.shape[0]
    T = sum(np.outer(r.ravel(), r.ravel()) for r in R)
    cv = ordered_curvature(rng, net, X, y, terminal=T)
    fac = rank_n_backward(net, X, y, R, cv)
    dd = dense_ddp_step(net, X, y, 0.0, terminal=T, quu=cv)
    for k in range(net.depth):
        V = sum(np.outer(r.ravel(), r.ravel()) for r in fac[k])
        assert np.linalg.norm(V - dd[k]["Vxx"]) <= 1e-8 * np.linalg.norm(dd[k]["Vxx"])


def test_zero_factor_stays_zero(rng):
    net, X, y = random_net(rng, depth=(3, 3), max_dim=5)
    r = rng.normal(size=(X.shape[0], net.out_dim)) / X.shape[0]
    cv = ordered_curvature(rng, net, X, y, terminal=np.outer(r.ravel(), r.ravel()))
    one = rank_n_backward(net, X, y, r[None], cv)
    two = rank_n_backward(net, X, y, np.stack([r, np.zeros_like(r)]), cv)
    for k in range(net.depth + 1):
        V1 = np.outer(one[k][0].ravel(), one[k][0].ravel())
        V2 = sum(np.outer(f.ravel(), f.ravel()) for f in two[k])
        assert np.abs(V1 - V2).max() < 1e-12
        assert min(np.abs(f).max() for f in two[k]) == 0.0


def test_rank_n_indefinite_mixing_rejected(rng):
    net, X, y = random_net(rng, depth=(2, 2), max_dim=4)
    cv = AdaptiveCurvature()
    for k, th in enumerate(net.params):
        cv.set_state(k, 1e-12 * np.ones(th.size))
    R = 10 * rng.normal(size=(2, X.shape[0], net.out_dim))
    with pytest.raises(FactorizationError):
        rank_n_backward(net, X, y, R, cv)


def test_rank_n_limit(rng):
    net, X, y = random_net(rng, depth=(2, 2), max_dim=4)
    with pytest.raises(DimensionError):
        rank_n_backward(net, X, y, np.zeros((5, X.shape[0], net.out_dim)), AdaptiveCurvature())


def test_constant_loss_has_zero_gradients(rng):
    class Constant:
        name = "constant"

        def value(self, Z, y):
            return 3.0

        def grad(self, Z, y):
            return np.zeros_like(Z)

    net, X, y = random_net(rng)
    net.loss = Constant()
    gt, gx = backprop_reference(net, X, y)
    assert all(not np.any(g) for g in gt + gx)


def test_single_linear_layer_gradient(rng):
    net = linear_net(rng, dims=(3, 2))
    x, yv = rng.normal(size=3), rng.normal(size=2)
    gt, _ = backprop_reference(net, x[None], yv[None])
    W = net.params[0][:6].reshape(3, 2)
    resid = x @ W + net.params[0][6:] - yv
    assert np.allclose(gt[0], np.concatenate([np.outer(x, resid).ravel(), resid]), atol=1e-14)


@pytest.mark.parametrize("seed", range(50))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net, X, y = random_net(rng)
    gt, gx = backprop_reference(net, X, y)
    for k in range(net.depth):
        def f(th, k=k):
            params = list(net.params)
            params[k] = th
            return net.loss.value(forward(net, X, params).output, y)
        fd = fd_grad(f, net.params[k])
        assert np.linalg.norm(gt[k] - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-8)
    fd = fd_grad(lambda Z: net.loss.value(predict(net, Z), y), X)
    assert np.linalg.norm(gx[0] - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_gauss_newton_value_hessian_psd_for_linear_nets(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(rng.integers(1, 5, size=4))
    net = linear_net(rng, dims)
    X, Y = rng.normal(size=(2, dims[0])), rng.normal(size=(2, dims[-1]))
    dd = dense_ddp_step(net, X, Y, 0.3, terminal="exact-hessian")
    for k in range(net.depth):
        assert np.linalg.eigvalsh(dd[k]["Vxx"]).min() >= -1e-10


def test_value_hessian_identity():
    assert value_hessian_identity(seeds=10) < 1e-10


def test_oracle_is_deterministic(rng):
    net, X, y = random_net(np.random.default_rng(5))
    a = dense_ddp_step(net, X, y, 10.0, include_f_second=True, terminal="exact-hessian")
    b = dense_ddp_step(net, X, y, 10.0, include_f_second=True, terminal="exact-hessian")
    for k in range(net.depth):
        assert all(np.array_equal(a[k][key], b[k][key]) for key in a[k])
