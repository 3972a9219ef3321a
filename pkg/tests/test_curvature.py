import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ocnopt.curvature import AdaptiveCurvature, IdentityCurvature, KfacCurvature, make_curvature
from ocnopt.errors import CurvatureError
from ocnopt.linalg import pinv_psd
from ocnopt.netgraph import Activation, Dense, LayerNode, MultiPath


def kfac_layer_stats(rng, d_in=3, d_out=2, B=7, **kw):
    layer = Dense(d_in, d_out, "tanh")
    theta = layer.init_params(rng)
    X, V = rng.normal(size=(B, d_in)), rng.normal(size=(B, d_out)) / B
    cv = KfacCurvature(**kw)
    cv.update_stats(0, layer, X, theta, V, None)
    return layer, theta, X, V, cv


def test_identity_model():
    cv = IdentityCurvature()
    v = np.array([3.0, 4.0])
    assert np.array_equal(cv.apply_pinv(0, v), v)
    assert cv.quadratic_form(0, v) == 25.0
    cv.update_stats(0, None, None, None, None, v)
    assert cv.state_dict() == {}


def test_adaptive_without_memory_tracks_last_gradient(rng):
    cv = AdaptiveCurvature(eps=0.0, ema=0.0)
    for _ in range(3):
        q = rng.normal(size=5)
        cv.update_stats(0, None, None, None, None, q)
        assert np.array_equal(cv.sq[0], q * q)


def test_adaptive_elementwise_division():
    cv = AdaptiveCurvature(eps=0.0, ema=0.0)
    cv.set_state(0, np.array([4.0, 9.0]))
    assert np.array_equal(cv.apply_pinv(0, np.array([2.0, 3.0])), [1.0, 1.0])
    cv.set_state(0, np.array([1.0, 1.0]))
    p = np.array([0.5, -2.0])
    assert cv.quadratic_form(0, p) == pytest.approx(p @ p)


def test_adaptive_bias_correction(rng):
    cv = AdaptiveCurvature(eps=0.0)
    q = rng.normal(size=4)
    cv.update_stats(0, None, None, None, None, q)
    assert np.allclose(cv.diagonal(0), np.abs(q), rtol=1e-12)


def test_adaptive_first_step_falls_back_to_identity(rng):
    v = rng.normal(size=3)
    assert np.array_equal(AdaptiveCurvature().apply_pinv(0, v), v)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_adaptive_quadratic_form_positive(seed):
    rng = np.random.default_rng(seed)
    cv = AdaptiveCurvature(eps=1e-8)
    cv.update_stats(0, None, None, None, None, rng.normal(size=4) * (rng.random(4) > 0.5))
    p = rng.normal(size=4)
    assert cv.quadratic_form(0, p) > 0


def test_whitened_inputs_give_identity_left_factor():
    rng = np.random.default_rng(0)
    layer = Dense(4, 2, "identity")
    X = rng.normal(size=(10_000, 4))
    cv = KfacCurvature()
    cv.update_stats(0, layer, X, layer.init_params(rng), rng.normal(size=(10_000, 2)), None)
    assert np.abs(cv.blocks[0][0].A - np.eye(5)).max() < 5e-2


@pytest.mark.parametrize("gamma", [0.0, 0.1])
def test_kfac_matches_dense_kronecker_pinv(rng, gamma):
    for _ in range(10):
        d_in, d_out = rng.integers(1, 4, size=2)
        layer, theta, X, V, cv = kfac_layer_stats(rng, d_in, d_out, damping=gamma)
        st_ = cv.blocks[0][0]
        dense = pinv_psd(np.kron(st_.A, st_.G))
        if gamma > 0:
            dense = dense + np.eye(layer.n_params) / gamma
        v = rng.normal(size=layer.n_params)
        out = cv.apply_pinv(0, v)
        assert np.linalg.norm(out - dense @ v) <= 1e-9 * np.linalg.norm(dense @ v)
        assert cv.quadratic_form(0, v) == pytest.approx(v @ dense @ v, rel=1e-9)


def test_kfac_damped_mode_diagonal(rng):
    layer, theta, X, V, cv = kfac_layer_stats(rng, damping=0.3, gamma_mode="damped")
    st_ = cv.blocks[0][0]
    dense = np.linalg.inv(np.kron(st_.A, st_.G) + 0.3 * np.eye(layer.n_params))
    v = rng.normal(size=layer.n_params)
    assert np.allclose(cv.apply_pinv(0, v), dense @ v, rtol=1e-9, atol=1e-12)


def test_kfac_factors_reproduce_per_sample_outer_products(rng):
    layer = Dense(3, 2, "sigmoid")
    theta = layer.init_params(rng)
    B = 6
    X, V = rng.normal(size=(B, 3)), rng.normal(size=(B, 2))
    (_, xa, vh), = layer.kfac_blocks(X, theta, V)
    lhs = np.zeros((layer.n_params, layer.n_params))
    rhs = np.zeros_like(lhs)
    for i in range(B):
        gi = layer.vjp_theta(X[i:i + 1], theta, V[i:i + 1])
        assert np.allclose(gi, np.kron(xa[i], vh[i]), atol=1e-15)
        lhs += np.outer(gi, gi) / B
        rhs += np.kron(np.outer(xa[i], xa[i]), np.outer(vh[i], vh[i])) / B
    assert np.abs(lhs - rhs).max() < 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_apply_pinv_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    layer, _, _, _, kf = kfac_layer_stats(rng, damping=0.1)
    ad = AdaptiveCurvature()
    ad.update_stats(0, None, None, None, None, rng.normal(size=layer.n_params))
    for cv in (kf, ad, IdentityCurvature()):
        u, v = rng.normal(size=(2, layer.n_params))
        lhs = cv.apply_pinv(0, a * u + b * v)
        rhs = a * cv.apply_pinv(0, u) + b * cv.apply_pinv(0, v)
        assert np.abs(lhs - rhs).max() <= 1e-10 * (1 + np.abs(rhs).max())


def test_kfac_refresh_period(rng):
    layer = Dense(2, 2, "tanh")
    theta = layer.init_params(rng)
    cv = KfacCurvature(refresh=3)
    eigs = []
    for _ in range(4):
        cv.update_stats(0, layer, rng.normal(size=(5, 2)), theta, rng.normal(size=(5, 2)), None)
        eigs.append(cv.blocks[0][0].eigA)
    assert eigs[0] is eigs[1] is eigs[2]
    assert eigs[3] is not eigs[2]


def test_kfac_factors_stay_symmetric_psd(rng):
    layer = Dense(3, 3, "tanh")
    theta = layer.init_params(rng)
    cv = KfacCurvature()
    for _ in range(25):
        cv.update_stats(0, layer, rng.normal(size=(4, 3)), theta, rng.normal(size=(4, 3)), None)
    for M in (cv.blocks[0][0].A, cv.blocks[0][0].G):
        assert np.abs(M - M.T).max() < 1e-10
        assert np.linalg.eigvalsh(M).min() > -1e-10


def test_kfac_multi_path_blocks_and_fallback(rng):
    mp = MultiPath([Dense(3, 2, "tanh"), Dense(3, 2, "relu")])
    theta = mp.init_params(rng)
    cv = KfacCurvature()
    X, V = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    cv.update_stats(0, mp, X, theta, V, None)
    assert len(cv.blocks[0]) == 2
    act = Activation(3, "tanh")
    cv.update_stats(1, act, X, np.zeros(0), X, np.zeros(0))
    assert cv.apply_pinv(1, np.zeros(0)).size == 0


def test_kfac_falls_back_to_adaptive_without_kronecker_structure(rng):
    class Scale(LayerNode):
        kind = "scale"
        in_dim = out_dim = n_params = 2

    cv = KfacCurvature(eps=0.0)
    q = np.array([2.0, -4.0])
    cv.update_stats(0, Scale(), None, None, None, q)
    assert 0 not in cv.blocks
    assert np.allclose(cv.apply_pinv(0, q), np.sign(q), rtol=1e-12)


def test_state_dict_round_trip(rng):
    for kind in ("adaptive", "kfac"):
        cv = make_curvature(kind)
        layer = Dense(3, 2, "tanh")
        theta = layer.init_params(rng)
        X, V = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        cv.update_stats(0, layer, X, theta, V, layer.vjp_theta(X, theta, V))
        clone = make_curvature(kind)
        clone.load_state_dict(cv.state_dict())
        v = rng.normal(size=layer.n_params)
        assert np.array_equal(clone.apply_pinv(0, v), cv.apply_pinv(0, v))


def test_non_finite_output_raises():
    cv = AdaptiveCurvature()
    cv.set_state(0, np.ones(2))
    with pytest.raises(CurvatureError):
        cv.apply_pinv(0, np.array([np.inf, 1.0]))


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_curvature("shampoo")
    with pytest.raises(ValueError):
        KfacCurvature(gamma_mode="other")
