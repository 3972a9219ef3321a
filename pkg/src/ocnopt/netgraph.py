"""Networks as discrete-time dynamical systems ``x_{k+1} = f_k(x_k, theta_k)``.

A batch of states is an array of shape ``(B, d)``.  Every layer exposes exact
Jacobian products in both directions:

* ``vjp_x(X, theta, V)``     -> ``f^x^T V`` per sample, shape ``(B, d_in)``
* ``vjp_theta(X, theta, V)`` -> ``sum_i f^theta_i^T V_i``, shape ``(P,)``
* ``jvp_x(X, theta, W)``     -> ``f^x W`` per sample, shape ``(B, d_out)``
* ``jvp_theta(X, theta, w)`` -> ``f^theta w`` per sample, shape ``(B, d_out)``

``vjp_theta`` sums over the batch: the mini-batch is treated as one stacked
system sharing the parameters, so the sum is the exact transpose of
``jvp_theta``.

Dense parameter layout: the weight is stored as an ``(d_in, d_out)`` array
(``h = X @ W + b``), flattened row-major, followed by the bias.  With this
layout the parameter gradient of one sample is ``kron([x, 1], v_h)``.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DimensionError

ACTIVATIONS = ("identity", "tanh", "sigmoid", "relu")


def activate(name, h):
    if name == "identity":
        return h
    if name == "tanh":
        return np.tanh(h)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * h))
    if name == "relu":
        return np.maximum(h, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def activate_grad(name, h):
    """Elementwise derivative; ReLU'(0) is taken to be 0."""
    if name == "identity":
        return np.ones_like(h)
    if name == "tanh":
        return 1.0 - np.tanh(h) ** 2
    if name == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * h))
        return s * (1.0 - s)
    if name == "relu":
        return (h > 0.0).astype(h.dtype)
    raise ValueError(f"unknown activation {name!r}")


def _check(X, dim, what="input"):
    if X.ndim != 2 or X.shape[1] != dim:
        raise DimensionError(f"{what} has shape {X.shape}, expected (B, {dim})")


class LayerNode:
    """Base class for one stage of the propagation rule."""

    kind = "abstract"
    in_dim: int
    out_dim: int
    n_params: int

    def init_params(self, rng):
        return np.zeros(self.n_params)

    def forward(self, X, theta):
        raise NotImplementedError

    def vjp_x(self, X, theta, V):
        raise NotImplementedError

    def vjp_theta(self, X, theta, V):
        raise NotImplementedError

    def jvp_x(self, X, theta, W):
        raise NotImplementedError

    def jvp_theta(self, X, theta, w):
        raise NotImplementedError

    def kfac_blocks(self, X, theta, V):
        """Kronecker factors ``(param slice, [x, 1] batch, v_h batch)``.

        ``None`` means the layer has no Kronecker structure.
        """
        return None

    def describe(self):
        return {"kind": self.kind, "in": self.in_dim, "out": self.out_dim}


class Dense(LayerNode):
    """Fully-connected layer with a fused activation, ``sigma(X W + b)``."""

    kind = "dense"

    def __init__(self, in_dim, out_dim, act="identity"):
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        self.in_dim, self.out_dim, self.act = int(in_dim), int(out_dim), act
        self.n_params = self.in_dim * self.out_dim + self.out_dim

    def split(self, theta):
        nw = self.in_dim * self.out_dim
        return theta[:nw].reshape(self.in_dim, self.out_dim), theta[nw:]

    def init_params(self, rng):
        lim = np.sqrt(6.0 / (self.in_dim + self.out_dim))
        W = rng.uniform(-lim, lim, size=(self.in_dim, self.out_dim))
        return np.concatenate([W.ravel(), np.zeros(self.out_dim)])

    def preact(self, X, theta):
        W, b = self.split(theta)
        return X @ W + b

    def forward(self, X, theta):
        _check(X, self.in_dim)
        return activate(self.act, self.preact(X, theta))

    def _vh(self, X, theta, V):
        _check(V, self.out_dim, "cotangent")
        if self.act == "identity":
            return V
        return activate_grad(self.act, self.preact(X, theta)) * V

    def vjp_x(self, X, theta, V):
        W, _ = self.split(theta)
        return self._vh(X, theta, V) @ W.T

    def vjp_theta(self, X, theta, V):
        U = self._vh(X, theta, V)
        return np.concatenate([(X.T @ U).ravel(), U.sum(axis=0)])

    def jvp_x(self, X, theta, Wdot):
        _check(Wdot, self.in_dim, "tangent")
        W, _ = self.split(theta)
        out = Wdot @ W
        if self.act == "identity":
            return out
        return activate_grad(self.act, self.preact(X, theta)) * out

    def jvp_theta(self, X, theta, w):
        dW, db = self.split(w)
        out = X @ dW + db
        if self.act == "identity":
            return out
        return activate_grad(self.act, self.preact(X, theta)) * out

    def kfac_blocks(self, X, theta, V):
        Xa = np.hstack([X, np.ones((X.shape[0], 1))])
        return [(slice(0, self.n_params), Xa, self._vh(X, theta, V))]

    def describe(self):
        return {"kind": self.kind, "in": self.in_dim, "out": self.out_dim, "act": self.act}


class Activation(LayerNode):
    """Parameter-free elementwise activation."""

    kind = "activation"

    def __init__(self, dim, act):
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        self.in_dim = self.out_dim = int(dim)
        self.act = act
        self.n_params = 0

    def forward(self, X, theta):
        _check(X, self.in_dim)
        return activate(self.act, X)

    def vjp_x(self, X, theta, V):
        return activate_grad(self.act, X) * V

    def vjp_theta(self, X, theta, V):
        return np.zeros(0)

    def jvp_x(self, X, theta, W):
        return activate_grad(self.act, X) * W

    def jvp_theta(self, X, theta, w):
        return np.zeros((X.shape[0], self.out_dim))

    def kfac_blocks(self, X, theta, V):
        return []

    def describe(self):
        return {"kind": self.kind, "in": self.in_dim, "out": self.out_dim, "act": self.act}


class ResidualStage(LayerNode):
    """One Markovian stage of a residual block over the state ``[z, carry]``.

    The main path layer acts on ``z``; the carry passes through unchanged or
    through the skip layer when this stage hosts it.  The first stage of a
    block takes the plain state ``z`` and duplicates it into the carry; the
    last stage merges, ``relu(main(z) + carry)``, and emits a plain state.
    Parameters are ``[theta_main, phi_skip]``.
    """

    kind = "residual-stage"

    def __init__(self, main: Dense, skip: Optional[Dense], carry_dim, carry_in, merge):
        self.main, self.skip = main, skip
        self.carry_in, self.merge = bool(carry_in), bool(merge)
        self.carry_dim = int(carry_dim)
        c_out = skip.out_dim if skip is not None else self.carry_dim
        if skip is not None and skip.in_dim != self.carry_dim:
            raise DimensionError("skip layer input does not match the carried state")
        if merge:
            if main.act != "identity":
                raise DimensionError("the merging main layer must have identity activation")
            if c_out != main.out_dim:
                raise DimensionError(
                    f"cannot merge main path ({main.out_dim}) with skip path ({c_out})")
        if not carry_in and self.carry_dim != main.in_dim:
            raise DimensionError("block input and carried state differ in size")
        self.c_out = c_out
        self.in_dim = main.in_dim + (self.carry_dim if carry_in else 0)
        self.out_dim = main.out_dim if merge else main.out_dim + c_out
        self.n_main = main.n_params
        self.n_params = main.n_params + (skip.n_params if skip is not None else 0)

    def init_params(self, rng):
        parts = [self.main.init_params(rng)]
        if self.skip is not None:
            parts.append(self.skip.init_params(rng))
        return np.concatenate(parts)

    def _parts(self, X, theta):
        if self.carry_in:
            z, c = X[:, :self.main.in_dim], X[:, self.main.in_dim:]
        else:
            z = c = X
        return z, c, theta[:self.n_main], theta[self.n_main:]

    def _skip_fwd(self, c, phi):
        return self.skip.forward(c, phi) if self.skip is not None else c

    def forward(self, X, theta):
        _check(X, self.in_dim)
        z, c, th, phi = self._parts(X, theta)
        zo, co = self.main.forward(z, th), self._skip_fwd(c, phi)
        if self.merge:
            return np.maximum(zo + co, 0.0)
        return np.hstack([zo, co])

    def _split_cotangent(self, X, theta, V):
        _check(V, self.out_dim, "cotangent")
        if self.merge:
            z, c, th, phi = self._parts(X, theta)
            pre = self.main.forward(z, th) + self._skip_fwd(c, phi)
            U = activate_grad("relu", pre) * V
            return U, U
        return V[:, :self.main.out_dim], V[:, self.main.out_dim:]

    def vjp_x(self, X, theta, V):
        z, c, th, phi = self._parts(X, theta)
        Vz, Vc = self._split_cotangent(X, theta, V)
        gz = self.main.vjp_x(z, th, Vz)
        gc = self.skip.vjp_x(c, phi, Vc) if self.skip is not None else Vc
        if self.carry_in:
            return np.hstack([gz, gc])
        return gz + gc

    def vjp_theta(self, X, theta, V):
        z, c, th, phi = self._parts(X, theta)
        Vz, Vc = self._split_cotangent(X, theta, V)
        parts = [self.main.vjp_theta(z, th, Vz)]
        if self.skip is not None:
            parts.append(self.skip.vjp_theta(c, phi, Vc))
        return np.concatenate(parts)

    def _merge_tangent(self, X, theta, dz, dc):
        if self.merge:
            z, c, th, phi = self._parts(X, theta)
            pre = self.main.forward(z, th) + self._skip_fwd(c, phi)
            return activate_grad("relu", pre) * (dz + dc)
        return np.hstack([dz, dc])

    def jvp_x(self, X, theta, W):
        _check(W, self.in_dim, "tangent")
        z, c, th, phi = self._parts(X, theta)
        Wz, Wc = (W[:, :self.main.in_dim], W[:, self.main.in_dim:]) if self.carry_in else (W, W)
        dz = self.main.jvp_x(z, th, Wz)
        dc = self.skip.jvp_x(c, phi, Wc) if self.skip is not None else Wc
        return self._merge_tangent(X, theta, dz, dc)

    def jvp_theta(self, X, theta, w):
        z, c, th, phi = self._parts(X, theta)
        dz = self.main.jvp_theta(z, th, w[:self.n_main])
        if self.skip is not None:
            dc = self.skip.jvp_theta(c, phi, w[self.n_main:])
        else:
            dc = np.zeros((X.shape[0], self.c_out))
        return self._merge_tangent(X, theta, dz, dc)

    def kfac_blocks(self, X, theta, V):
        z, c, th, phi = self._parts(X, theta)
        Vz, Vc = self._split_cotangent(X, theta, V)
        blocks = [(slice(0, self.n_main), *self.main.kfac_blocks(z, th, Vz)[0][1:])]
        if self.skip is not None:
            _, xa, vh = self.skip.kfac_blocks(c, phi, Vc)[0]
            blocks.append((slice(self.n_main, self.n_params), xa, vh))
        return blocks

    def describe(self):
        d = {"kind": self.kind, "main": self.main.describe(), "carry_in": self.carry_in,
             "merge": self.merge, "carry_dim": self.carry_dim}
        if self.skip is not None:
            d["skip"] = self.skip.describe()
        return d


class MultiPath(LayerNode):
    """Inception-style block: dense paths from a shared input, summed."""

    kind = "multi-path"

    def __init__(self, paths: List[Dense]):
        if not paths:
            raise DimensionError("multi-path block needs at least one path")
        d_in, d_out = paths[0].in_dim, paths[0].out_dim
        for p in paths:
            if p.in_dim != d_in or p.out_dim != d_out:
                raise DimensionError("all paths must share input and output sizes")
        self.paths = list(paths)
        self.in_dim, self.out_dim = d_in, d_out
        self.offsets = np.cumsum([0] + [p.n_params for p in paths])
        self.n_params = int(self.offsets[-1])

    def _th(self, theta, j):
        return theta[self.offsets[j]:self.offsets[j + 1]]

    def init_params(self, rng):
        return np.concatenate([p.init_params(rng) for p in self.paths])

    def forward(self, X, theta):
        return sum(p.forward(X, self._th(theta, j)) for j, p in enumerate(self.paths))

    def vjp_x(self, X, theta, V):
        return sum(p.vjp_x(X, self._th(theta, j), V) for j, p in enumerate(self.paths))

    def vjp_theta(self, X, theta, V):
        return np.concatenate([p.vjp_theta(X, self._th(theta, j), V)
                               for j, p in enumerate(self.paths)])

    def jvp_x(self, X, theta, W):
        return sum(p.jvp_x(X, self._th(theta, j), W) for j, p in enumerate(self.paths))

    def jvp_theta(self, X, theta, w):
        return sum(p.jvp_theta(X, self._th(theta, j), self._th(w, j))
                   for j, p in enumerate(self.paths))

    def kfac_blocks(self, X, theta, V):
        out = []
        for j, p in enumerate(self.paths):
            _, xa, vh = p.kfac_blocks(X, self._th(theta, j), V)[0]
            out.append((slice(int(self.offsets[j]), int(self.offsets[j + 1])), xa, vh))
        return out

    def describe(self):
        return {"kind": self.kind, "paths": [p.describe() for p in self.paths]}


def build_residual(main: List[Dense], skip: Optional[Dense] = None, align=0):
    """Markovian stages for ``relu(main_chain(z) + skip(z))``.

    ``align`` picks the stage that hosts the skip layer.  The last main layer
    must have identity activation; the merge applies the ReLU.
    """
    if not main:
        raise DimensionError("residual block needs a main path")
    if not 0 <= align < len(main):
        raise DimensionError(f"alignment {align} outside 0..{len(main) - 1}")
    d0 = main[0].in_dim
    stages, carry = [], d0
    for j, layer in enumerate(main):
        host = skip if j == align else None
        stage = ResidualStage(layer, host, carry_dim=carry, carry_in=j > 0,
                              merge=j == len(main) - 1)
        carry = stage.c_out
        stages.append(stage)
    return stages


def residual_direct(main: List[Dense], skip: Optional[Dense], thetas_main, theta_skip, Z):
    """Evaluate a residual block in its plain (non-Markovian) form."""
    h = Z
    for layer, th in zip(main, thetas_main):
        h = layer.forward(h, th)
    s = skip.forward(Z, theta_skip) if skip is not None else Z
    return np.maximum(h + s, 0.0)


class ResidualArch:
    """Stem, residual blocks with a learned skip, and a head.

    Parameters are kept in a logical order independent of where each skip
    is hosted: stem layers, then per block the main layers followed by the
    skip, then head layers.  ``build(alignments)`` lays the same parameters
    out over the Markovian stages for one choice of hosting stages.
    """

    def __init__(self, stem: List[LayerNode], blocks, head: List[LayerNode], loss="softmax-ce"):
        self.stem, self.head = list(stem), list(head)
        self.blocks = [(list(main), skip) for main, skip in blocks]
        self.loss = make_loss(loss) if isinstance(loss, str) else loss
        self.logical = list(self.stem)
        for main, skip in self.blocks:
            self.logical.extend(main)
            if skip is not None:
                self.logical.append(skip)
        self.logical.extend(self.head)

    @property
    def block_depths(self):
        return [len(main) for main, _ in self.blocks]

    def init(self, rng):
        return [layer.init_params(rng) for layer in self.logical]

    def build(self, alignments, logical_params=None):
        alignments = list(alignments) if alignments is not None else [0] * len(self.blocks)
        if len(alignments) != len(self.blocks):
            raise DimensionError("one alignment per residual block is required")
        layers = list(self.stem)
        for (main, skip), a in zip(self.blocks, alignments):
            layers.extend(build_residual(main, skip, a))
        layers.extend(self.head)
        net = NetworkSpec(layers, self.loss)
        if logical_params is not None:
            net.params = self.to_stages(logical_params, alignments)
        return net

    def to_stages(self, logical_params, alignments):
        it = iter(logical_params)
        out = [np.asarray(next(it), dtype=np.float64) for _ in self.stem]
        for (main, skip), a in zip(self.blocks, alignments):
            thetas = [next(it) for _ in main]
            phi = next(it) if skip is not None else None
            for j, th in enumerate(thetas):
                out.append(np.concatenate([th, phi]) if j == a and phi is not None else np.asarray(th))
        out.extend(np.asarray(next(it), dtype=np.float64) for _ in self.head)
        return out

    def from_stages(self, stage_params, alignments):
        it = iter(stage_params)
        out = [next(it) for _ in self.stem]
        for (main, skip), a in zip(self.blocks, alignments):
            phi = None
            for j, layer in enumerate(main):
                th = next(it)
                if j == a and skip is not None:
                    phi = th[layer.n_params:]
                    th = th[:layer.n_params]
                out.append(th)
            if skip is not None:
                out.append(phi)
        out.extend(next(it) for _ in self.head)
        return out


class SoftmaxCrossEntropy:
    """Mean cross-entropy over the batch, fused with a stable softmax."""

    name = "softmax-ce"

    @staticmethod
    def _probs(Z):
        e = np.exp(Z - Z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def value(self, Z, y):
        y = np.asarray(y, dtype=np.int64)
        m = Z.max(axis=1)
        lse = m + np.log(np.exp(Z - m[:, None]).sum(axis=1))
        return float(np.mean(lse - Z[np.arange(Z.shape[0]), y]))

    def grad(self, Z, y):
        y = np.asarray(y, dtype=np.int64)
        G = self._probs(Z)
        G[np.arange(Z.shape[0]), y] -= 1.0
        return G / Z.shape[0]

    def hessian_blocks(self, Z, y):
        S = self._probs(Z)
        H = np.einsum("bi,ij->bij", S, np.eye(Z.shape[1])) - np.einsum("bi,bj->bij", S, S)
        return H / Z.shape[0]


class MeanSquaredError:
    """Mean over the batch of ``0.5 * ||z - y||^2``."""

    name = "mse"

    def value(self, Z, Y):
        Y = np.asarray(Y, dtype=np.float64).reshape(Z.shape)
        return float(0.5 * np.mean(np.sum((Z - Y) ** 2, axis=1)))

    def grad(self, Z, Y):
        Y = np.asarray(Y, dtype=np.float64).reshape(Z.shape)
        return (Z - Y) / Z.shape[0]

    def hessian_blocks(self, Z, Y):
        B, d = Z.shape
        return np.broadcast_to(np.eye(d) / B, (B, d, d)).copy()


LOSSES = {"softmax-ce": SoftmaxCrossEntropy, "mse": MeanSquaredError}


def make_loss(name):
    try:
        return LOSSES[name]()
    except KeyError:
        raise ValueError(f"unknown loss {name!r}") from None


def block_diag_stack(blocks):
    """Dense ``(B*d, B*d)`` matrix from per-sample ``(B, d, d)`` blocks."""
    B, d, _ = blocks.shape
    out = np.zeros((B * d, B * d))
    for i in range(B):
        out[i * d:(i + 1) * d, i * d:(i + 1) * d] = blocks[i]
    return out


@dataclass
class BatchActivations:
    """Hidden states ``x_0 .. x_K`` of one mini-batch."""

    xs: List[np.ndarray]

    @property
    def output(self):
        return self.xs[-1]


@dataclass
class NetworkSpec:
    layers: List[LayerNode]
    loss: object = field(default_factory=SoftmaxCrossEntropy)
    params: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(
                    f"layer output {a.out_dim} does not chain into input {b.in_dim}")
        if isinstance(self.loss, str):
            self.loss = make_loss(self.loss)

    @property
    def depth(self):
        return len(self.layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def init(self, rng):
        self.params = [layer.init_params(rng) for layer in self.layers]
        return self

    def copy(self):
        return NetworkSpec(self.layers, self.loss, [p.copy() for p in self.params])

    def with_params(self, params):
        return NetworkSpec(self.layers, self.loss, [np.asarray(p, dtype=np.float64) for p in params])

    def flat_params(self):
        return np.concatenate(self.params) if self.params else np.zeros(0)

    def describe(self):
        return {"layers": [l.describe() for l in self.layers], "loss": self.loss.name}


def forward(net: NetworkSpec, X0, params=None):
    params = net.params if params is None else params
    X0 = np.asarray(X0, dtype=np.float64)
    if X0.ndim == 1:
        X0 = X0[None, :]
    _check(X0, net.in_dim)
    xs = [X0]
    for layer, th in zip(net.layers, params):
        xs.append(layer.forward(xs[-1], th))
    return BatchActivations(xs)


def predict(net: NetworkSpec, X0):
    return forward(net, X0).output


def accuracy(logits, y):
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))
