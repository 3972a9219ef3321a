"""Curvature models for the parameter block ``Q^{theta theta}_k``.

Each model only has to apply its pseudo-inverse to a parameter-space vector.

* ``identity`` -- ``Q = I``.
* ``adaptive`` -- ``Q = diag(sqrt(E[Q^theta * Q^theta]) + eps)``, the
  exponential moving average taken over optimizer steps.
* ``kfac``     -- ``Q = E[x x^T] kron E[v_h v_h^T]`` per dense block,
  inverted in the eigenbasis of the two factors.

The Kronecker model supports two ways of folding in the damping ``gamma``:
``"additive"`` uses the eigenbasis diagonal ``1/gamma + 1/(l1 l2)`` (the 1/gamma
term is dropped when gamma is 0), ``"damped"`` uses ``1/(l1 l2 + gamma)``.
"""
import numpy as np

from .errors import CurvatureError
from .linalg import pinv_diag, sym_eig

GAMMA_MODES = ("additive", "damped")


class CurvatureModel:
    kind = "abstract"

    def update_stats(self, k, layer, X, theta, Vx, q_theta):
        """Fold the statistics of layer ``k`` from one backward pass."""

    def apply_pinv(self, k, v):
        raise NotImplementedError

    def quadratic_form(self, k, p):
        return float(p @ self.apply_pinv(k, p))

    def dense_pinv(self, k, n):
        """The pseudo-inverse as an explicit ``(n, n)`` matrix (tests/oracle)."""
        return np.column_stack([self.apply_pinv(k, e) for e in np.eye(n)]) if n else np.zeros((0, 0))

    def state_dict(self):
        return {}

    def load_state_dict(self, state):
        pass

    def _checked(self, k, out):
        if not np.all(np.isfinite(out)):
            raise CurvatureError(f"curvature pseudo-inverse is non-finite at layer {k}", layer=k)
        return out


class IdentityCurvature(CurvatureModel):
    kind = "identity"

    def apply_pinv(self, k, v):
        return np.asarray(v, dtype=np.float64)

    def quadratic_form(self, k, p):
        return float(p @ p)


class AdaptiveCurvature(CurvatureModel):
    """Diagonal RMS curvature from an EMA of squared ``Q^theta``.

    With ``bias_correction`` the EMA is divided by ``1 - rho**t`` as in Adam,
    which keeps the first steps from being inflated by the zero start.
    """

    kind = "adaptive"

    def __init__(self, eps=1e-8, ema=0.999, bias_correction=True):
        self.eps, self.rho, self.bias_correction = float(eps), float(ema), bool(bias_correction)
        self.sq = {}
        self.count = {}

    def update_stats(self, k, layer, X, theta, Vx, q_theta):
        g2 = np.asarray(q_theta, dtype=np.float64) ** 2
        if k not in self.sq:
            self.sq[k] = np.zeros_like(g2)
            self.count[k] = 0
        self.sq[k] = self.rho * self.sq[k] + (1.0 - self.rho) * g2
        self.count[k] += 1

    def set_state(self, k, sq, count=1):
        self.sq[k] = np.asarray(sq, dtype=np.float64)
        self.count[k] = count

    def diagonal(self, k):
        sq = self.sq[k]
        if self.bias_correction and self.rho > 0:
            sq = sq / (1.0 - self.rho ** self.count[k])
        return np.sqrt(sq) + self.eps

    def apply_pinv(self, k, v):
        v = np.asarray(v, dtype=np.float64)
        if k not in self.sq or self.count[k] == 0:
            return v
        return self._checked(k, v * pinv_diag(self.diagonal(k), 0.0))

    def state_dict(self):
        out = {}
        for k in sorted(self.sq):
            out[f"adaptive.{k}.sq"] = self.sq[k]
            out[f"adaptive.{k}.count"] = np.array([self.count[k]], dtype=np.float64)
        return out

    def load_state_dict(self, state):
        self.sq, self.count = {}, {}
        for name, arr in state.items():
            parts = name.split(".")
            if parts[0] != "adaptive":
                continue
            k = int(parts[1])
            if parts[2] == "sq":
                self.sq[k] = np.array(arr, dtype=np.float64)
            else:
                self.count[k] = int(arr[0])


class _KronBlock:
    __slots__ = ("A", "G", "eigA", "eigG", "count")

    def __init__(self):
        self.A = self.G = self.eigA = self.eigG = None
        self.count = 0


class KfacCurvature(CurvatureModel):
    """Kronecker-factored curvature with eigenbasis pseudo-inversion.

    For one dense block with augmented inputs ``xa = [x, 1]`` and
    pre-activation cotangents ``v_h``, the factors are ``A = mean(xa xa^T)``
    and ``G = B * sum(v_h v_h^T)``; the factor ``B`` undoes the ``1/B`` that
    the mean loss puts into each per-sample cotangent, so ``A kron G``
    approximates the mean outer product of per-sample gradients.  Layers
    without Kronecker structure fall back to the adaptive model.
    """

    kind = "kfac"

    def __init__(self, ema=0.95, refresh=20, damping=0.0, gamma_mode="additive",
                 pinv_tol=1e-12, eps=1e-8):
        if gamma_mode not in GAMMA_MODES:
            raise ValueError(f"gamma_mode must be one of {GAMMA_MODES}")
        self.rho, self.refresh = float(ema), int(refresh)
        self.damping, self.gamma_mode, self.pinv_tol = float(damping), gamma_mode, float(pinv_tol)
        self.blocks = {}
        self.slices = {}
        self.fallback = AdaptiveCurvature(eps=eps)

    def update_stats(self, k, layer, X, theta, Vx, q_theta):
        blocks = layer.kfac_blocks(X, theta, Vx)
        if blocks is None:
            self.fallback.update_stats(k, layer, X, theta, Vx, q_theta)
            return
        self.slices[k] = [sl for sl, _, _ in blocks]
        stats = self.blocks.setdefault(k, [_KronBlock() for _ in blocks])
        for st, (_, xa, vh) in zip(stats, blocks):
            B = xa.shape[0]
            A = xa.T @ xa / B
            G = B * (vh.T @ vh)
            self.fold(st, A, G)

    def fold(self, st, A, G):
        if st.count == 0:
            st.A, st.G = A, G
        else:
            st.A = self.rho * st.A + (1.0 - self.rho) * A
            st.G = self.rho * st.G + (1.0 - self.rho) * G
        if st.count % self.refresh == 0:
            st.eigA, st.eigG = sym_eig(st.A), sym_eig(st.G)
        st.count += 1

    def set_factors(self, k, factors, slices):
        """Install explicit ``[(A, G), ...]`` factors for layer ``k``."""
        self.slices[k] = list(slices)
        self.blocks[k] = []
        for A, G in factors:
            st = _KronBlock()
            st.A, st.G = np.asarray(A, float), np.asarray(G, float)
            st.eigA, st.eigG = sym_eig(st.A), sym_eig(st.G)
            st.count = 1
            self.blocks[k].append(st)

    def eigen_diagonal(self, lam1, lam2):
        lam1 = np.clip(lam1, 0.0, None)
        lam2 = np.clip(lam2, 0.0, None)
        if self.gamma_mode == "damped":
            return pinv_diag(np.outer(lam1, lam2) + self.damping, 0.0)
        inv1 = pinv_diag(lam1, self.pinv_tol * (lam1[0] if lam1.size else 0.0))
        inv2 = pinv_diag(lam2, self.pinv_tol * (lam2[0] if lam2.size else 0.0))
        D = np.outer(inv1, inv2)
        if self.damping > 0:
            D = D + 1.0 / self.damping
        return D

    def _apply_block(self, st, v):
        (U1, l1), (U2, l2) = st.eigA, st.eigG
        C = v.reshape(U1.shape[0], U2.shape[0])
        R = U1.T @ C @ U2
        R *= self.eigen_diagonal(l1, l2)
        return (U1 @ R @ U2.T).ravel()

    def apply_pinv(self, k, v):
        v = np.asarray(v, dtype=np.float64)
        if k not in self.blocks:
            return self.fallback.apply_pinv(k, v)
        out = np.empty_like(v)
        for sl, st in zip(self.slices[k], self.blocks[k]):
            out[sl] = self._apply_block(st, v[sl])
        return self._checked(k, out)

    def state_dict(self):
        out = dict(self.fallback.state_dict())
        for k in sorted(self.blocks):
            for j, (sl, st) in enumerate(zip(self.slices[k], self.blocks[k])):
                pre = f"kfac.{k}.{j}"
                out[pre + ".A"] = st.A
                out[pre + ".G"] = st.G
                out[pre + ".meta"] = np.array([st.count, sl.start, sl.stop], dtype=np.float64)
                if st.eigA is not None:
                    out[pre + ".UA"], out[pre + ".lA"] = st.eigA
                    out[pre + ".UG"], out[pre + ".lG"] = st.eigG
        return out

    def load_state_dict(self, state):
        from .linalg import SymEig
        self.fallback.load_state_dict(state)
        self.blocks, self.slices = {}, {}
        grouped = {}
        for name, arr in state.items():
            parts = name.split(".")
            if parts[0] != "kfac":
                continue
            grouped.setdefault((int(parts[1]), int(parts[2])), {})[parts[3]] = np.array(arr, float)
        for (k, j) in sorted(grouped):
            g = grouped[(k, j)]
            st = _KronBlock()
            st.A, st.G = g["A"], g["G"]
            count, start, stop = (int(x) for x in g["meta"])
            st.count = count
            if "UA" in g:
                st.eigA, st.eigG = SymEig(g["UA"], g["lA"]), SymEig(g["UG"], g["lG"])
            self.blocks.setdefault(k, []).append(st)
            self.slices.setdefault(k, []).append(slice(start, stop))


def make_curvature(kind, eps=1e-8, ema=None, refresh=20, damping=0.0,
                   gamma_mode="additive", pinv_tol=1e-12):
    if kind == "identity":
        return IdentityCurvature()
    if kind == "adaptive":
        return AdaptiveCurvature(eps=eps, ema=0.999 if ema is None else ema)
    if kind == "kfac":
        return KfacCurvature(ema=0.95 if ema is None else ema, refresh=refresh,
                             damping=damping, gamma_mode=gamma_mode,
                             pinv_tol=pinv_tol, eps=eps)
    raise ValueError(f"unknown curvature kind {kind!r}")
