"""Dense symmetric linear algebra.

Storage order is row-major everywhere.  A vector ``v`` that lives in a
Kronecker-structured space of size ``m*n`` is read as the row-major ``(m, n)``
matrix ``C = v.reshape(m, n)``; with that convention ``np.kron(a, b)`` is the
row-major flattening of ``outer(a, b)`` and ``(A kron B) v = vec(A C B^T)``.
"""
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, DimensionError, NotPSDError

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-15


class SymEig(NamedTuple):
    """Eigenpairs of a symmetric matrix, eigenvalues sorted descending."""

    eigenvectors: np.ndarray
    eigenvalues: np.ndarray

    def reconstruct(self):
        U, lam = self.eigenvectors, self.eigenvalues
        return (U * lam) @ U.T


def _as_square(A):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DimensionError("matrix has non-finite entries")
    return A


def _round_robin(n):
    """Disjoint (p, q) pairings covering every pair once over n-1 rounds."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        rounds.append(pairs)
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eig(A, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the rotations of one round touch disjoint index pairs and can be
    applied together.  Iteration stops when the off-diagonal Frobenius norm
    falls below ``tol`` times the norm of ``A``.

    Returns eigenvalues in descending order; each eigenvector is signed so
    that its first non-negligible component is positive.
    """
    A = _as_square(A)
    n = A.shape[0]
    S = 0.5 * (A + A.T)
    V = np.eye(n)
    scale = np.linalg.norm(S)
    if n == 1 or scale == 0.0:
        return _finish(np.diag(S).copy(), V)

    rounds = [(np.array([p for p, _ in r]), np.array([q for _, q in r]))
              for r in _round_robin(n)]
    off = _off_norm(S)
    for _ in range(max_sweeps):
        if off <= tol * scale:
            break
        for P, Q in rounds:
            apq = S[P, Q]
            active = np.abs(apq) > 1e-20 * scale
            if not np.any(active):
                continue
            P, Q, apq = P[active], Q[active], apq[active]
            tau = (S[Q, Q] - S[P, P]) / (2.0 * apq)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            J = np.eye(n)
            J[P, P] = c
            J[Q, Q] = c
            J[P, Q] = s
            J[Q, P] = -s
            S = J.T @ S @ J
            V = V @ J
        off = _off_norm(S)
    else:
        if off > tol * scale:
            raise ConvergenceError(
                f"Jacobi eigensolver did not converge in {max_sweeps} sweeps",
                residual=off / scale)
    return _finish(np.diag(S).copy(), V)


def _off_norm(S):
    return np.linalg.norm(S - np.diag(np.diag(S)))


def _finish(lam, V):
    order = np.argsort(-lam, kind="stable")
    lam, V = lam[order], V[:, order]
    for j in range(V.shape[1]):
        col = V[:, j]
        big = np.flatnonzero(np.abs(col) > 1e-12 * max(np.abs(col).max(), 1e-300))
        if big.size and col[big[0]] < 0:
            V[:, j] = -col
    return SymEig(V, lam)


def pinv_psd(A, tol=1e-12):
    """Moore-Penrose pseudo-inverse of a symmetric PSD matrix.

    Eigenvalues below ``tol * lambda_max`` are treated as zero.
    """
    eig = sym_eig(A)
    return pinv_from_eig(eig, tol)


def pinv_from_eig(eig, tol=1e-12):
    U, lam = eig
    lam_max = max(float(lam[0]), 0.0) if lam.size else 0.0
    if lam.size and lam[-1] < -tol * np.abs(lam).max():
        raise NotPSDError(f"matrix is not PSD (min eigenvalue {lam[-1]:.3e})",
                          min_eigenvalue=float(lam[-1]))
    inv = pinv_diag(lam, tol * lam_max)
    return (U * inv) @ U.T


def pinv_diag(lam, cutoff):
    """Elementwise pseudo-reciprocal: 1/lam where lam > cutoff, else 0."""
    lam = np.asarray(lam, dtype=np.float64)
    keep = lam > cutoff
    out = np.zeros_like(lam)
    out[keep] = 1.0 / lam[keep]
    return out


def kron_apply(A, B, v):
    """``(A kron B) v`` without forming the Kronecker product."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or v.ndim != 1:
        raise DimensionError("kron_apply expects two matrices and a vector")
    m, n = A.shape[1], B.shape[1]
    if v.size != m * n:
        raise DimensionError(f"vector of length {v.size} does not match {m}x{n}")
    return (A @ v.reshape(m, n) @ B.T).ravel()
