"""Dense linear algebra and proximal operators.

The SVD is a one-sided (Hestenes) Jacobi iteration compiled with numba.
Everything here is a pure function of its inputs.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidInput

SWEEP_TOL = 1e-12
MAX_SWEEPS = 60
MAX_DIM = 512


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self):
        return (self.U * self.sigma) @ self.V.T


@njit(cache=True)
def _hestenes_sweeps(U, V, tol, max_sweeps):
    m, n = U.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    alpha += U[k, p] * U[k, p]
                    beta += U[k, q] * U[k, q]
                    gamma += U[k, p] * U[k, q]
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    up = U[k, p]
                    uq = U[k, q]
                    U[k, p] = c * up - s * uq
                    U[k, q] = s * up + c * uq
                for k in range(n):
                    vp = V[k, p]
                    vq = V[k, q]
                    V[k, p] = c * vp - s * vq
                    V[k, q] = s * vp + c * vq
        if not rotated:
            return sweep + 1
    return max_sweeps


def _complete_basis(U, keep):
    """Fill the columns of ``U`` not flagged in ``keep`` with an orthonormal
    completion (Gram-Schmidt against standard basis vectors)."""
    d = U.shape[0]
    basis = [U[:, k] for k in range(U.shape[1]) if keep[k]]
    filled = []
    for e in np.eye(d):
        if len(basis) == d:
            break
        v = e.copy()
        for _ in range(2):
            for b in basis:
                v -= (b @ v) * b
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            v /= norm
            basis.append(v)
            filled.append(v)
    out = U.copy()
    missing = [k for k in range(U.shape[1]) if not keep[k]]
    for k, v in zip(missing, filled):
        out[:, k] = v
    return out


def _as_square(A):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {A.shape}")
    if A.shape[0] > MAX_DIM:
        raise InvalidInput(f"matrix dimension {A.shape[0]} exceeds {MAX_DIM}")
    if not np.all(np.isfinite(A)):
        raise InvalidInput("matrix contains non-finite entries")
    return A


def svd(A):
    """Full SVD of a square matrix, ``A = U @ diag(sigma) @ V.T``.

    Singular values come back in descending order. Each column of ``U`` has its
    largest-magnitude entry made positive (the matching ``V`` column is flipped
    with it), so results are reproducible.
    """
    A = _as_square(A)
    d = A.shape[0]
    W = np.array(A, order="C", copy=True)
    V = np.eye(d)
    _hestenes_sweeps(W, V, SWEEP_TOL, MAX_SWEEPS)

    sigma = np.sqrt(np.einsum("ij,ij->j", W, W))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    W = W[:, order]
    V = V[:, order]

    scale = sigma[0] if d and sigma[0] > 0 else 0.0
    keep = sigma > max(scale * d * np.finfo(float).eps, np.finfo(float).tiny)
    U = np.zeros_like(W)
    U[:, keep] = W[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    if not np.all(keep):
        U = _complete_basis(U, keep)

    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(d)])
    signs[signs == 0] = 1.0
    return SvdResult(U * signs, sigma, V * signs)


def soft_threshold(v, tau):
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def prox_l1(v, tau):
    """Proximal map of ``tau * ||.||_1``: elementwise soft-thresholding."""
    if tau < 0:
        raise InvalidInput(f"tau must be non-negative, got {tau}")
    return soft_threshold(np.asarray(v, dtype=np.float64), tau)


def prox_nuclear(A, tau):
    """Proximal map of ``tau * ||.||_*`` (singular value thresholding)."""
    if tau < 0:
        raise InvalidInput(f"tau must be non-negative, got {tau}")
    res = svd(A)
    shrunk = soft_threshold(res.sigma, tau)
    return (res.U * shrunk) @ res.V.T


def nuclear_norm(A):
    return float(np.sum(svd(A).sigma))


def numerical_rank(A, threshold=1e-3):
    """Number of singular values strictly greater than ``threshold``."""
    return int(np.count_nonzero(svd(A).sigma > threshold))
