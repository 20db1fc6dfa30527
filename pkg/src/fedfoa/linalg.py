"""Dense linear-algebra kernels.

Matrices are plain float64 numpy arrays. The QR factorization uses Householder
reflections and normalizes signs so that ``diag(R) >= 0``; the SVD is a
one-sided (Hestenes) Jacobi iteration with a round-robin pair ordering so that
each step rotates n/2 disjoint column pairs at once.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

QR_TOL = 1e-8
SVD_TOL = 1e-7
JACOBI_MAX_SWEEPS = 100
JACOBI_THRESHOLD = 1e-12


class LinalgError(ValueError):
    """Raised on dimension mismatches or non-finite input."""


class QrFactors(NamedTuple):
    q: np.ndarray
    r: np.ndarray


class SvdFactors(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise LinalgError(f"{name} contains non-finite entries")
    return m


def qr_decompose(z) -> QrFactors:
    """Thin Householder QR of an m x n matrix with m >= n.

    Returns ``Q`` (m x n, orthonormal columns) and ``R`` (n x n, upper
    triangular, non-negative diagonal). Rank-deficient input is accepted and
    yields zero (or roundoff-level) diagonal entries in ``R``.
    """
    a = as_matrix(z, "z").copy()
    m, n = a.shape
    if m < n:
        raise LinalgError(f"qr_decompose needs rows >= cols, got {m}x{n}")

    reflectors = []
    for k in range(n):
        x = a[k:, k]
        norm_x = np.sqrt(x @ x)
        if norm_x == 0.0:
            reflectors.append(None)
            continue
        v = x.copy()
        v[0] += norm_x if x[0] >= 0 else -norm_x
        v /= np.sqrt(v @ v)
        a[k:, k:] -= 2.0 * np.outer(v, v @ a[k:, k:])
        a[k + 1:, k] = 0.0
        reflectors.append(v)

    r = np.triu(a[:n, :])
    q = np.eye(m, n)
    for k in reversed(range(n)):
        v = reflectors[k]
        if v is not None:
            q[k:, :] -= 2.0 * np.outer(v, v @ q[k:, :])

    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return QrFactors(q * signs, r * signs[:, None])


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: n-1 rounds of n/2 disjoint pairs (n even).
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        left = np.array(players[:half])
        right = np.array(players[half:][::-1])
        rounds.append((np.minimum(left, right), np.maximum(left, right)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_orthonormal(basis: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Replace the columns flagged in ``missing`` with an orthonormal completion."""
    out = basis.copy()
    out[:, missing] = 0.0
    p = out.shape[0]
    candidates = iter(np.eye(p))
    for j in np.flatnonzero(missing):
        while True:
            e = next(candidates)
            for _ in range(2):
                e = e - out @ (out.T @ e)
            nrm = np.sqrt(e @ e)
            if nrm > 1e-6:
                out[:, j] = e / nrm
                break
    return out


def _jacobi_tall(a: np.ndarray) -> SvdFactors:
    # One-sided Jacobi on a tall p x q matrix (p >= q): orthogonalize columns.
    # Columns of [a; I] are stored as rows of ``x`` so pair gathers are contiguous.
    p, q = a.shape
    n = q + (q % 2)
    x = np.zeros((n, p + n))
    x[:q, :p] = a.T
    x[:, p:] = np.eye(n)
    schedule = _round_robin(n) if n > 1 else []

    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for i, j in schedule:
            xi, xj = x[i], x[j]
            wi, wj = xi[:, :p], xj[:, :p]
            alpha = np.einsum("ij,ij->i", wi, wi)
            beta = np.einsum("ij,ij->i", wj, wj)
            gamma = np.einsum("ij,ij->i", wi, wj)
            scale = np.sqrt(alpha) * np.sqrt(beta)
            active = (scale > 0) & (np.abs(gamma) > JACOBI_THRESHOLD * scale)
            if not active.any():
                continue
            rotated = True
            gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(active, t, 0.0)[:, None]
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            x[i] = c * xi - s * xj
            x[j] = s * xi + c * xj
        if not rotated:
            break

    w, v = x[:q, :p].T, x[:q, p:p + q].T
    sigma = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]

    tiny = sigma <= max(p, q) * np.finfo(float).eps * (sigma[0] if q else 0.0)
    tiny |= sigma == 0.0
    u = np.zeros_like(w)
    u[:, ~tiny] = w[:, ~tiny] / sigma[~tiny]
    if tiny.any():
        sigma = np.where(tiny, 0.0, sigma)
        u = _complete_orthonormal(u, tiny)
    return SvdFactors(u, sigma, v)


def thin_svd(a) -> SvdFactors:
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with sigma sorted descending.

    For a p x q input with k = min(p, q): u is p x k, sigma has length k,
    v is q x k.
    """
    m = as_matrix(a, "a")
    p, q = m.shape
    if p >= q:
        return _jacobi_tall(m)
    u, sigma, v = _jacobi_tall(m.T)
    return SvdFactors(v, sigma, u)


def procrustes_align(z, r) -> tuple[np.ndarray, float]:
    """Best orthonormal-column ``Q`` minimizing ``||z - Q r||_F``.

    With ``r z^T = U S V^T`` the optimum is ``Q* = V U^T``. Returns ``Q*`` and
    the attained Frobenius residual.
    """
    z = as_matrix(z, "z")
    r = as_matrix(r, "r")
    m, n = z.shape
    if m < n:
        raise LinalgError(f"procrustes_align needs rows >= cols, got {m}x{n}")
    if r.shape != (n, n):
        raise LinalgError(f"r must be {n}x{n} to match z, got {r.shape}")
    u, _, v = thin_svd(r @ z.T)
    q_star = v @ u.T
    residual = float(np.linalg.norm(z - q_star @ r))
    return q_star, residual


def frobenius_distance(a, b) -> float:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise LinalgError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(np.sum(d * d)))


def orthogonality_error(q: np.ndarray) -> float:
    """Max-abs deviation of ``q^T q`` from the identity."""
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[1])))) if q.size else 0.0
