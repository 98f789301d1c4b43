"""Dense linear algebra helpers and a cyclic Jacobi symmetric eigensolver.

Matrices and vectors are plain float64 numpy arrays. ``matmul`` only adds
shape/finiteness checks on top of numpy; ``sym_eigen`` is a self-contained
Jacobi implementation (round-robin ordering, so every round applies n/2
disjoint rotations as one vectorized update).
"""
from __future__ import annotations

import numpy as np

MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-9


class DimensionError(ValueError):
    pass


class NotSymmetricError(ValueError):
    pass


class EigenConvergenceError(RuntimeError):
    pass


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one Jacobi sweep: n-1 rounds of n/2 disjoint (p, q) pairs.

    ``n`` must be even; callers pad odd sizes with a dummy index.
    """
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array(players[: n // 2])
        q = np.array(players[n // 2 :][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _off_norm(a: np.ndarray) -> float:
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude component of each column is made positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def sym_eigen(s, max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors stored column-wise, each with its
    largest-magnitude component positive.
    """
    a = as_matrix(s)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"matrix must be square, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if n and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise NotSymmetricError("matrix is not symmetric within tolerance")
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))

    a = 0.5 * (a + a.T)
    size = n + (n % 2)
    if size != n:
        padded = np.zeros((size, size))
        padded[:n, :n] = a
        a = padded
    v = np.eye(size)
    rounds = _round_robin(size) if size > 1 else []
    fro = np.linalg.norm(a)
    tol = np.finfo(np.float64).eps * max(fro, np.finfo(np.float64).tiny)

    converged = False
    for _ in range(max_sweeps):
        off = _off_norm(a)
        if off <= tol:
            converged = True
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 0.0
            if not np.any(active):
                continue
            app = a[p, p]
            aqq = a[q, q]
            theta = np.where(active, (aqq - app) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0.0] = 1.0
            t[~active] = 0.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            sn = t * c
            # rows then columns: A <- J^T A J, V <- V J
            rp = a[p, :].copy()
            rq = a[q, :].copy()
            a[p, :] = c[:, None] * rp - sn[:, None] * rq
            a[q, :] = sn[:, None] * rp + c[:, None] * rq
            cp = a[:, p].copy()
            cq = a[:, q].copy()
            a[:, p] = cp * c - cq * sn
            a[:, q] = cp * sn + cq * c
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp = v[:, p].copy()
            vq = v[:, q].copy()
            v[:, p] = vp * c - vq * sn
            v[:, q] = vp * sn + vq * c
    if not converged:
        off = _off_norm(a)
        if off > tol:
            raise EigenConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (off-norm {off:.3e})")

    # a padding index has zero couplings, is never rotated and drops out here
    vals = np.diag(a)[:n].copy()
    vecs = v[:n, :n].copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], _canonical_signs(vecs[:, order])
