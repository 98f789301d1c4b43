"""Whitened PCA manifold over flattened (T, 2) trajectories."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .linalg import sym_eigen

EIGEN_FLOOR = 1e-12


class RankDeficiencyError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralBasis:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (k, D), rows are eigen-trajectories
    scales: np.ndarray  # (k,), sqrt of the retained eigenvalues
    explained_variance_ratio: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return int(self.basis.shape[0])

    @property
    def dim(self) -> int:
        return int(self.basis.shape[1])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.k},{self.dim};".encode())
        for arr in (self.mean, self.basis, self.scales):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def flatten(trajectories) -> np.ndarray:
    x = np.asarray(trajectories, dtype=np.float64)
    if x.ndim == 3:
        x = x.reshape(len(x), -1)
    elif x.ndim == 2 and x.shape[1] == 2:
        x = x.reshape(1, -1)
    if x.ndim != 2:
        raise ValueError(f"cannot flatten trajectories of shape {np.shape(trajectories)}")
    return x


def spectrum(trajectories) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, descending eigenvalues and eigenvectors (columns) of the sample covariance."""
    x = flatten(trajectories)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two trajectories")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    vals, vecs = sym_eigen(cov)
    return mean, vals, vecs


def basis_from_spectrum(mean, vals, vecs, k: int) -> SpectralBasis:
    d = len(mean)
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    if vals[k - 1] <= EIGEN_FLOOR:
        raise RankDeficiencyError(f"eigenvalue {k} is {vals[k - 1]:.3e} <= {EIGEN_FLOOR:g}; whitening is degenerate")
    total = float(np.sum(np.clip(vals, 0.0, None)))
    return SpectralBasis(
        mean=mean.copy(),
        basis=vecs[:, :k].T.copy(),
        scales=np.sqrt(vals[:k]),
        explained_variance_ratio=vals[:k] / total,
    )


def fit(trajectories, k: int = 12) -> SpectralBasis:
    x = flatten(trajectories)
    if not 1 <= k <= x.shape[1]:
        raise ValueError(f"k must be in [1, {x.shape[1]}], got {k}")
    if len(x) < k + 1:
        raise ValueError(f"need at least k+1 = {k + 1} trajectories, got {len(x)}")
    return basis_from_spectrum(*spectrum(x), k)


def project(basis: SpectralBasis, x) -> np.ndarray:
    """Whitened coefficients; a single trajectory gives (k,), a batch gives (N, k)."""
    single = np.ndim(x) == 2 and np.shape(x)[1] == 2 or np.ndim(x) == 1
    flat = np.asarray(x, dtype=np.float64).reshape(1 if single else -1, basis.dim)
    z = ((flat - basis.mean) @ basis.basis.T) / basis.scales
    return z[0] if single else z


def reconstruct(basis: SpectralBasis, z) -> np.ndarray:
    """x_hat = mu + B^T W z, returned with trajectory shape (..., T, 2)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != basis.k:
        raise ValueError(f"expected {basis.k} coefficients, got {z.shape[-1]}")
    flat = basis.mean + (z * basis.scales) @ basis.basis
    return flat.reshape(*z.shape[:-1], -1, 2)


def traverse(basis: SpectralBasis, component: int, offsets, fixed=None) -> list[np.ndarray]:
    if not 0 <= component < basis.k:
        raise IndexError(f"component {component} outside [0, {basis.k})")
    base = np.zeros(basis.k) if fixed is None else np.asarray(fixed, dtype=np.float64).copy()
    out = []
    for off in offsets:
        z = base.copy()
        z[component] = off
        out.append(reconstruct(basis, z))
    return out
