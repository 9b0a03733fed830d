"""Two-component PCA via power iteration with deflation."""

from __future__ import annotations

import numpy as np


def principal_components(data: np.ndarray, n_components: int = 2,
                         tol: float = 1e-9, max_iter: int = 1000):
    """Top eigenvectors of the sample covariance, by power iteration.

    Returns ``(components [k, d], eigenvalues [k], mean [d])``. Components are
    unit vectors with their largest-magnitude entry made positive, so output
    is deterministic. Requires at least two distinct rows.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-d data matrix, got shape {data.shape}")
    n, d = data.shape
    if len(np.unique(data, axis=0)) < 2:
        raise ValueError("projection needs at least 2 distinct vectors")
    if n_components > d:
        raise ValueError(f"cannot extract {n_components} components from dimension {d}")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (n - 1)

    components = np.zeros((n_components, d))
    eigenvalues = np.zeros(n_components)
    start_rng = np.random.default_rng(12345)  # fixed: deterministic output
    for k in range(n_components):
        v = start_rng.normal(size=d)
        v /= np.linalg.norm(v)
        degenerate = False
        for _ in range(max_iter):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                degenerate = True  # residual spectrum is (numerically) zero
                break
            w /= norm
            if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
                v = w
                break
            v = w
        if degenerate:
            v = _orthonormal_completion(components[:k], d)
        eigenvalues[k] = float(v @ cov @ v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        components[k] = v
        cov = cov - eigenvalues[k] * np.outer(v, v)
    return components, eigenvalues, mean


def _orthonormal_completion(existing: np.ndarray, d: int) -> np.ndarray:
    # First basis vector not spanned by the rows found so far, orthogonalized.
    for axis in range(d):
        v = np.zeros(d)
        v[axis] = 1.0
        for row in existing:
            v -= (v @ row) * row
        norm = np.linalg.norm(v)
        if norm > 1e-9:
            return v / norm
    raise ValueError("no orthogonal direction left")


def project_2d(data: np.ndarray, components: np.ndarray, mean: np.ndarray) -> np.ndarray:
    return (np.asarray(data, dtype=np.float64) - mean) @ components[:2].T
