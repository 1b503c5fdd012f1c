"""Eigenvalue bounds of the Gram matrix ``H^T H``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SpectralConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float, estimate):
        self.iterations = iterations
        self.residual = residual
        self.estimate = estimate
        super().__init__(
            f"power iteration did not converge in {iterations} steps "
            f"(relative residual {residual:.3g})"
        )


@dataclass(frozen=True)
class SpectralInfo:
    lambda_max: float
    lambda_min: float
    tol: float


def power_iteration(G, tol: float = 1e-10, max_iter: int = 20000, seed: int = 0):
    """Largest eigenvalue of symmetric PSD matrices ``G`` of shape ``(..., n, n)``.

    Each matrix stops once ``||G v - lam v|| <= tol * lam``;
    for a symmetric matrix this bounds the distance from ``lam`` to the
    spectrum by ``tol * lam``.

    Returns:
        Tuple of the estimates (scalar for a single matrix) and the number of
        iterations used.

    Raises:
        SpectralConvergenceError: the residual test failed within ``max_iter``.
    """
    G = np.asarray(G, dtype=float)
    n = G.shape[-1]
    batch = G.shape[:-2]
    if n == 0:
        return np.zeros(batch)[()], 0
    # one fixed start for every matrix: a batch entry gets the same estimate
    # as the matrix alone, and default penalties stay deterministic
    v0 = np.random.default_rng(seed).standard_normal(n)
    v = np.broadcast_to(v0 / np.linalg.norm(v0), (*batch, n)).copy()
    lam = np.zeros(batch)
    done = np.zeros(batch, dtype=bool)
    tiny = np.finfo(float).tiny
    rel = np.inf
    for it in range(1, max_iter + 1):
        w = np.matmul(G, v[..., None])[..., 0]
        lam_new = np.sum(v * w, axis=-1)
        nw = np.linalg.norm(w, axis=-1, keepdims=True)
        rel_all = np.linalg.norm(w - lam_new[..., None] * v, axis=-1) / np.maximum(np.abs(lam_new), tiny)
        # a zero matrix has converged trivially
        rel_all = np.where(nw[..., 0] == 0.0, 0.0, rel_all)
        # entries that converged earlier keep their value
        lam = np.where(done, lam, lam_new)
        done = done | (rel_all <= tol)
        if np.all(done):
            return lam[()], it
        rel = float(np.max(np.where(done, 0.0, rel_all)))
        v = np.where(done[..., None], v, w / np.where(nw == 0.0, 1.0, nw))
    raise SpectralConvergenceError(max_iter, rel, lam[()])


def largest_eigenvalue(G, tol: float = 1e-10):
    return power_iteration(G, tol=tol)[0]


def spectral_bounds(H, tol: float = 1e-10) -> SpectralInfo:
    """``lambda_max`` by power iteration, ``lambda_min`` by dense eigensolve.

    The real embedding doubles the multiplicity of every eigenvalue, so both
    coincide with those of the complex Gram matrix.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if not np.all(np.isfinite(H)):
        raise ValueError("channel matrix has non-finite entries")
    G = H.T @ H
    lam_max = float(largest_eigenvalue(G, tol))
    lam_min = float(np.linalg.eigvalsh(G)[0]) if G.size else 0.0
    lam_min = min(max(lam_min, 0.0), lam_max)
    return SpectralInfo(lambda_max=lam_max, lambda_min=lam_min, tol=tol)
