"""Closed-form 2-Wasserstein distances between Gaussians.

All functions return the *squared* distance W^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiagGaussian",
    "FullGaussian",
    "psd_sqrt",
    "w2_full",
    "w2_diag",
    "w2_modified",
    "w2_modified_batch",
]

SYM_TOL = 1e-10
EIG_TOL = 1e-10


@dataclass(frozen=True)
class DiagGaussian:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).ravel()
        sigma = np.asarray(self.sigma, dtype=np.float64).ravel()
        if mu.shape != sigma.shape:
            raise ValueError("mu and sigma must have the same length")
        if not (np.all(np.isfinite(sigma)) and np.all(sigma > 0)):
            raise ValueError("sigma must be finite and > 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def k(self) -> int:
        return self.mu.size

    def to_full(self) -> "FullGaussian":
        return FullGaussian(self.mu, np.diag(self.sigma**2))


@dataclass(frozen=True)
class FullGaussian:
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).ravel()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mu.size, mu.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {mu.size}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=SYM_TOL):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues in [-1e-10, 0) are treated as 0; anything more negative is an error.
    """
    a = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(a)
    if vals.size and vals.min() < -EIG_TOL * max(1.0, abs(vals).max()):
        raise np.linalg.LinAlgError(f"matrix is not positive semi-definite (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def w2_full(p: FullGaussian, q: FullGaussian) -> float:
    """Squared W2 between full-covariance Gaussians (Bures form)."""
    if p.mu.size != q.mu.size:
        raise ValueError("dimension mismatch")
    d = p.mu - q.mu
    root_p = psd_sqrt(p.cov)
    cross = root_p @ q.cov @ root_p
    cross = 0.5 * (cross + cross.T)
    vals = np.linalg.eigvalsh(cross)
    if vals.size and vals.min() < -EIG_TOL * max(1.0, abs(vals).max()):
        raise np.linalg.LinAlgError("cross term is not positive semi-definite")
    trace_root = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    value = float(d @ d + np.trace(p.cov) + np.trace(q.cov) - 2.0 * trace_root)
    return max(value, 0.0)


def w2_diag(p: DiagGaussian, q: DiagGaussian) -> float:
    """Squared W2 for diagonal covariances: mean gap plus std-deviation gap."""
    return w2_modified(p, q, 1.0)


def w2_modified(p: DiagGaussian, q: DiagGaussian, gamma: float) -> float:
    """``||mu_p - mu_q||^2 + gamma * ||sigma_p - sigma_q||^2``."""
    if p.k != q.k:
        raise ValueError(f"dimension mismatch: {p.k} vs {q.k}")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    dm = p.mu - q.mu
    ds = p.sigma - q.sigma
    return float(np.sum(dm * dm) + gamma * np.sum(ds * ds))


def w2_modified_batch(mu_p, sigma_p, mu_q, sigma_q, gamma: float) -> np.ndarray:
    """Vectorised :func:`w2_modified` over the last axis of equally shaped arrays."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    mu_p, mu_q = np.asarray(mu_p), np.asarray(mu_q)
    sigma_p, sigma_q = np.asarray(sigma_p), np.asarray(sigma_q)
    if not (mu_p.shape == mu_q.shape == sigma_p.shape == sigma_q.shape):
        raise ValueError("all inputs must share one shape")
    dm = mu_p - mu_q
    ds = sigma_p - sigma_q
    return np.sum(dm * dm, axis=-1) + gamma * np.sum(ds * ds, axis=-1)
