"""Whiten-and-rotate preprocessing.

The embeddings are centred, projected onto the eigenvectors of their
covariance and scaled to unit variance, then rotated into the eigenbasis of
the average within-class covariance with eigenvalues ascending.  After the
transform the training set has zero mean, identity covariance and a diagonal
average within-class covariance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import DataError, DimensionMismatchError, EmbeddingDataset, compute_empirical_moments

__all__ = ["Whitener", "fit_whitener", "apply_whitener", "sym_eig"]


def _fix_signs(vecs):
    # largest-magnitude entry of each eigenvector made positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def sym_eig(A):
    """Eigen-decomposition of a symmetric matrix, eigenvalues ascending and clamped at zero."""
    vals, vecs = np.linalg.eigh(0.5 * (A + A.T))
    return np.clip(vals, 0.0, None), _fix_signs(vecs)


@dataclass(frozen=True)
class Whitener:
    mean: np.ndarray
    U: np.ndarray
    lambda_inv_sqrt: np.ndarray
    V: np.ndarray
    sigma_sq: np.ndarray

    @property
    def retained(self) -> int:
        return self.V.shape[0]

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    def matrix(self) -> np.ndarray:
        """The ``D x D'`` matrix ``W`` with ``z = (x - mean) @ W``."""
        return (self.U * self.lambda_inv_sqrt) @ self.V

    def __call__(self, X):
        return apply_whitener(self, X)

    def inverse(self, Z):
        """Map whitened rows back to centred input space (exact when nothing was discarded)."""
        Z = np.atleast_2d(Z)
        return ((Z @ self.V.T) / self.lambda_inv_sqrt) @ self.U.T

    def to_dict(self):
        return {
            "mean": self.mean,
            "U": self.U,
            "lambda_inv_sqrt": self.lambda_inv_sqrt,
            "V": self.V,
            "sigma_sq": self.sigma_sq,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["mean"], float),
            np.asarray(d["U"], float).reshape(len(d["mean"]), -1),
            np.asarray(d["lambda_inv_sqrt"], float).ravel(),
            np.atleast_2d(np.asarray(d["V"], float)),
            np.asarray(d["sigma_sq"], float).ravel(),
        )


def fit_whitener(ds: EmbeddingDataset, eig_threshold: float = 1e-7, keep_dims: Optional[int] = None) -> Whitener:
    """Fit the whitening transform on a labelled training set.

    Parameters
    ----------
    eig_threshold : float
        Directions whose covariance eigenvalue is below
        ``eig_threshold * max_eigenvalue`` are discarded.
    keep_dims : int, optional
        Keep only the leading principal components (largest eigenvalues)
        before the within-class rotation.
    """
    mom = compute_empirical_moments(ds)
    vals, vecs = sym_eig(mom.Sigma0)
    # descending variance order
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if vals[0] <= 0:
        raise DataError("all covariance eigenvalues are zero")
    keep = vals >= eig_threshold * vals[0]
    if not keep.any():
        raise DataError("all covariance eigenvalues fall below the threshold")
    vals, vecs = vals[keep], vecs[:, keep]
    if keep_dims is not None:
        if keep_dims < 1:
            raise ValueError("keep_dims must be positive")
        vals, vecs = vals[:keep_dims], vecs[:, :keep_dims]
    if ds.N <= vals.shape[0]:
        raise DataError(f"need more samples ({ds.N}) than retained dimensions ({vals.shape[0]})")
    lam_inv_sqrt = 1.0 / np.sqrt(vals)
    P = vecs * lam_inv_sqrt
    # within-class covariance in the whitened coordinates
    Sigma_w = P.T @ mom.Sigma @ P
    s, V = sym_eig(Sigma_w)
    return Whitener(mom.mu0.copy(), vecs, lam_inv_sqrt, V, s)


def apply_whitener(w: Whitener, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != w.input_dim:
        raise DimensionMismatchError(f"whitener expects {w.input_dim} columns, got {X.shape[1]}")
    Z = ((X - w.mean) @ w.U * w.lambda_inv_sqrt) @ w.V
    return Z[0] if squeeze else Z
