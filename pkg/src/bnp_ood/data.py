"""Labelled embedding datasets and the per-class statistics every model consumes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "DataError",
    "FormatError",
    "PayloadSizeError",
    "DimensionMismatchError",
    "LabelRangeError",
    "EmptyClassError",
    "EmbeddingDataset",
    "ClassStats",
    "EmpiricalMoments",
    "compute_class_stats",
    "compute_empirical_moments",
]


class DataError(ValueError):
    """Base class for problems with user-supplied data."""


class FormatError(DataError):
    """Malformed file header or unparseable content."""


class PayloadSizeError(FormatError):
    """Binary payload length disagrees with the header."""


class DimensionMismatchError(DataError):
    """Arrays whose shapes should agree do not."""


class LabelRangeError(DataError):
    """A label falls outside ``[0, K)``."""


class EmptyClassError(DataError):
    """An operation needed every class to have at least one sample."""


@dataclass(frozen=True)
class EmbeddingDataset:
    """``N x D`` embeddings with dense integer labels in ``[0, K)``."""

    X: np.ndarray
    y: np.ndarray
    K: int

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y)
        if X.ndim != 2:
            raise DimensionMismatchError(f"X must be 2-D, got shape {X.shape}")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise DimensionMismatchError(f"y has shape {y.shape} but X has {X.shape[0]} rows")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise LabelRangeError("labels must be integers")
        y = y.astype(np.int64)
        K = int(self.K)
        if y.size and (y.min() < 0 or y.max() >= K):
            raise LabelRangeError(f"labels must lie in [0, {K}), got range [{y.min()}, {y.max()}]")
        if not np.all(np.isfinite(X)):
            raise DataError("embeddings contain NaN or Inf")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "K", K)

    @classmethod
    def from_arrays(cls, X, y, K: Optional[int] = None) -> "EmbeddingDataset":
        y = np.asarray(y)
        if K is None:
            K = int(y.max()) + 1 if y.size else 0
        return cls(X, y, K)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.K)

    def class_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.y == k)

    def transform(self, fn) -> "EmbeddingDataset":
        return EmbeddingDataset(fn(self.X), self.y, self.K)


@dataclass(frozen=True)
class ClassStats:
    """Per-class sufficient statistics.

    Attributes
    ----------
    counts : (K,) int array
    sums : (K, D) array of ``sum_n x_n``
    diag_sq : (K, D) array of ``sum_n x_n**2``
    outer : (K, D, D) array of ``sum_n x_n x_n^T`` or None when not requested
    """

    counts: np.ndarray
    sums: np.ndarray
    diag_sq: np.ndarray
    outer: Optional[np.ndarray] = field(default=None)

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def D(self) -> int:
        return self.sums.shape[1]

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    def means(self) -> np.ndarray:
        """Class means; raises for empty classes."""
        if np.any(self.counts == 0):
            raise EmptyClassError("class mean undefined for an empty class")
        return self.sums / self.counts[:, None]


def compute_class_stats(ds: EmbeddingDataset, outer: bool = True) -> ClassStats:
    """Exact per-class counts, sums and squared sums.

    Rows are accumulated class by class in ascending sample order so the
    result is reproducible for a fixed input.  ``outer=False`` skips the
    ``K x D x D`` outer-product sums, which diagonal models never read.
    """
    K, D = ds.K, ds.D
    counts = np.zeros(K, dtype=np.int64)
    sums = np.zeros((K, D))
    diag_sq = np.zeros((K, D))
    outers = np.zeros((K, D, D)) if outer else None
    for k in range(K):
        Xk = ds.X[ds.class_indices(k)]
        counts[k] = Xk.shape[0]
        if counts[k] == 0:
            continue
        sums[k] = Xk.sum(axis=0)
        diag_sq[k] = (Xk * Xk).sum(axis=0)
        if outer:
            outers[k] = Xk.T @ Xk
            # symmetric by construction, but enforce it bitwise
            outers[k] = 0.5 * (outers[k] + outers[k].T)
    return ClassStats(counts, sums, diag_sq, outers)


@dataclass(frozen=True)
class EmpiricalMoments:
    """Plug-in moments using the population (``1/N``) convention.

    ``Sigma_hat`` is the average within-class covariance
    ``(1/N) sum_n (x_n - mu_{y_n})(x_n - mu_{y_n})^T`` and ``Sigma_k`` the
    per-class covariances with denominator ``N_k``.
    """

    mu0: np.ndarray
    Sigma0: np.ndarray
    Sigma: np.ndarray
    mu_k: np.ndarray
    Sigma_k: np.ndarray
    counts: np.ndarray

    @property
    def K(self) -> int:
        return self.mu_k.shape[0]

    @property
    def D(self) -> int:
        return self.mu0.shape[0]


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def compute_empirical_moments(ds: EmbeddingDataset) -> EmpiricalMoments:
    counts = ds.counts()
    if np.any(counts == 0):
        raise EmptyClassError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")
    if ds.N < 2:
        raise DataError("need at least two samples")
    X, y = ds.X, ds.y
    mu0 = X.mean(axis=0)
    Xc = X - mu0
    Sigma0 = _sym(Xc.T @ Xc / ds.N)
    mu_k = np.stack([X[ds.class_indices(k)].mean(axis=0) for k in range(ds.K)])
    W = X - mu_k[y]
    Sigma = _sym(W.T @ W / ds.N)
    Sigma_k = np.empty((ds.K, ds.D, ds.D))
    for k in range(ds.K):
        Wk = W[ds.class_indices(k)]
        Sigma_k[k] = Wk.T @ Wk / counts[k]
    return EmpiricalMoments(mu0, Sigma0, Sigma, mu_k, _sym(Sigma_k), counts)
