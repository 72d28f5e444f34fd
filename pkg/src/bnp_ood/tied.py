"""Gaussian DPMM with one covariance shared by every cluster.

Cluster means have a Gaussian prior ``N(mu0, Sigma0)`` and every cluster uses
the covariance ``Sigma``.  The label posterior of a new point is proportional
to ``N_k N(x | mu'_k, Sigma'_k + Sigma)`` for a known class and to
``alpha N(x | mu0, Sigma0 + Sigma)`` for a new one, with

    Sigma'_k = (Sigma0^-1 + N_k Sigma^-1)^-1
    mu'_k    = Sigma'_k (Sigma0^-1 mu0 + N_k Sigma^-1 xbar_k)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .data import ClassStats, EmbeddingDataset, compute_class_stats, compute_empirical_moments
from .numerics import cholesky_with_jitter, mvn_logpdf

__all__ = ["TiedModel", "fit_tied", "tied_posterior"]


def _inv_from_chol(L):
    return scipy.linalg.cho_solve((L, True), np.eye(L.shape[0]))


def tied_posterior(mu0, Sigma0, Sigma, counts, sums):
    """Posterior means ``(K, D)`` and covariances ``(K, D, D)`` of the cluster means."""
    P0 = _inv_from_chol(cholesky_with_jitter(Sigma0, "Sigma0"))
    P = _inv_from_chol(cholesky_with_jitter(Sigma, "Sigma"))
    K, D = sums.shape
    mu_post = np.empty((K, D))
    Sigma_post = np.empty((K, D, D))
    for k in range(K):
        prec = P0 + counts[k] * P
        Lk = cholesky_with_jitter(0.5 * (prec + prec.T), f"posterior precision of class {k}")
        S = _inv_from_chol(Lk)
        Sigma_post[k] = 0.5 * (S + S.T)
        mu_post[k] = scipy.linalg.cho_solve((Lk, True), P0 @ mu0 + P @ sums[k])
    return mu_post, Sigma_post


@dataclass
class TiedModel:
    mu0: np.ndarray
    Sigma0: np.ndarray
    Sigma: np.ndarray
    counts: np.ndarray
    mu_post: np.ndarray
    Sigma_post: np.ndarray
    _chol_post: list = field(init=False, repr=False)
    _chol_prior: np.ndarray = field(init=False, repr=False)

    variant = "tied"

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self._chol_post = [
            cholesky_with_jitter(S + self.Sigma, f"predictive covariance of class {k}")
            for k, S in enumerate(self.Sigma_post)
        ]
        self._chol_prior = cholesky_with_jitter(self.Sigma0 + self.Sigma, "prior predictive covariance")

    @classmethod
    def from_stats(cls, mu0, Sigma0, Sigma, stats: ClassStats) -> "TiedModel":
        mu0, Sigma0, Sigma = (np.asarray(a, dtype=float) for a in (mu0, Sigma0, Sigma))
        mu_post, Sigma_post = tied_posterior(mu0, Sigma0, Sigma, stats.counts, stats.sums)
        return cls(mu0, Sigma0, Sigma, stats.counts.copy(), mu_post, Sigma_post)

    @property
    def K(self) -> int:
        return len(self.counts)

    def log_posterior_predictive(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.stack(
            [mvn_logpdf(X, self.mu_post[k], L) for k, L in enumerate(self._chol_post)], axis=1
        )

    def log_prior_predictive(self, X) -> np.ndarray:
        return mvn_logpdf(np.atleast_2d(X), self.mu0, self._chol_prior)

    def to_dict(self):
        return {
            "variant": self.variant,
            "hyperparameters": {"mu0": self.mu0, "Sigma0": self.Sigma0, "Sigma": self.Sigma},
            "posterior": {"counts": self.counts, "mu": self.mu_post, "Sigma": self.Sigma_post},
        }

    @classmethod
    def from_dict(cls, d):
        h, p = d["hyperparameters"], d["posterior"]
        return cls(h["mu0"], h["Sigma0"], h["Sigma"], p["counts"], p["mu"], p["Sigma"])


def fit_tied(ds: EmbeddingDataset) -> TiedModel:
    """Empirical-Bayes tied model with ``(mu0, Sigma0, Sigma) = (mu_hat0, Sigma_hat0, Sigma_hat)``."""
    mom = compute_empirical_moments(ds)
    return TiedModel.from_stats(mom.mu0, mom.Sigma0, mom.Sigma, compute_class_stats(ds, outer=False))
