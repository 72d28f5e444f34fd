"""OOD metrics and the covariance-heterogeneity analysis.

``auroc`` treats larger scores as more in-distribution and gives tied pairs
half credit.  ``fm_null_analysis`` compares Förstner–Moonen distances between
per-class covariance estimates with distances between draws from the Wishart
distribution those estimates would follow if every class shared ``Sigma_hat``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy import stats

from .data import EmbeddingDataset, compute_empirical_moments
from .numerics import SingularCovarianceError
from .synthetic import sample_wishart

__all__ = [
    "EvalReport",
    "auroc",
    "auroc_brute_force",
    "accuracy",
    "pearson",
    "forstner_moonen",
    "FMAnalysis",
    "fm_null_analysis",
    "evaluate",
]


def _vec(a, name):
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def auroc(scores_in, scores_out) -> float:
    """Mann–Whitney AUROC from average ranks.

    Equal to the fraction of (inlier, outlier) pairs with the inlier scored
    higher, counting ties as one half, and exact because the rank sum of
    the inliers is a multiple of ``1/2``.
    """
    a = _vec(scores_in, "scores_in")
    b = _vec(scores_out, "scores_out")
    n, m = a.size, b.size
    ranks = stats.rankdata(np.concatenate([a, b]))
    u2 = 2.0 * ranks[:n].sum() - n * (n + 1.0)  # twice the U statistic, an exact integer
    return float(u2 / (2.0 * n * m))


def auroc_brute_force(scores_in, scores_out) -> float:
    """O(n m) pair count; reference implementation."""
    a = _vec(scores_in, "scores_in")[:, None]
    b = _vec(scores_out, "scores_out")[None, :]
    wins2 = 2 * np.count_nonzero(a > b) + np.count_nonzero(a == b)
    return float(wins2 / (2.0 * a.size * b.size))


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    if p.size == 0:
        raise ValueError("no predictions")
    return float(np.mean(p == y))


def pearson(xs, ys) -> float:
    x = _vec(xs, "xs")
    y = _vec(ys, "ys")
    if x.size != y.size:
        raise ValueError("xs and ys differ in length")
    if x.size < 2:
        raise ValueError("need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def forstner_moonen(S1, S2) -> float:
    """``sqrt(sum_i log^2 lambda_i)`` over the generalized eigenvalues of ``(S2, S1)``."""
    S1 = np.asarray(S1, dtype=float)
    S2 = np.asarray(S2, dtype=float)
    try:
        lam = scipy.linalg.eigh(S2, S1, eigvals_only=True)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("FM distance needs positive-definite matrices") from None
    if np.any(lam <= 0):
        raise SingularCovarianceError("FM distance needs positive-definite matrices")
    return float(np.sqrt(np.sum(np.log(lam) ** 2)))


@dataclass(frozen=True)
class FMAnalysis:
    data_distances: np.ndarray
    null_distances: np.ndarray
    dof: int

    def medians(self):
        return float(np.median(self.data_distances)), float(np.median(self.null_distances))


def fm_null_analysis(ds: EmbeddingDataset, n_samples: int = 1000, seed: int = 0) -> FMAnalysis:
    """All-pairs FM distances among ``Sigma_hat_k`` against ``n_samples`` null pairs.

    Null matrices are ``W(n, Sigma_hat / n)`` draws with ``n`` the mean class
    size rounded to an integer no smaller than ``D``; each null distance uses
    two fresh independent draws.
    """
    mom = compute_empirical_moments(ds)
    S = mom.Sigma_k
    K, D = S.shape[0], ds.D
    if K < 2:
        raise ValueError("need at least two classes")
    data = np.array([forstner_moonen(S[i], S[j]) for i in range(K) for j in range(i + 1, K)])
    dof = max(int(np.round(np.mean(mom.counts))), D)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    W = sample_wishart(dof, mom.Sigma / dof, size=2 * n_samples, rng=rng)
    null = np.array([forstner_moonen(W[2 * i], W[2 * i + 1]) for i in range(n_samples)])
    return FMAnalysis(data, null, dof)


@dataclass(frozen=True)
class EvalReport:
    auroc: float
    n_in: int
    n_out: int
    accuracy: Optional[float] = None
    pearson_r: Optional[float] = None


def evaluate(scores_in, scores_out, predictions=None, labels=None) -> EvalReport:
    acc = None if predictions is None or labels is None else accuracy(predictions, labels)
    return EvalReport(auroc(scores_in, scores_out), len(np.ravel(scores_in)), len(np.ravel(scores_out)), acc)
