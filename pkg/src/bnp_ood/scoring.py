"""DPMM scores, inlier probabilities and classification for any predictive model.

A model only has to expose ``counts`` and two vectorized log-densities::

    model.log_posterior_predictive(X) -> (n, K)   # log p(x | D_k)
    model.log_prior_predictive(X)     -> (n,)     # log p(x)

The DPMM score is ``C(x) = logsumexp_k(lambda_k + log(N_k / N_bar))`` with
``lambda_k = log p(x | D_k) - log p(x)``; the inlier probability under
concentration ``alpha`` is ``sigmoid(C(x) - log(alpha / N_bar))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
from scipy import special

__all__ = [
    "PredictiveModel",
    "ScoreTable",
    "log_density_ratio",
    "log_density_ratios",
    "dpmm_score",
    "inlier_probability",
    "classify",
    "score_table",
]


class PredictiveModel(Protocol):
    counts: np.ndarray

    def log_posterior_predictive(self, X) -> np.ndarray: ...

    def log_prior_predictive(self, X) -> np.ndarray: ...


@dataclass
class ScoreTable:
    score: np.ndarray
    inlier_probability: Optional[np.ndarray] = None
    predicted_class: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.score)


def _as_rows(X):
    X = np.asarray(X, dtype=float)
    return np.atleast_2d(X), X.ndim == 1


def log_density_ratios(model, X) -> np.ndarray:
    """``lambda[n, k] = log p(x_n | D_k) - log p(x_n)``."""
    X, squeeze = _as_rows(X)
    lam = model.log_posterior_predictive(X) - model.log_prior_predictive(X)[:, None]
    return lam[0] if squeeze else lam


def log_density_ratio(model, x, k: int) -> float:
    """``lambda_k(x)`` for a single point and class."""
    if not 0 <= k < len(model.counts):
        raise IndexError(f"class {k} out of range")
    return float(log_density_ratios(model, np.atleast_2d(x))[0, k])


def _log_weights(counts):
    counts = np.asarray(counts, dtype=float)
    if np.any(counts <= 0):
        raise ValueError("every class needs a positive count")
    return np.log(counts) - np.log(counts.mean())


def dpmm_score(model, X) -> np.ndarray:
    X, squeeze = _as_rows(X)
    lam = log_density_ratios(model, X)
    s = special.logsumexp(lam + _log_weights(model.counts), axis=1)
    return s[0] if squeeze else s


def inlier_probability(model, X, alpha: float = 1.0) -> np.ndarray:
    """``p(y in [K] | x) = sigmoid(C(x) - log(alpha / N_bar))``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    n_bar = float(np.mean(model.counts))
    return special.expit(dpmm_score(model, X) - np.log(alpha / n_bar))


def classify(model, X, weighted: bool = True) -> np.ndarray:
    """``argmax_k log N_k + log p(x | D_k)``; ties go to the smallest index.

    ``weighted=False`` drops the class-size factor.
    """
    X, squeeze = _as_rows(X)
    lp = model.log_posterior_predictive(X)
    if weighted:
        lp = lp + np.log(np.asarray(model.counts, dtype=float))
    out = np.argmax(lp, axis=1)
    return out[0] if squeeze else out


def score_table(model, X, alpha: Optional[float] = None, weighted: bool = True) -> ScoreTable:
    """Scores plus predicted classes; inlier probabilities only when ``alpha`` is given.

    Objects with their own ``score_table`` (baselines, preprocessing
    pipelines) are dispatched to it.
    """
    own = getattr(model, "score_table", None)
    if own is not None:
        return own(X, alpha=alpha, weighted=weighted)
    X, _ = _as_rows(X)
    lp = model.log_posterior_predictive(X)
    lp0 = model.log_prior_predictive(X)
    lw = _log_weights(model.counts)
    score = special.logsumexp(lp - lp0[:, None] + lw, axis=1)
    prob = None
    if alpha is not None:
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        prob = special.expit(score - np.log(alpha / float(np.mean(model.counts))))
    bias = np.log(np.asarray(model.counts, dtype=float)) if weighted else 0.0
    pred = np.argmax(lp + bias, axis=1)
    return ScoreTable(score, prob, pred)
