"""Mahalanobis-family OOD baselines built from empirical moments.

With ``MD_0(x)`` the squared Mahalanobis distance to the global mean under
``Sigma_hat0`` and ``MD_k(x)`` the distance to class ``k`` under the shared
``Sigma_hat``:

* MDS:   ``max_k -MD_k(x)``
* RMDS:  ``max_k MD_0(x) - MD_k(x)``
* Independent RMDS: ``max_k 2 log N(x | mu_k, Sigma_k) - 2 log N(x | mu0, Sigma0)``,
  using a separate covariance per class.

Higher scores mean more in-distribution, like the DPMM score.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import EmbeddingDataset, EmptyClassError, compute_empirical_moments
from .numerics import _mahalanobis_sq, chol_logdet, cholesky_with_jitter
from .scoring import ScoreTable

__all__ = [
    "MahalanobisModel",
    "fit_mahalanobis",
    "mds_score",
    "rmds_score",
    "independent_rmds_score",
    "BASELINE_VARIANTS",
]

BASELINE_VARIANTS = ("mds", "rmds", "irmds")
CLASS_JITTER = 1e-6


@dataclass
class MahalanobisModel:
    mu0: np.ndarray
    Sigma0: np.ndarray
    mu_k: np.ndarray
    Sigma: np.ndarray
    counts: np.ndarray
    Sigma_k: Optional[np.ndarray] = None
    variant: str = "rmds"
    include_logdet: bool = True
    _L0: np.ndarray = field(init=False, repr=False)
    _L: np.ndarray = field(init=False, repr=False)
    _Lk: Optional[list] = field(init=False, repr=False)

    def __post_init__(self):
        if self.variant not in BASELINE_VARIANTS:
            raise ValueError(f"unknown baseline variant {self.variant!r}")
        self.mu0 = np.asarray(self.mu0, dtype=float)
        self.Sigma0 = np.asarray(self.Sigma0, dtype=float)
        self.mu_k = np.atleast_2d(np.asarray(self.mu_k, dtype=float))
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self._L0 = cholesky_with_jitter(self.Sigma0, "Sigma0")
        self._L = cholesky_with_jitter(self.Sigma, "Sigma")
        self._Lk = None
        if self.Sigma_k is not None:
            self.Sigma_k = np.asarray(self.Sigma_k, dtype=float)
            self._Lk = [cholesky_with_jitter(S, f"covariance of class {k}") for k, S in enumerate(self.Sigma_k)]
        elif self.variant == "irmds":
            raise ValueError("independent RMDS needs per-class covariances")

    @property
    def K(self) -> int:
        return self.mu_k.shape[0]

    def background_distance(self, X) -> np.ndarray:
        """``MD_0(x)`` for rows of ``X``."""
        return _mahalanobis_sq(X, self.mu0, self._L0)

    def class_distances(self, X) -> np.ndarray:
        """``MD_k(x)`` under the shared covariance, shape ``(n, K)``."""
        X = np.atleast_2d(X)
        return np.stack([_mahalanobis_sq(X, m, self._L) for m in self.mu_k], axis=1)

    def class_log_ratios(self, X) -> np.ndarray:
        """Per-class quantity maximized by the active variant, shape ``(n, K)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.variant == "mds":
            return -self.class_distances(X)
        md0 = self.background_distance(X)
        if self.variant == "rmds":
            return md0[:, None] - self.class_distances(X)
        cols = []
        ld0 = chol_logdet(self._L0)
        for m, L in zip(self.mu_k, self._Lk):
            r = md0 - _mahalanobis_sq(X, m, L)
            if self.include_logdet:
                r = r - (chol_logdet(L) - ld0)
            cols.append(r)
        return np.stack(cols, axis=1)

    def score(self, X) -> np.ndarray:
        return self.class_log_ratios(X).max(axis=1)

    def score_table(self, X, alpha=None, weighted=True) -> ScoreTable:
        """Scores and nearest classes; ``alpha`` and ``weighted`` have no meaning here and are ignored."""
        r = self.class_log_ratios(X)
        return ScoreTable(r.max(axis=1), None, np.argmax(r, axis=1))

    def to_dict(self):
        out = {
            "variant": self.variant,
            "moments": {"mu0": self.mu0, "Sigma0": self.Sigma0, "mu_k": self.mu_k, "Sigma": self.Sigma, "counts": self.counts},
        }
        if self.Sigma_k is not None:
            out["moments"]["Sigma_k"] = self.Sigma_k
        if self.variant == "irmds":
            out["include_logdet"] = self.include_logdet
        return out

    @classmethod
    def from_dict(cls, d):
        m = d["moments"]
        return cls(
            m["mu0"], m["Sigma0"], m["mu_k"], m["Sigma"], m["counts"], m.get("Sigma_k"),
            d["variant"], bool(d.get("include_logdet", True)),
        )


def _regularized_class_covs(mom, D):
    out = mom.Sigma_k.copy()
    for k, n in enumerate(mom.counts):
        if n <= D:
            out[k] += CLASS_JITTER * max(np.trace(out[k]) / D, np.finfo(float).tiny) * np.eye(D)
    return out


def fit_mahalanobis(ds: EmbeddingDataset, variant: str = "rmds", include_logdet: bool = True) -> MahalanobisModel:
    """Plug-in moments for the requested baseline.

    Class covariances with ``N_k <= D`` get a ``1e-6 * trace / D`` ridge.
    """
    if np.any(ds.counts() == 0):
        raise EmptyClassError("every class needs at least one sample")
    mom = compute_empirical_moments(ds)
    Sk = _regularized_class_covs(mom, ds.D) if variant == "irmds" else None
    return MahalanobisModel(mom.mu0, mom.Sigma0, mom.mu_k, mom.Sigma, mom.counts, Sk, variant, include_logdet)


def mds_score(model: MahalanobisModel, X) -> np.ndarray:
    return -model.class_distances(X).min(axis=1)


def rmds_score(model: MahalanobisModel, X) -> np.ndarray:
    return (model.background_distance(X)[:, None] - model.class_distances(X)).max(axis=1)


def independent_rmds_score(model: MahalanobisModel, X, include_logdet: Optional[bool] = None) -> np.ndarray:
    if model._Lk is None:
        raise ValueError("model has no per-class covariances")
    flag = model.include_logdet if include_logdet is None else include_logdet
    view = MahalanobisModel(model.mu0, model.Sigma0, model.mu_k, model.Sigma, model.counts, model.Sigma_k, "irmds", flag)
    return view.score(X)
