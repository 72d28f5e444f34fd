"""Hierarchical full-covariance Gaussian DPMM with a normal-inverse-Wishart prior.

Prior per cluster::

    Sigma_k ~ IW(nu0, (nu0 - D - 1) Sigma0)      # E[Sigma_k] = Sigma0
    mu_k    ~ N(mu0, Sigma_k / kappa0)

``mu0`` and ``Sigma0`` are set by empirical Bayes (global mean and average
within-class covariance); ``kappa0`` and ``nu0`` are fitted by EM on the
marginal likelihood.  Predictive densities are multivariate Student-t.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import ClassStats, EmbeddingDataset, EmptyClassError, compute_class_stats, compute_empirical_moments
from .numerics import (
    LOG_2PI,
    ConvergenceWarning,
    ScalarObjective,
    chol_logdet,
    cholesky_with_jitter,
    generalized_newton_maximize,
    log_multivariate_gamma,
    multivariate_digamma,
    mvt_logpdf,
)

__all__ = [
    "NIWHyper",
    "NIWPosterior",
    "NIWExpectedStats",
    "FullCovarianceModel",
    "niw_posterior_update",
    "niw_posterior",
    "niw_expected_stats",
    "niw_log_normalizer",
    "log_marginal_likelihood_full",
    "full_log_predictive",
    "em_fit_full",
]

NU_MAX = 1e8


@dataclass(frozen=True)
class NIWHyper:
    nu0: float
    kappa0: float
    mu0: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.mu0).shape[0]
        if not self.nu0 > D + 1:
            raise ValueError(f"nu0 must exceed D + 1 = {D + 1}, got {self.nu0}")
        if not self.kappa0 > 0:
            raise ValueError("kappa0 must be positive")

    @property
    def D(self) -> int:
        return self.mu0.shape[0]

    @property
    def Psi0(self) -> np.ndarray:
        """Inverse-Wishart scale ``(nu0 - D - 1) Sigma0``."""
        return (self.nu0 - self.D - 1.0) * self.Sigma0


@dataclass(frozen=True)
class NIWPosterior:
    """Per-class posterior parameters; ``Psi`` is the inverse-Wishart scale matrix."""

    nu: np.ndarray
    kappa: np.ndarray
    mu: np.ndarray
    Psi: np.ndarray


@dataclass(frozen=True)
class NIWExpectedStats:
    E_prec: np.ndarray
    E_logdet: np.ndarray
    E_quad: np.ndarray


def niw_posterior_update(hyper: NIWHyper, count, sum_x, outer):
    """Conjugate update for one class; returns ``(nu, kappa, mu, Psi)``."""
    nu = hyper.nu0 + count
    kappa = hyper.kappa0 + count
    mu = (hyper.kappa0 * hyper.mu0 + sum_x) / kappa
    Psi = hyper.Psi0 + hyper.kappa0 * np.outer(hyper.mu0, hyper.mu0) + outer - kappa * np.outer(mu, mu)
    return nu, kappa, mu, 0.5 * (Psi + Psi.T)


def niw_posterior(hyper: NIWHyper, stats: ClassStats) -> NIWPosterior:
    if stats.outer is None:
        raise ValueError("full-covariance model needs outer-product statistics")
    parts = [niw_posterior_update(hyper, stats.counts[k], stats.sums[k], stats.outer[k]) for k in range(stats.K)]
    nu, kappa, mu, Psi = (np.array(v) for v in zip(*parts))
    return NIWPosterior(nu.astype(float), kappa.astype(float), mu, Psi)


def niw_expected_stats(post: NIWPosterior, mu0) -> NIWExpectedStats:
    """``E[Sigma^-1]``, ``E[log|Sigma|]`` and ``E[(mu-mu0)^T Sigma^-1 (mu-mu0)]`` per class.

    The quadratic form is ``D/kappa' + (mu'-mu0)^T E[Sigma^-1] (mu'-mu0)``.
    """
    K, D = post.mu.shape
    E_prec = np.empty((K, D, D))
    E_logdet = np.empty(K)
    E_quad = np.empty(K)
    for k in range(K):
        L = cholesky_with_jitter(post.Psi[k], f"posterior scale of class {k}")
        Psi_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(D)))
        E_prec[k] = post.nu[k] * 0.5 * (Psi_inv + Psi_inv.T)
        E_logdet[k] = chol_logdet(L) - multivariate_digamma(post.nu[k] / 2.0, D) - D * np.log(2.0)
        diff = post.mu[k] - mu0
        E_quad[k] = D / post.kappa[k] + diff @ E_prec[k] @ diff
    return NIWExpectedStats(E_prec, E_logdet, E_quad)


def niw_log_normalizer(nu, Psi, kappa) -> float:
    """``-D/2 log kappa + log Gamma_D(nu/2) + nu D/2 log 2 - nu/2 log|Psi|`` (the ``(2 pi)^{D/2}`` factor cancels)."""
    D = Psi.shape[0]
    L = cholesky_with_jitter(Psi, "NIW scale")
    return (
        -0.5 * D * np.log(kappa)
        + log_multivariate_gamma(nu / 2.0, D)
        + 0.5 * nu * D * np.log(2.0)
        - 0.5 * nu * chol_logdet(L)
    )


def log_marginal_likelihood_full(hyper: NIWHyper, stats: ClassStats, post: Optional[NIWPosterior] = None) -> float:
    """Exact ``log p(X | y, hyper)`` including the ``-(N D / 2) log 2 pi`` term."""
    if post is None:
        post = niw_posterior(hyper, stats)
    lz0 = niw_log_normalizer(hyper.nu0, hyper.Psi0, hyper.kappa0)
    total = 0.0
    for k in range(stats.K):
        total += niw_log_normalizer(post.nu[k], post.Psi[k], post.kappa[k]) - lz0
    return float(total - 0.5 * stats.N * hyper.D * LOG_2PI)


def _predictive_params(nu, kappa, Psi):
    D = Psi.shape[0]
    df = nu - D + 1.0
    if not df > 0:
        raise ValueError(f"Student-t degrees of freedom must be positive, got {df}")
    scale = (kappa + 1.0) / (kappa * df) * Psi
    return df, cholesky_with_jitter(scale, "predictive scale")


def full_log_predictive(nu, kappa, mu, Psi, X) -> np.ndarray:
    """``log St(x | nu - D + 1, mu, (kappa + 1) / (kappa (nu - D + 1)) Psi)`` for rows of ``X``."""
    df, L = _predictive_params(nu, kappa, Psi)
    return mvt_logpdf(np.atleast_2d(X), df, mu, L)


@dataclass
class FullCovarianceModel:
    hyper: NIWHyper
    posterior: NIWPosterior
    counts: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = True
    _post_params: list = field(init=False, repr=False)
    _prior_params: tuple = field(init=False, repr=False)

    variant = "full"

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        p = self.posterior
        self._post_params = [_predictive_params(p.nu[k], p.kappa[k], p.Psi[k]) for k in range(len(p.nu))]
        h = self.hyper
        self._prior_params = _predictive_params(h.nu0, h.kappa0, h.Psi0)

    @classmethod
    def from_hyper(cls, hyper: NIWHyper, stats: ClassStats, **kw) -> "FullCovarianceModel":
        return cls(hyper, niw_posterior(hyper, stats), stats.counts.copy(), **kw)

    @property
    def K(self) -> int:
        return len(self.counts)

    def log_posterior_predictive(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        mu = self.posterior.mu
        return np.stack([mvt_logpdf(X, df, mu[k], L) for k, (df, L) in enumerate(self._post_params)], axis=1)

    def log_prior_predictive(self, X) -> np.ndarray:
        df, L = self._prior_params
        return mvt_logpdf(np.atleast_2d(X), df, self.hyper.mu0, L)

    def to_dict(self):
        h, p = self.hyper, self.posterior
        return {
            "variant": self.variant,
            "hyperparameters": {"nu0": h.nu0, "kappa0": h.kappa0, "mu0": h.mu0, "Sigma0": h.Sigma0},
            "posterior": {"counts": self.counts, "nu": p.nu, "kappa": p.kappa, "mu": p.mu, "Psi": p.Psi},
            "fit": {"log_marginal_likelihood": list(self.trace), "converged": self.converged},
        }

    @classmethod
    def from_dict(cls, d):
        h, p = d["hyperparameters"], d["posterior"]
        hyper = NIWHyper(float(h["nu0"]), float(h["kappa0"]), np.asarray(h["mu0"]), np.asarray(h["Sigma0"]))
        post = NIWPosterior(np.asarray(p["nu"]), np.asarray(p["kappa"]), np.asarray(p["mu"]), np.asarray(p["Psi"]))
        fit = d.get("fit", {})
        return cls(hyper, post, p["counts"], list(fit.get("log_marginal_likelihood", [])), bool(fit.get("converged", True)))


def _nu_objective(S: float, K: int, D: int) -> ScalarObjective:
    """Expected complete-data log prior of the covariances as a function of ``nu0``.

    ``S = sum_k (log|Sigma0| - E log|Sigma_k| - tr(Sigma0 E[Sigma_k^-1]))``.
    """
    def value(nu):
        return K * (0.5 * nu * D * np.log((nu - D - 1.0) / 2.0) - log_multivariate_gamma(nu / 2.0, D)) + 0.5 * nu * S

    def d1(nu):
        r = nu - D - 1.0
        return K * (0.5 * D * (np.log(r / 2.0) + nu / r) - 0.5 * multivariate_digamma(nu / 2.0, D)) + 0.5 * S

    def d2(nu):
        r = nu - D - 1.0
        return K * (0.5 * D * (1.0 / r - (D + 1.0) / r**2) - 0.25 * multivariate_digamma(nu / 2.0, D, order=2))

    return ScalarObjective(value, d1, d2, lower_bound=D + 1.0)


def initial_nu0(counts, D) -> float:
    return max(float(np.mean(counts)), D + 2.5)


def em_fit_full(
    ds: EmbeddingDataset,
    nu0: Optional[float] = None,
    kappa0: float = 1e-3,
    max_iters: int = 200,
    tol: float = 1e-6,
    fit_nu0: bool = True,
    fit_kappa0: bool = True,
) -> FullCovarianceModel:
    """Empirical-Bayes EM for ``(nu0, kappa0)``.

    ``mu0`` and ``Sigma0`` are fixed to the sample mean and average
    within-class covariance.  Iterations stop when the relative change of
    the marginal log-likelihood drops below ``tol``; ``trace`` on the
    returned model holds the value before the first and after every update.
    """
    counts = ds.counts()
    if np.any(counts == 0):
        raise EmptyClassError("every class needs at least one sample")
    mom = compute_empirical_moments(ds)
    stats = compute_class_stats(ds, outer=True)
    K, D = ds.K, ds.D
    nu = initial_nu0(counts, D) if nu0 is None else float(nu0)
    hyper = NIWHyper(nu, float(kappa0), mom.mu0, mom.Sigma)
    logdet0 = chol_logdet(cholesky_with_jitter(hyper.Sigma0, "Sigma0"))
    post = niw_posterior(hyper, stats)
    ll = log_marginal_likelihood_full(hyper, stats, post)
    trace = [ll]
    converged = max_iters == 0
    for _ in range(max_iters):
        es = niw_expected_stats(post, hyper.mu0)
        new_kappa = K * D / es.E_quad.sum() if fit_kappa0 else hyper.kappa0
        new_nu = hyper.nu0
        if fit_nu0:
            S = float(np.sum(logdet0 - es.E_logdet - np.einsum("ij,kji->k", hyper.Sigma0, es.E_prec)))
            res = generalized_newton_maximize(_nu_objective(S, K, D), hyper.nu0, shift=D + 1.0, upper_bound=NU_MAX)
            new_nu = res.x
        hyper = NIWHyper(new_nu, new_kappa, hyper.mu0, hyper.Sigma0)
        post = niw_posterior(hyper, stats)
        ll_new = log_marginal_likelihood_full(hyper, stats, post)
        trace.append(ll_new)
        if abs(ll_new - ll) <= tol * max(abs(ll), 1.0):
            converged = True
            break
        ll = ll_new
    if not converged:
        warnings.warn(f"full-covariance EM did not converge in {max_iters} iterations", ConvergenceWarning)
    return FullCovarianceModel(hyper, post, counts, trace, converged)
