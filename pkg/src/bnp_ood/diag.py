"""Hierarchical diagonal-covariance Gaussian DPMM (normal-inverse-chi-squared prior).

Each dimension ``d`` of each cluster has its own variance and mean::

    sigma2_kd ~ Scaled-Inv-chi2(nu0_d, sigma0_d^2)
    mu_kd     ~ N(mu0_d, sigma2_kd / kappa0_d)

All quantities here broadcast over a trailing dimension axis, with classes on
the leading axis; the coupled model reuses them with a grid axis in between.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .data import ClassStats, EmbeddingDataset, EmptyClassError, compute_class_stats, compute_empirical_moments
from .numerics import LOG_2PI, ConvergenceWarning, NumericalError, ScalarObjective, generalized_newton_maximize, student_t_logpdf

__all__ = [
    "NIXHyper",
    "NIXPosterior",
    "DiagonalModel",
    "nix_posterior",
    "nix_expected_stats",
    "nix_log_normalizer",
    "log_marginal_likelihood_diag",
    "diag_log_predictive",
    "em_fit_diag",
    "nu_objective_diag",
]

NU_LOWER = 2.0 + 1e-3
NU_MAX = 1e8


@dataclass(frozen=True)
class NIXHyper:
    nu0: np.ndarray
    kappa0: np.ndarray
    mu0: np.ndarray
    sigma0_sq: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.mu0).shape[0]
        for name in ("nu0", "kappa0", "mu0", "sigma0_sq"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (D,)).copy()
            object.__setattr__(self, name, v)
        if np.any(self.nu0 <= 0) or np.any(self.kappa0 <= 0) or np.any(self.sigma0_sq <= 0):
            raise ValueError("nu0, kappa0 and sigma0_sq must be positive")

    @property
    def D(self) -> int:
        return self.mu0.shape[0]


@dataclass(frozen=True)
class NIXPosterior:
    nu: np.ndarray
    kappa: np.ndarray
    mu: np.ndarray
    sigma_sq: np.ndarray


def nix_posterior(nu0, kappa0, mu0, sigma0_sq, counts, sums, diag_sq) -> NIXPosterior:
    """Conjugate NIX update, broadcasting over any leading axes.

    ``sigma'^2 = (nu0 sigma0^2 + kappa0 mu0^2 + sum x^2 - kappa' mu'^2) / nu'``,
    evaluated as ``nu0 sigma0^2 + SS + kappa0 N / kappa' (xbar - mu0)^2`` to
    avoid cancellation.
    """
    counts = np.asarray(counts, dtype=float)
    nu = nu0 + counts
    kappa = kappa0 + counts
    mu = (kappa0 * mu0 + sums) / kappa
    with np.errstate(invalid="ignore", divide="ignore"):
        xbar = np.where(counts > 0, sums / np.where(counts > 0, counts, 1.0), 0.0)
    ss = np.clip(diag_sq - counts * xbar**2, 0.0, None)
    scatter = nu0 * sigma0_sq + ss + kappa0 * counts / kappa * (xbar - mu0) ** 2
    sigma_sq = scatter / nu
    if np.any(~(sigma_sq > 0)):
        raise NumericalError("posterior variance is not positive")
    return NIXPosterior(*np.broadcast_arrays(nu, kappa, mu, sigma_sq))


def _posterior_from_stats(hyper: NIXHyper, stats: ClassStats) -> NIXPosterior:
    c = stats.counts[:, None]
    return nix_posterior(hyper.nu0, hyper.kappa0, hyper.mu0, hyper.sigma0_sq, c, stats.sums, stats.diag_sq)


def nix_expected_stats(post: NIXPosterior, mu0):
    """``(E[1/sigma^2], E[log sigma^2], E[(mu - mu0)^2 / sigma^2])``, elementwise."""
    E_prec = 1.0 / post.sigma_sq
    E_log = np.log(post.nu * post.sigma_sq / 2.0) - special.digamma(post.nu / 2.0)
    E_quad = 1.0 / post.kappa + (post.mu - mu0) ** 2 / post.sigma_sq
    return E_prec, E_log, E_quad


def nix_log_normalizer(nu, sigma_sq, kappa):
    """``-1/2 log kappa + log Gamma(nu/2) - nu/2 log(nu sigma^2 / 2)`` (the ``sqrt(2 pi)`` cancels)."""
    return -0.5 * np.log(kappa) + special.gammaln(nu / 2.0) - 0.5 * nu * np.log(nu * sigma_sq / 2.0)


def log_marginal_likelihood_diag(hyper: NIXHyper, stats: ClassStats, post: Optional[NIXPosterior] = None) -> float:
    if post is None:
        post = _posterior_from_stats(hyper, stats)
    lz = nix_log_normalizer(post.nu, post.sigma_sq, post.kappa)
    lz0 = nix_log_normalizer(hyper.nu0, hyper.sigma0_sq, hyper.kappa0)
    return float((lz - lz0).sum() - 0.5 * stats.N * hyper.D * LOG_2PI)


def diag_log_predictive(nu, kappa, mu, sigma_sq, X) -> np.ndarray:
    """``sum_d log St(x_d | nu_d, mu_d, (kappa_d + 1)/kappa_d sigma_d^2)`` for rows of ``X``."""
    scale = (kappa + 1.0) / kappa * sigma_sq
    return student_t_logpdf(np.atleast_2d(X), nu, mu, scale).sum(axis=-1)


@dataclass
class DiagonalModel:
    hyper: NIXHyper
    posterior: NIXPosterior
    counts: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = True

    variant = "diag"

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @classmethod
    def from_hyper(cls, hyper: NIXHyper, stats: ClassStats, **kw) -> "DiagonalModel":
        return cls(hyper, _posterior_from_stats(hyper, stats), stats.counts.copy(), **kw)

    @property
    def K(self) -> int:
        return len(self.counts)

    def log_posterior_predictive(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        p = self.posterior
        return np.stack(
            [diag_log_predictive(p.nu[k], p.kappa[k], p.mu[k], p.sigma_sq[k], X) for k in range(self.K)], axis=1
        )

    def log_prior_predictive(self, X) -> np.ndarray:
        h = self.hyper
        return diag_log_predictive(h.nu0, h.kappa0, h.mu0, h.sigma0_sq, X)

    def to_dict(self):
        h, p = self.hyper, self.posterior
        return {
            "variant": self.variant,
            "hyperparameters": {"nu0": h.nu0, "kappa0": h.kappa0, "mu0": h.mu0, "sigma0_sq": h.sigma0_sq},
            "posterior": {"counts": self.counts, "nu": p.nu, "kappa": p.kappa, "mu": p.mu, "sigma_sq": p.sigma_sq},
            "fit": {"log_marginal_likelihood": list(self.trace), "converged": self.converged},
        }

    @classmethod
    def from_dict(cls, d):
        h, p = d["hyperparameters"], d["posterior"]
        hyper = NIXHyper(h["nu0"], h["kappa0"], np.asarray(h["mu0"]), h["sigma0_sq"])
        post = NIXPosterior(*(np.asarray(p[k]) for k in ("nu", "kappa", "mu", "sigma_sq")))
        fit = d.get("fit", {})
        return cls(hyper, post, p["counts"], list(fit.get("log_marginal_likelihood", [])), bool(fit.get("converged", True)))


def nu_objective_diag(S: float, K: int) -> ScalarObjective:
    """``K [nu/2 log(nu/2) - log Gamma(nu/2)] + nu/2 S`` and its derivatives."""
    return ScalarObjective(
        lambda nu: K * (0.5 * nu * np.log(nu / 2.0) - special.gammaln(nu / 2.0)) + 0.5 * nu * S,
        lambda nu: 0.5 * K * (np.log(nu / 2.0) + 1.0 - special.digamma(nu / 2.0)) + 0.5 * S,
        lambda nu: K * (0.5 / nu - 0.25 * special.polygamma(1, nu / 2.0)),
        lower_bound=NU_LOWER,
    )


def m_step_nu(S, K, nu_start):
    # the gradient scales with K; a tight relative tolerance keeps each dimension's
    # answer independent of round-off in the others
    tol = 1e-13 * K
    out = np.empty_like(nu_start)
    for d in range(len(nu_start)):
        obj = nu_objective_diag(float(S[d]), K)
        out[d] = generalized_newton_maximize(obj, float(nu_start[d]), tol=tol, upper_bound=NU_MAX).x
    return out


def initial_nu0(counts) -> float:
    return max(float(np.mean(counts)), NU_LOWER + 0.5)


def em_fit_diag(
    ds: EmbeddingDataset,
    nu0=None,
    kappa0=1e-3,
    max_iters: int = 200,
    tol: float = 1e-6,
) -> DiagonalModel:
    """Per-dimension empirical-Bayes EM for ``nu0_d`` and ``kappa0_d``.

    ``mu0_d`` and ``sigma0_d^2`` are the global mean and the diagonal of the
    average within-class covariance.
    """
    counts = ds.counts()
    if np.any(counts == 0):
        raise EmptyClassError("every class needs at least one sample")
    mom = compute_empirical_moments(ds)
    stats = compute_class_stats(ds, outer=False)
    K = ds.K
    nu_init = initial_nu0(counts) if nu0 is None else nu0
    hyper = NIXHyper(nu_init, kappa0, mom.mu0, np.diag(mom.Sigma).copy())
    post = _posterior_from_stats(hyper, stats)
    ll = log_marginal_likelihood_diag(hyper, stats, post)
    trace = [ll]
    converged = max_iters == 0
    for _ in range(max_iters):
        E_prec, E_log, E_quad = nix_expected_stats(post, hyper.mu0)
        new_kappa = K / E_quad.sum(axis=0)
        S = (np.log(hyper.sigma0_sq) - E_log - hyper.sigma0_sq * E_prec).sum(axis=0)
        new_nu = m_step_nu(S, K, hyper.nu0)
        hyper = NIXHyper(new_nu, new_kappa, hyper.mu0, hyper.sigma0_sq)
        post = _posterior_from_stats(hyper, stats)
        ll_new = log_marginal_likelihood_diag(hyper, stats, post)
        trace.append(ll_new)
        if abs(ll_new - ll) <= tol * max(abs(ll), 1.0):
            converged = True
            break
        ll = ll_new
    if not converged:
        warnings.warn(f"diagonal EM did not converge in {max_iters} iterations", ConvergenceWarning)
    return DiagonalModel(hyper, post, counts, trace, converged)
