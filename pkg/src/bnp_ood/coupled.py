"""Coupled diagonal-covariance DPMM.

Every cluster carries one scale factor ``gamma_k`` shared by all its
dimensions::

    gamma_k   ~ Ga(alpha0, alpha0)                      # E[gamma_k] = 1
    sigma2_kd ~ Scaled-Inv-chi2(nu0_d, gamma_k sigma0_d^2)
    mu_kd     ~ N(mu0_d, sigma2_kd / kappa0_d)

``gamma_k`` is integrated out on a fixed grid of ``P`` nodes.  Conditioned on
a node the model is the diagonal model with a rescaled prior, so the
posterior over the grid follows from ratios of NIX normalizers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats as sps

from .data import ClassStats, EmbeddingDataset, EmptyClassError, compute_class_stats, compute_empirical_moments
from .diag import NIXHyper, initial_nu0, m_step_nu, nix_log_normalizer
from .numerics import (
    LOG_2PI,
    ConvergenceWarning,
    NumericalError,
    ScalarObjective,
    generalized_newton_maximize,
    student_t_logpdf,
)

__all__ = [
    "GammaGrid",
    "CoupledPosterior",
    "CoupledExpectedStats",
    "CoupledModel",
    "build_gamma_grid",
    "coupled_e_step",
    "coupled_expected_stats",
    "log_marginal_likelihood_coupled",
    "em_fit_coupled",
]

ALPHA_LOWER = 1e-3
ALPHA_MAX = 1e8
QUANTILE_RANGE = (1e-4, 1.0 - 1e-4)
_CHUNK = 1 << 22


@dataclass(frozen=True)
class GammaGrid:
    """Quadrature nodes for ``gamma`` and the normalized prior log-weights."""

    nodes: np.ndarray
    log_w0: np.ndarray
    alpha0: float

    @property
    def P(self) -> int:
        return self.nodes.shape[0]

    @property
    def w0(self) -> np.ndarray:
        return np.exp(self.log_w0)


def build_gamma_grid(alpha0: float, P: int = 100) -> GammaGrid:
    """Log-spaced nodes spanning the central quantile range of ``Ga(alpha0, alpha0)``.

    Each node's weight is the prior density times its trapezoid cell width,
    renormalized to sum to one.  ``P = 1`` gives the single node ``gamma = 1``.
    """
    if not alpha0 > 0:
        raise ValueError("alpha0 must be positive")
    if P < 1:
        raise ValueError("grid needs at least one node")
    if P == 1:
        return GammaGrid(np.ones(1), np.zeros(1), float(alpha0))
    dist = sps.gamma(a=alpha0, scale=1.0 / alpha0)
    lo, hi = dist.ppf(QUANTILE_RANGE[0]), dist.ppf(QUANTILE_RANGE[1])
    nodes = np.geomspace(lo, hi, P)
    width = np.empty(P)
    width[1:-1] = 0.5 * (nodes[2:] - nodes[:-2])
    width[0] = 0.5 * (nodes[1] - nodes[0])
    width[-1] = 0.5 * (nodes[-1] - nodes[-2])
    logw = dist.logpdf(nodes) + np.log(width)
    return GammaGrid(nodes, logw - special.logsumexp(logw), float(alpha0))


@dataclass(frozen=True)
class CoupledPosterior:
    """Per-class posterior given each grid node.

    ``sigma'^2_{kpd} = (gamma_p nu0_d sigma0_d^2 + resid_kd) / nu'_kd`` where
    ``resid`` holds the data-dependent part of the scatter, so the ``K x P x D``
    array never has to be stored.
    """

    nu: np.ndarray
    kappa: np.ndarray
    mu: np.ndarray
    resid: np.ndarray
    log_w: np.ndarray
    log_lik: np.ndarray

    def sigma_sq(self, k: int, hyper: NIXHyper, grid: GammaGrid) -> np.ndarray:
        """``(P, D)`` posterior variance parameters of class ``k``."""
        prior = grid.nodes[:, None] * (hyper.nu0 * hyper.sigma0_sq)
        return (prior + self.resid[k]) / self.nu[k]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_w)


def coupled_e_step(hyper: NIXHyper, grid: GammaGrid, stats: ClassStats) -> CoupledPosterior:
    """Posterior grid weights ``w'_{kp}`` and conditional NIX parameters."""
    counts = stats.counts[:, None].astype(float)
    nu = hyper.nu0 + counts
    kappa = hyper.kappa0 + counts
    mu = (hyper.kappa0 * hyper.mu0 + stats.sums) / kappa
    safe = np.where(counts > 0, counts, 1.0)
    xbar = np.where(counts > 0, stats.sums / safe, 0.0)
    ss = np.clip(stats.diag_sq - counts * xbar**2, 0.0, None)
    resid = ss + hyper.kappa0 * counts / kappa * (xbar - hyper.mu0) ** 2

    prior_scale = grid.nodes[:, None] * hyper.sigma0_sq  # (P, D)
    lz0 = nix_log_normalizer(hyper.nu0, prior_scale, hyper.kappa0).sum(axis=1)  # (P,)
    K = stats.K
    log_lik = np.empty((K, grid.P))
    for k in range(K):
        s2 = (grid.nodes[:, None] * (hyper.nu0 * hyper.sigma0_sq) + resid[k]) / nu[k]
        if np.any(~(s2 > 0)):
            raise NumericalError(f"posterior variance of class {k} is not positive")
        log_lik[k] = nix_log_normalizer(nu[k], s2, kappa[k]).sum(axis=1) - lz0
    logits = grid.log_w0 + log_lik
    norm = special.logsumexp(logits, axis=1, keepdims=True)
    if np.any(~np.isfinite(norm)):
        raise NumericalError("grid posterior has no finite weight")
    return CoupledPosterior(nu, kappa, mu, resid, logits - norm, log_lik)


def log_marginal_likelihood_coupled(grid: GammaGrid, post: CoupledPosterior, N: int, D: int) -> float:
    """``sum_k logsumexp_p(log w0_p + log-lik_{kp}) - (N D / 2) log 2 pi``."""
    ell = grid.log_w0 + post.log_lik
    return float(special.logsumexp(ell, axis=1).sum() - 0.5 * N * D * LOG_2PI)


@dataclass(frozen=True)
class CoupledExpectedStats:
    E_gamma: np.ndarray
    E_log_gamma: np.ndarray
    E_gamma_prec: np.ndarray
    E_log_var: np.ndarray
    E_quad: np.ndarray


def coupled_expected_stats(hyper: NIXHyper, grid: GammaGrid, post: CoupledPosterior) -> CoupledExpectedStats:
    w = post.weights  # (K, P)
    K = w.shape[0]
    D = hyper.D
    E_gamma = w @ grid.nodes
    E_log_gamma = w @ np.log(grid.nodes)
    E_gamma_prec = np.empty((K, D))
    E_log_var = np.empty((K, D))
    E_quad = np.empty((K, D))
    for k in range(K):
        s2 = post.sigma_sq(k, hyper, grid)  # (P, D)
        wk = w[k]
        E_gamma_prec[k] = wk @ (grid.nodes[:, None] / s2)
        E_log_var[k] = wk @ np.log(post.nu[k] * s2 / 2.0) - special.digamma(post.nu[k] / 2.0)
        E_quad[k] = 1.0 / post.kappa[k] + (post.mu[k] - hyper.mu0) ** 2 * (wk @ (1.0 / s2))
    return CoupledExpectedStats(E_gamma, E_log_gamma, E_gamma_prec, E_log_var, E_quad)


def alpha_objective(T: float, K: int) -> ScalarObjective:
    """``K (a log a - log Gamma(a)) + a T`` with ``T = sum_k E[log gamma_k] - E[gamma_k]``."""
    return ScalarObjective(
        lambda a: K * (a * np.log(a) - special.gammaln(a)) + a * T,
        lambda a: K * np.log(a) + K - K * special.digamma(a) + T,
        lambda a: K / a - K * special.polygamma(1, a),
        lower_bound=ALPHA_LOWER,
    )


@dataclass
class CoupledModel:
    hyper: NIXHyper
    grid: GammaGrid
    posterior: CoupledPosterior
    counts: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = True
    predictive_scale: str = "printed"

    variant = "coupled"

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.predictive_scale not in ("printed", "conditional"):
            raise ValueError("predictive_scale must be 'printed' or 'conditional'")

    @classmethod
    def from_hyper(cls, hyper: NIXHyper, grid: GammaGrid, stats: ClassStats, **kw) -> "CoupledModel":
        return cls(hyper, grid, coupled_e_step(hyper, grid, stats), stats.counts.copy(), **kw)

    @property
    def alpha0(self) -> float:
        return self.grid.alpha0

    @property
    def K(self) -> int:
        return len(self.counts)

    def _mixture_logpdf(self, X, log_w, nu, mu, scale):
        # scale: (P, D); returns logsumexp_p [log_w_p + sum_d log St(x_d | nu_d, mu_d, scale_pd)]
        n = X.shape[0]
        out = np.empty(n)
        step = max(1, _CHUNK // max(1, scale.size))
        for s in range(0, n, step):
            xb = X[s:s + step, None, :]
            lp = student_t_logpdf(xb, nu, mu, scale[None]).sum(axis=-1)
            out[s:s + step] = special.logsumexp(lp + log_w, axis=1)
        return out

    def log_posterior_predictive(self, X) -> np.ndarray:
        """``logsumexp_p[log w'_kp + sum_d log St(x_d | nu', mu', (kappa'+1)/kappa' c_p sigma'^2_kpd)]``.

        ``c_p = gamma_p`` under ``predictive_scale="printed"``; ``c_p = 1`` under
        ``"conditional"``, which is the exact predictive given ``gamma = gamma_p``.
        """
        X = np.atleast_2d(X)
        p, g = self.posterior, self.grid
        factor = g.nodes[:, None] if self.predictive_scale == "printed" else 1.0
        cols = []
        for k in range(self.K):
            s2 = p.sigma_sq(k, self.hyper, g)
            scale = (p.kappa[k] + 1.0) / p.kappa[k] * factor * s2
            cols.append(self._mixture_logpdf(X, p.log_w[k], p.nu[k], p.mu[k], scale))
        return np.stack(cols, axis=1)

    def log_prior_predictive(self, X) -> np.ndarray:
        h, g = self.hyper, self.grid
        scale = (h.kappa0 + 1.0) / h.kappa0 * g.nodes[:, None] * h.sigma0_sq
        return self._mixture_logpdf(np.atleast_2d(X), g.log_w0, h.nu0, h.mu0, scale)

    def to_dict(self):
        h, g, p = self.hyper, self.grid, self.posterior
        return {
            "variant": self.variant,
            "hyperparameters": {
                "nu0": h.nu0, "kappa0": h.kappa0, "mu0": h.mu0, "sigma0_sq": h.sigma0_sq, "alpha0": g.alpha0,
            },
            "grid": {"nodes": g.nodes, "log_w0": g.log_w0},
            "posterior": {
                "counts": self.counts, "nu": p.nu, "kappa": p.kappa, "mu": p.mu,
                "resid": p.resid, "log_w": p.log_w, "log_lik": p.log_lik,
            },
            "predictive_scale": self.predictive_scale,
            "fit": {"log_marginal_likelihood": list(self.trace), "converged": self.converged},
        }

    @classmethod
    def from_dict(cls, d):
        h, g, p = d["hyperparameters"], d["grid"], d["posterior"]
        hyper = NIXHyper(h["nu0"], h["kappa0"], np.asarray(h["mu0"]), h["sigma0_sq"])
        grid = GammaGrid(np.atleast_1d(g["nodes"]), np.atleast_1d(g["log_w0"]), float(h["alpha0"]))
        K = len(p["counts"])
        post = CoupledPosterior(
            *(np.asarray(p[k]) for k in ("nu", "kappa", "mu", "resid")),
            np.asarray(p["log_w"]).reshape(K, -1),
            np.asarray(p["log_lik"]).reshape(K, -1),
        )
        fit = d.get("fit", {})
        return cls(
            hyper, grid, post, p["counts"], list(fit.get("log_marginal_likelihood", [])),
            bool(fit.get("converged", True)), d.get("predictive_scale", "printed"),
        )


def em_fit_coupled(
    ds: EmbeddingDataset,
    nu0=None,
    kappa0=1e-3,
    alpha0: float = 10.0,
    grid_size: int = 100,
    max_iters: int = 200,
    tol: float = 1e-6,
    fit_alpha0: bool = True,
    predictive_scale: str = "printed",
) -> CoupledModel:
    """EM for ``nu0_d``, ``kappa0_d`` and ``alpha0`` of the coupled model.

    Each iteration updates ``nu0`` and ``kappa0`` on the current grid, then
    proposes the generalized-Newton ``alpha0`` and rebuilds the grid.  A
    proposal that lowers the grid-approximated marginal likelihood is pulled
    back toward the previous ``alpha0`` (and dropped if none helps), which
    keeps the trace monotone despite the grid moving.
    """
    counts = ds.counts()
    if np.any(counts == 0):
        raise EmptyClassError("every class needs at least one sample")
    mom = compute_empirical_moments(ds)
    stats = compute_class_stats(ds, outer=False)
    K, N, D = ds.K, ds.N, ds.D
    nu_init = initial_nu0(counts) if nu0 is None else nu0
    hyper = NIXHyper(nu_init, kappa0, mom.mu0, np.diag(mom.Sigma).copy())
    grid = build_gamma_grid(alpha0, grid_size)
    post = coupled_e_step(hyper, grid, stats)
    ll = log_marginal_likelihood_coupled(grid, post, N, D)
    trace = [ll]
    converged = max_iters == 0
    for _ in range(max_iters):
        es = coupled_expected_stats(hyper, grid, post)
        new_kappa = K / es.E_quad.sum(axis=0)
        S = (es.E_log_gamma[:, None] + np.log(hyper.sigma0_sq) - es.E_log_var - hyper.sigma0_sq * es.E_gamma_prec).sum(axis=0)
        new_nu = m_step_nu(S, K, hyper.nu0)
        hyper = NIXHyper(new_nu, new_kappa, hyper.mu0, hyper.sigma0_sq)
        post = coupled_e_step(hyper, grid, stats)
        ll_new = log_marginal_likelihood_coupled(grid, post, N, D)
        if fit_alpha0 and grid.P > 1:
            T = float((es.E_log_gamma - es.E_gamma).sum())
            res = generalized_newton_maximize(alpha_objective(T, K), grid.alpha0, upper_bound=ALPHA_MAX)
            cand = res.x
            for _ in range(8):
                if cand == grid.alpha0:
                    break
                g2 = build_gamma_grid(cand, grid.P)
                p2 = coupled_e_step(hyper, g2, stats)
                ll2 = log_marginal_likelihood_coupled(g2, p2, N, D)
                if ll2 >= ll_new:
                    grid, post, ll_new = g2, p2, ll2
                    break
                cand = float(np.sqrt(cand * grid.alpha0))
        trace.append(ll_new)
        if abs(ll_new - ll) <= tol * max(abs(ll), 1.0):
            converged = True
            break
        ll = ll_new
    if not converged:
        warnings.warn(f"coupled EM did not converge in {max_iters} iterations", ConvergenceWarning)
    return CoupledModel(hyper, grid, post, counts, trace, converged, predictive_scale)
