import math
import warnings

import numpy as np
import pytest
from scipy import integrate, special, stats

from bnp_ood.data import EmbeddingDataset, compute_class_stats
from bnp_ood.diag import (
    DiagonalModel,
    NIXHyper,
    NIXPosterior,
    diag_log_predictive,
    em_fit_diag,
    log_marginal_likelihood_diag,
    nix_expected_stats,
    nix_posterior,
)
from bnp_ood.evaluation import pearson
from bnp_ood.numerics import ConvergenceWarning
from bnp_ood.scoring import dpmm_score
from bnp_ood.tied import TiedModel

from conftest import make_dataset


def test_posterior_hand_example():
    p = nix_posterior(4.0, 1.0, 0.0, 1.0, 1, 2.0, 4.0)
    assert (float(p.nu), float(p.kappa)) == (5.0, 2.0)
    assert float(p.mu) == pytest.approx(1.0, abs=1e-15)
    assert float(p.sigma_sq) == pytest.approx(6 / 5, rel=1e-15)
    E_prec, E_log, E_quad = nix_expected_stats(p, 0.0)
    assert float(E_prec) == pytest.approx(5 / 6, rel=1e-15)
    assert float(E_log) == pytest.approx(math.log(5 * 1.2 / 2) - special.digamma(2.5), rel=1e-14)
    assert float(E_quad) == pytest.approx(0.5 + 5 / 6, rel=1e-14)


def test_empty_class_and_small_kappa_limits():
    p = nix_posterior(np.array([3.0, 7.0]), 0.5, np.array([1.0, -2.0]), np.array([2.0, 0.3]), 0, np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(p.nu, [3.0, 7.0])
    np.testing.assert_array_equal(p.kappa, [0.5, 0.5])
    np.testing.assert_allclose(p.mu, [1.0, -2.0], rtol=1e-15)
    np.testing.assert_allclose(p.sigma_sq, [2.0, 0.3], rtol=1e-15)
    x = np.array([0.4, 1.3, -0.2])
    p = nix_posterior(3.0, 1e-12, 5.0, 1.0, 3, x.sum(), (x**2).sum())
    assert float(p.mu) == pytest.approx(x.mean(), rel=1e-10)
    E_quad = nix_expected_stats(NIXPosterior(*(np.array([v]) for v in (5.0, 4.0, 1.0, 2.0))), np.array([1.0]))[2]
    assert E_quad[0] == 0.25


def test_expected_log_variance_against_draws():
    nu, s2 = 6.0, 1.7
    p = NIXPosterior(np.array([nu]), np.array([2.0]), np.zeros(1), np.array([s2]))
    draws = nu * s2 / np.random.default_rng(0).chisquare(nu, size=10**6)
    mc = np.log(draws).mean()
    assert abs(nix_expected_stats(p, 0.0)[1][0] - mc) < 0.01 * abs(mc)
    assert abs(nix_expected_stats(p, 0.0)[0][0] - np.mean(1 / draws)) < 0.01 / s2


def test_marginal_likelihood_single_point_quadrature():
    nu0, kappa0, s0, x = 4.0, 0.5, 0.8, 0.7
    h = NIXHyper(nu0, kappa0, np.zeros(1), s0)
    a, b = nu0 / 2, nu0 * s0 / 2
    log_norm = a * math.log(b) - math.lgamma(a)

    def integrand(mu, t):
        s2 = math.exp(t)
        log_lik = -0.5 * math.log(2 * math.pi * s2) - (x - mu) ** 2 / (2 * s2)
        log_mu = -0.5 * math.log(2 * math.pi * s2 / kappa0) - kappa0 * mu * mu / (2 * s2)
        return math.exp(log_lik + log_mu + log_norm - a * t - b / s2)

    c = x / (1 + kappa0)
    half = lambda t: 40.0 * math.exp(0.5 * t)
    val, _ = integrate.dblquad(integrand, -15.0, 12.0, lambda t: c - half(t), lambda t: c + half(t), epsabs=1e-14, epsrel=1e-11)
    ds = EmbeddingDataset.from_arrays([[x]], [0])
    assert log_marginal_likelihood_diag(h, compute_class_stats(ds, outer=False)) == pytest.approx(math.log(val), abs=1e-6)


def test_marginal_likelihood_empty_and_separable():
    h = NIXHyper(np.array([3.0, 8.0]), np.array([0.2, 1.5]), np.array([0.0, 1.0]), np.array([1.0, 0.4]))
    empty = EmbeddingDataset.from_arrays(np.empty((0, 2)), np.empty(0, dtype=int), 2)
    assert log_marginal_likelihood_diag(h, compute_class_stats(empty, outer=False)) == 0.0
    ds = make_dataset(1, K=3, D=2, n=6)
    both = log_marginal_likelihood_diag(h, compute_class_stats(ds, outer=False))
    parts = 0.0
    for d in range(2):
        hd = NIXHyper(h.nu0[d], h.kappa0[d], h.mu0[d : d + 1], h.sigma0_sq[d])
        parts += log_marginal_likelihood_diag(hd, compute_class_stats(ds.transform(lambda X, d=d: X[:, d : d + 1]), outer=False))
    assert both == pytest.approx(parts, rel=1e-13)


def test_zero_iterations_returns_initialization():
    m = em_fit_diag(make_dataset(0, K=3, D=2, n=12), max_iters=0)
    np.testing.assert_array_equal(m.hyper.nu0, [12.0, 12.0])
    np.testing.assert_array_equal(m.hyper.kappa0, [1e-3, 1e-3])


def _one_dim_prior_data(seed, K=4, n=30, nu=6.0):
    rng = np.random.default_rng(seed)
    s2 = nu / rng.chisquare(nu, size=K)
    mu = rng.normal(scale=np.sqrt(s2 / 0.1))
    X = mu[:, None] + np.sqrt(s2)[:, None] * rng.normal(size=(K, n))
    return EmbeddingDataset.from_arrays(X.reshape(-1, 1), np.repeat(np.arange(K), n))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fitted_nu_near_grid_argmax(seed):
    ds = _one_dim_prior_data(seed)
    m = em_fit_diag(ds)
    h = m.hyper
    st = compute_class_stats(ds, outer=False)
    grid = np.geomspace(2.01, 1e4, 4000)
    ll = [log_marginal_likelihood_diag(NIXHyper(g, h.kappa0, h.mu0, h.sigma0_sq), st) for g in grid]
    best = grid[int(np.argmax(ll))]
    assert abs(h.nu0[0] - best) <= 0.1 * best


def _paired_dims(seed, K=20, n=30, nus=(3.0, 1e5)):
    rng = np.random.default_rng(seed)
    nus = np.asarray(nus)
    s2 = nus / rng.chisquare(nus, size=(K, 2))
    X = rng.normal(scale=3, size=(K, 1, 2)) + np.sqrt(s2)[:, None, :] * rng.normal(size=(K, n, 2))
    return EmbeddingDataset.from_arrays(X.reshape(-1, 2), np.repeat(np.arange(K), n))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fitted_nu_orders_dimensions(seed):
    nu = em_fit_diag(_paired_dims(seed)).hyper.nu0
    assert nu[0] < nu[1]


def test_fit_separates_over_dimensions():
    # interior optimum in both dimensions; at the nu lower bound round-off in the moments is amplified
    ds = _paired_dims(4, nus=(6.0, 40.0))
    # negative tol never triggers, so both fits run exactly the same number of iterations
    kw = dict(max_iters=25, tol=-1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        joint = em_fit_diag(ds, **kw).hyper
        for d in range(ds.D):
            single = em_fit_diag(ds.transform(lambda X, d=d: X[:, d : d + 1]), **kw).hyper
            np.testing.assert_allclose(single.nu0[0], joint.nu0[d], rtol=1e-10)
            np.testing.assert_allclose(single.kappa0[0], joint.kappa0[d], rtol=1e-10)


def test_em_trace_monotone_over_random_datasets():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        ds = make_dataset(seed, K=int(rng.integers(2, 5)), D=int(rng.integers(1, 5)), n=int(rng.integers(2, 15)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            m = em_fit_diag(ds, max_iters=60)
        assert np.all(np.diff(m.trace) >= -1e-6), seed
        assert np.all(m.hyper.nu0 > 2)


def test_predictive_normalized_symmetric_and_gaussian_limit():
    args = (np.array([3.5]), np.array([1.2]), np.array([-0.4]), np.array([0.9]))
    grid = np.linspace(-400, 400, 800001)
    mass = integrate.trapezoid(np.exp(diag_log_predictive(*args, grid[:, None])), grid)
    assert abs(mass - 1) < 1e-4
    pair = diag_log_predictive(*args, [[-0.4 + 2.2], [-0.4 - 2.2]])
    assert pair[0] == pytest.approx(pair[1], rel=1e-14)
    kappa, s2 = 2.0, 0.7
    X = np.linspace(-3, 3, 13)[:, None]
    t = diag_log_predictive(np.array([1e6]), np.array([kappa]), np.zeros(1), np.array([s2]), X)
    g = stats.norm(0, np.sqrt((kappa + 1) / kappa * s2)).logpdf(X[:, 0])
    assert np.max(np.abs(t - g)) < 1e-3


def test_scores_match_tied_limit_on_diagonal_data():
    rng = np.random.default_rng(0)
    K, n = 20, 30
    mus = rng.normal(scale=3, size=(K, 2))
    X = mus[:, None, :] + rng.normal(size=(K, n, 2))
    ds = EmbeddingDataset.from_arrays(X.reshape(-1, 2), np.repeat(np.arange(K), n))
    m = em_fit_diag(ds)
    h = m.hyper
    assert np.all(h.nu0 > 50)
    tied = TiedModel.from_stats(h.mu0, np.diag(h.sigma0_sq / h.kappa0), np.diag(h.sigma0_sq), compute_class_stats(ds))
    Z = np.vstack([mus[rng.integers(0, K, 250)] + rng.normal(size=(250, 2)), rng.normal(scale=4.0, size=(250, 2))])
    assert pearson(dpmm_score(m, Z), dpmm_score(tied, Z)) >= 0.99


def test_dict_round_trip():
    m = em_fit_diag(make_dataset(2, K=3, D=3, n=10))
    m2 = DiagonalModel.from_dict(m.to_dict())
    X = np.random.default_rng(3).normal(size=(5, 3))
    assert np.array_equal(m.log_posterior_predictive(X), m2.log_posterior_predictive(X))
    assert np.array_equal(m.log_prior_predictive(X), m2.log_prior_predictive(X))
