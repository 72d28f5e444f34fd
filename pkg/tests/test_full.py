import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special, stats

from bnp_ood.data import EmbeddingDataset, compute_class_stats
from bnp_ood.diag import diag_log_predictive
from bnp_ood.full import (
    FullCovarianceModel,
    NIWHyper,
    NIWPosterior,
    em_fit_full,
    full_log_predictive,
    log_marginal_likelihood_full,
    niw_expected_stats,
    niw_posterior,
    niw_posterior_update,
)
from bnp_ood.numerics import ConvergenceWarning
from bnp_ood.scoring import dpmm_score
from bnp_ood.synthetic import SynthConfig, generate
from bnp_ood.tied import TiedModel

from conftest import make_dataset


def _hyper1(nu0=5.0, kappa0=1.0):
    return NIWHyper(nu0, kappa0, np.zeros(1), np.eye(1))


def test_posterior_update_hand_example():
    nu, kappa, mu, Psi = niw_posterior_update(_hyper1(), 1, np.array([2.0]), np.array([[4.0]]))
    assert (nu, kappa) == (6.0, 2.0)
    assert mu[0] == pytest.approx(1.0, abs=1e-15)
    assert Psi[0, 0] == pytest.approx(5.0, rel=1e-15)


def test_empty_class_and_small_kappa_limits():
    h = NIWHyper(6.0, 0.4, np.array([1.0, -1.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
    nu, kappa, mu, Psi = niw_posterior_update(h, 0, np.zeros(2), np.zeros((2, 2)))
    assert (nu, kappa) == (6.0, 0.4)
    np.testing.assert_allclose(mu, h.mu0, rtol=1e-15)
    np.testing.assert_allclose(Psi, h.Psi0, rtol=1e-13, atol=1e-14)
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    tiny = NIWHyper(6.0, 1e-12, h.mu0, h.Sigma0)
    _, _, mu, _ = niw_posterior_update(tiny, 2, x.sum(0), x.T @ x)
    np.testing.assert_allclose(mu, x.mean(0), rtol=1e-10)


def test_hyper_validation():
    with pytest.raises(ValueError, match="D \\+ 1"):
        NIWHyper(3.0, 1.0, np.zeros(2), np.eye(2))
    with pytest.raises(ValueError, match="kappa0"):
        NIWHyper(5.0, 0.0, np.zeros(2), np.eye(2))


def test_expected_stats_hand_example():
    post = NIWPosterior(np.array([6.0]), np.array([2.0]), np.array([[1.0]]), np.array([[[5.0]]]))
    es = niw_expected_stats(post, np.zeros(1))
    assert es.E_prec[0, 0, 0] == pytest.approx(6 / 5, rel=1e-15)
    assert es.E_logdet[0] == pytest.approx(np.log(5) - special.digamma(3) - np.log(2), rel=1e-14)
    assert es.E_quad[0] == pytest.approx(0.5 + 6 / 5, rel=1e-14)
    # quadratic form at mu' = mu0 is D / kappa'
    post2 = NIWPosterior(np.array([7.0]), np.array([4.0]), np.zeros((1, 3)), 2.0 * np.eye(3)[None])
    assert niw_expected_stats(post2, np.zeros(3)).E_quad[0] == pytest.approx(3 / 4, rel=1e-15)


def test_expected_stats_against_inverse_wishart_draws():
    Psi = np.array([[2.0, 0.6], [0.6, 1.0]])
    nu = 7.0
    post = NIWPosterior(np.array([nu]), np.array([3.0]), np.zeros((1, 2)), Psi[None])
    es = niw_expected_stats(post, np.zeros(2))
    draws = stats.invwishart(df=nu, scale=Psi).rvs(size=10**6, random_state=np.random.default_rng(0))
    mc_prec = np.linalg.inv(draws).mean(axis=0)
    np.testing.assert_allclose(es.E_prec[0], mc_prec, rtol=0.02)
    mc_logdet = np.linalg.slogdet(draws)[1].mean()
    assert abs(es.E_logdet[0] - mc_logdet) < 0.02 * abs(mc_logdet) + 1e-3


def _sequential_log_evidence(hyper, X):
    """Chain rule over one-step-ahead posterior predictives."""
    total = 0.0
    for i in range(len(X)):
        prev = X[:i]
        nu, kappa, mu, Psi = niw_posterior_update(hyper, i, prev.sum(0), prev.T @ prev)
        total += full_log_predictive(nu, kappa, mu, Psi, X[i : i + 1])[0]
    return total


def test_marginal_likelihood_matches_chain_rule():
    ds = make_dataset(3, K=3, D=3, n=7)
    h = NIWHyper(6.5, 0.3, np.array([0.1, 0.0, -0.2]), np.array([[1.5, 0.2, 0.0], [0.2, 1.0, 0.1], [0.0, 0.1, 0.8]]))
    expect = sum(_sequential_log_evidence(h, ds.X[ds.y == k]) for k in range(ds.K))
    assert log_marginal_likelihood_full(h, compute_class_stats(ds)) == pytest.approx(expect, rel=1e-11)


def test_marginal_likelihood_single_point_quadrature():
    nu0, kappa0, psi0, x = 4.0, 0.5, 2.0, 0.7
    h = NIWHyper(nu0, kappa0, np.zeros(1), np.array([[psi0 / (nu0 - 2)]]))
    ds = EmbeddingDataset.from_arrays([[x]], [0])
    a, b = nu0 / 2, psi0 / 2
    log_ig_norm = a * math.log(b) - math.lgamma(a)

    def integrand(mu, s2):
        log_lik = -0.5 * math.log(2 * math.pi * s2) - (x - mu) ** 2 / (2 * s2)
        log_mu = -0.5 * math.log(2 * math.pi * s2 / kappa0) - kappa0 * mu * mu / (2 * s2)
        log_s2 = log_ig_norm - (a + 1) * math.log(s2) - b / s2
        return math.exp(log_lik + log_mu + log_s2)

    c = x / (1 + kappa0)
    half = lambda s2: 40.0 * math.sqrt(s2)
    val, _ = integrate.dblquad(integrand, 1e-8, 200.0, lambda s2: c - half(s2), lambda s2: c + half(s2), epsabs=1e-14, epsrel=1e-11)
    assert log_marginal_likelihood_full(h, compute_class_stats(ds)) == pytest.approx(np.log(val), abs=1e-6)


def test_marginal_likelihood_empty_and_duplicate_class():
    h = NIWHyper(5.0, 0.2, np.zeros(2), np.eye(2))
    empty = EmbeddingDataset.from_arrays(np.empty((0, 2)), np.empty(0, dtype=int), 2)
    assert log_marginal_likelihood_full(h, compute_class_stats(empty)) == 0.0
    X = np.array([[0.3, 1.0], [-0.5, 0.2], [1.1, -0.4]])
    one = compute_class_stats(EmbeddingDataset.from_arrays(X, [0, 0, 0]))
    two = compute_class_stats(EmbeddingDataset.from_arrays(np.vstack([X, X]), [0, 0, 0, 1, 1, 1]))
    assert log_marginal_likelihood_full(h, two) == pytest.approx(2 * log_marginal_likelihood_full(h, one), rel=1e-13)


def test_zero_iterations_returns_initialization():
    ds = make_dataset(0, K=3, D=2, n=4)
    m = em_fit_full(ds, max_iters=0)
    assert m.hyper.nu0 == 4.5 and m.hyper.kappa0 == 1e-3
    m = em_fit_full(make_dataset(0, K=3, D=2, n=12), max_iters=0)
    assert m.hyper.nu0 == 12.0
    assert len(m.trace) == 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fitted_nu_near_grid_argmax(seed):
    ds, _ = generate(SynthConfig(D=1, K=2, N_k=50, nu0=6.0, kappa0=0.05, seed=seed))
    m = em_fit_full(ds)
    h = m.hyper
    st_ = compute_class_stats(ds)
    grid = np.geomspace(2.05, 1e4, 4000)
    ll = [log_marginal_likelihood_full(NIWHyper(g, h.kappa0, h.mu0, h.Sigma0), st_) for g in grid]
    best = grid[int(np.argmax(ll))]
    assert abs(h.nu0 - best) <= 0.1 * best


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fitted_nu_orders_paired_datasets(seed):
    big = em_fit_full(generate(SynthConfig(D=2, K=10, N_k=50, nu0=1e4, seed=seed))[0]).hyper.nu0
    small = em_fit_full(generate(SynthConfig(D=2, K=10, N_k=50, nu0=5.0, seed=seed))[0]).hyper.nu0
    assert big > small


def test_em_trace_monotone_over_random_datasets():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        D = int(rng.integers(1, 4))
        ds = make_dataset(seed, K=int(rng.integers(2, 5)), D=D, n=int(rng.integers(D + 2, 15)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            m = em_fit_full(ds, max_iters=60)
        assert np.all(np.diff(m.trace) >= -1e-6), seed
        assert m.hyper.nu0 > D + 1


def test_predictive_normalized_and_symmetric():
    post = NIWPosterior(np.array([4.5]), np.array([1.5]), np.array([[0.3]]), np.array([[[2.0]]]))
    grid = np.linspace(-200, 200, 400001)
    dens = np.exp(full_log_predictive(4.5, 1.5, post.mu[0], post.Psi[0], grid[:, None]))
    assert abs(integrate.trapezoid(dens, grid) - 1) < 1e-4
    a, b = full_log_predictive(4.5, 1.5, post.mu[0], post.Psi[0], [[0.3 + 1.7], [0.3 - 1.7]])
    assert a == pytest.approx(b, rel=1e-14)
    with pytest.raises(ValueError, match="degrees of freedom"):
        full_log_predictive(0.5, 1.0, np.zeros(2), np.eye(2), [[0.0, 0.0]])


def test_one_dimensional_predictive_matches_diagonal_formula():
    nu, kappa, mu, psi = 6.0, 2.0, 1.0, 5.0
    X = np.linspace(-4, 6, 11)[:, None]
    full = full_log_predictive(nu, kappa, np.array([mu]), np.array([[psi]]), X)
    diag = diag_log_predictive(np.array([nu]), np.array([kappa]), np.array([mu]), np.array([psi / nu]), X)
    np.testing.assert_allclose(full, diag, rtol=1e-13)


def test_predictive_matches_monte_carlo():
    nu, kappa = 8.0, 3.0
    mu = np.array([0.5, -0.2])
    Psi = np.array([[3.0, 0.8], [0.8, 2.0]])
    rng = np.random.default_rng(1)
    n = 10**6
    Sig = stats.invwishart(df=nu, scale=Psi).rvs(size=n, random_state=rng)
    L = np.linalg.cholesky(Sig / kappa)
    means = mu + np.einsum("nij,nj->ni", L, rng.standard_normal((n, 2)))
    inv = np.linalg.inv(Sig)
    det = np.linalg.det(Sig)
    for x in ([0.5, -0.2], [2.0, 1.0], [-1.5, 0.5]):
        d = np.asarray(x) - means
        q = np.einsum("ni,nij,nj->n", d, inv, d)
        mc = np.mean(np.exp(-0.5 * q) / (2 * np.pi * np.sqrt(det)))
        exact = np.exp(full_log_predictive(nu, kappa, mu, Psi, [x])[0])
        assert abs(exact - mc) < 0.02 * mc


def test_large_nu_recovers_tied_scores():
    ds = make_dataset(5, K=4, D=3, n=30)
    full = em_fit_full(ds, nu0=1e6, fit_nu0=False, max_iters=0)
    h = full.hyper
    tied = TiedModel.from_stats(h.mu0, h.Sigma0 / h.kappa0, h.Sigma0, compute_class_stats(ds))
    X = np.random.default_rng(0).normal(scale=3.0, size=(200, 3))
    assert np.max(np.abs(dpmm_score(full, X) - dpmm_score(tied, X))) < 0.05


def test_dict_round_trip():
    m = em_fit_full(make_dataset(2, K=3, D=2, n=10))
    m2 = FullCovarianceModel.from_dict(m.to_dict())
    X = np.random.default_rng(3).normal(size=(5, 2))
    assert np.array_equal(m.log_posterior_predictive(X), m2.log_posterior_predictive(X))
    assert m2.trace == m.trace


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_posterior_scale_positive_definite(seed):
    ds = make_dataset(seed, K=2, D=3, n=5)
    h = NIWHyper(5.0, 1e-3, ds.X.mean(0), np.eye(3))
    post = niw_posterior(h, compute_class_stats(ds))
    assert np.all(np.linalg.eigvalsh(post.Psi) > 0)
    np.testing.assert_array_equal(post.nu, 5.0 + ds.counts())
