import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from bnp_ood.numerics import (
    NumericalError,
    ScalarObjective,
    SingularCovarianceError,
    cholesky_with_jitter,
    chol_logdet,
    generalized_newton_maximize,
    log_multivariate_gamma,
    logsumexp,
    multivariate_digamma,
    mvn_logpdf,
    mvt_logpdf,
    student_t_logpdf,
)


def _mp_log_mvgamma(a, D):
    a = mpmath.mpf(a)
    s = mpmath.mpf(D * (D - 1)) / 4 * mpmath.log(mpmath.pi)
    for j in range(1, D + 1):
        s += mpmath.loggamma(a + mpmath.mpf(1 - j) / 2)
    return float(s)


@pytest.mark.parametrize("a,D", [(0.5, 1), (2.5, 2), (7.25, 5), (40.0, 16), (400.3, 64)])
def test_log_multivariate_gamma_matches_mpmath(a, D):
    np.testing.assert_allclose(log_multivariate_gamma(a, D), _mp_log_mvgamma(a, D), rtol=1e-13, atol=1e-12)


def test_log_multivariate_gamma_matches_scipy():
    for a, D in [(3.0, 3), (11.5, 8)]:
        np.testing.assert_allclose(log_multivariate_gamma(a, D), special.multigammaln(a, D), rtol=1e-14)


def test_log_multivariate_gamma_d1_is_lgamma():
    assert log_multivariate_gamma(4.2, 1) == pytest.approx(special.gammaln(4.2), rel=1e-15)


@pytest.mark.parametrize("a,D", [(0.5, 2), (1.0, 3), (-1.0, 1)])
def test_multivariate_gamma_domain(a, D):
    with pytest.raises(ValueError):
        log_multivariate_gamma(a, D)
    with pytest.raises(ValueError):
        multivariate_digamma(a, D)


@pytest.mark.parametrize("a,D", [(1.7, 1), (3.4, 3), (20.0, 10)])
def test_multivariate_digamma_is_derivative(a, D):
    h = 1e-5
    fd = (_mp_log_mvgamma(a + h, D) - _mp_log_mvgamma(a - h, D)) / (2 * h)
    np.testing.assert_allclose(multivariate_digamma(a, D), fd, rtol=1e-8)
    fd2 = (multivariate_digamma(a + h, D) - multivariate_digamma(a - h, D)) / (2 * h)
    np.testing.assert_allclose(multivariate_digamma(a, D, order=2), fd2, rtol=1e-6)


def test_logsumexp():
    assert logsumexp([]) == -np.inf
    v = np.array([1000.0, 1000.0])
    assert logsumexp(v) == pytest.approx(1000.0 + np.log(2.0))
    np.testing.assert_allclose(logsumexp(np.log([[1.0, 3.0], [2.0, 2.0]]), axis=1), np.log([4.0, 4.0]))


def _quadratic_log(c):
    # L(x) = c log x - x, maximized at x = c
    return ScalarObjective(lambda x: c * np.log(x) - x, lambda x: c / x - 1.0, lambda x: -c / x**2)


@given(st.floats(0.1, 1e5), st.floats(0.01, 1e4))
@settings(max_examples=60, deadline=None)
def test_generalized_newton_exact_on_log_linear_family(c, x0):
    # the matched bound is exact for this family, so one step lands on the optimum
    res = generalized_newton_maximize(_quadratic_log(c), x0)
    assert res.converged
    np.testing.assert_allclose(res.x, c, rtol=1e-8)
    assert res.n_iter <= 2


def test_generalized_newton_matches_grid_search_on_nu_type_objective():
    K, S = 7, -9.3
    obj = ScalarObjective(
        lambda n: K * (0.5 * n * np.log(n / 2) - special.gammaln(n / 2)) + 0.5 * n * S,
        lambda n: 0.5 * K * (np.log(n / 2) + 1 - special.digamma(n / 2)) + 0.5 * S,
        lambda n: K * (0.5 / n - 0.25 * special.polygamma(1, n / 2)),
        lower_bound=2.001,
    )
    res = generalized_newton_maximize(obj, 30.0)
    grid = np.linspace(2.01, 60, 200001)
    best = grid[np.argmax(obj.value(grid))]
    assert res.converged
    assert abs(res.x - best) < 1e-3


def test_generalized_newton_respects_lower_bound_and_shift():
    # derivative negative everywhere: maximum at the boundary
    obj = ScalarObjective(lambda x: -x, lambda x: -1.0 + 0 * x, lambda x: 0.0 * x, lower_bound=3.0)
    res = generalized_newton_maximize(obj, 10.0, shift=3.0)
    assert res.x > 3.0
    assert res.x < 3.0 + 1e-4


def test_generalized_newton_never_decreases_objective():
    rng = np.random.default_rng(3)
    for _ in range(50):
        K, S = rng.integers(1, 30), rng.uniform(-40, -0.1)
        obj = ScalarObjective(
            lambda n: K * (0.5 * n * np.log(n / 2) - special.gammaln(n / 2)) + 0.5 * n * S,
            lambda n: 0.5 * K * (np.log(n / 2) + 1 - special.digamma(n / 2)) + 0.5 * S,
            lambda n: K * (0.5 / n - 0.25 * special.polygamma(1, n / 2)),
            lower_bound=2.001,
        )
        x0 = rng.uniform(2.1, 200)
        res = generalized_newton_maximize(obj, x0, upper_bound=1e8)
        assert obj.value(res.x) >= obj.value(x0) - 1e-12


def test_generalized_newton_rejects_bad_start():
    with pytest.raises(ValueError):
        generalized_newton_maximize(_quadratic_log(1.0), -1.0)


def test_cholesky_with_jitter_recovers_psd_and_names_matrix():
    A = np.ones((3, 3))  # rank one
    L = cholesky_with_jitter(A, "A")
    np.testing.assert_allclose(L @ L.T, A, atol=1e-8)
    with pytest.raises(SingularCovarianceError, match="Sigma_test"):
        cholesky_with_jitter(-np.eye(2), "Sigma_test")
    assert issubclass(SingularCovarianceError, NumericalError)


def test_gaussian_and_student_densities_match_scipy():
    rng = np.random.default_rng(0)
    D = 3
    B = rng.normal(size=(D, D))
    S = B @ B.T + np.eye(D)
    mu = rng.normal(size=D)
    X = rng.normal(size=(5, D))
    L = np.linalg.cholesky(S)
    np.testing.assert_allclose(chol_logdet(L), np.linalg.slogdet(S)[1], rtol=1e-13)
    np.testing.assert_allclose(mvn_logpdf(X, mu, L), stats.multivariate_normal(mu, S).logpdf(X), rtol=1e-12)
    np.testing.assert_allclose(mvt_logpdf(X, 4.5, mu, L), stats.multivariate_t(mu, S, df=4.5).logpdf(X), rtol=1e-12)
    x = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(student_t_logpdf(x, 3.3, 0.4, 2.0), stats.t(3.3, 0.4, np.sqrt(2.0)).logpdf(x), rtol=1e-12)
