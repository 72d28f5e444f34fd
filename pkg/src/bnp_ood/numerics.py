"""Special functions, stable reductions and the generalized Newton maximizer.

Everything the EM routines share lives here: multivariate gamma/digamma,
log-sum-exp, Gaussian and Student-t log-densities evaluated through Cholesky
factors, and a scalar maximizer that repeatedly fits a concave bound of the
form ``k + a*log(x) + b*x`` to the objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
from scipy import special

__all__ = [
    "NumericalError",
    "SingularCovarianceError",
    "ConvergenceWarning",
    "ScalarObjective",
    "NewtonResult",
    "log_multivariate_gamma",
    "multivariate_digamma",
    "logsumexp",
    "generalized_newton_maximize",
    "cholesky_with_jitter",
    "chol_logdet",
    "mvn_logpdf",
    "mvt_logpdf",
    "student_t_logpdf",
]

LOG_2PI = np.log(2.0 * np.pi)


class NumericalError(ArithmeticError):
    """Raised when a computation leaves its numerically valid domain."""


class SingularCovarianceError(NumericalError):
    """A covariance matrix stayed non positive definite after jitter."""


class ConvergenceWarning(UserWarning):
    """An iterative fit stopped at its iteration limit."""


def _check_mv_domain(a, D):
    if D < 1:
        raise ValueError(f"dimension must be >= 1, got {D}")
    if not a > (D - 1) / 2.0:
        raise ValueError(f"multivariate gamma needs a > (D-1)/2 = {(D - 1) / 2.0}, got a={a}")


def log_multivariate_gamma(a: float, D: int) -> float:
    """``log Gamma_D(a) = D(D-1)/4 log(pi) + sum_j log Gamma(a + (1-j)/2)``."""
    _check_mv_domain(a, D)
    j = np.arange(1, D + 1)
    return float(D * (D - 1) / 4.0 * np.log(np.pi) + special.gammaln(a + (1.0 - j) / 2.0).sum())


def multivariate_digamma(a: float, D: int, order: int = 1) -> float:
    """Sum over ``j=1..D`` of ``psi^(order-1)(a + (1-j)/2)``.

    ``order=1`` is the multivariate digamma, ``order=2`` its derivative
    (a sum of trigamma terms).
    """
    _check_mv_domain(a, D)
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    j = np.arange(1, D + 1)
    return float(special.polygamma(order - 1, a + (1.0 - j) / 2.0).sum())


def logsumexp(values, axis=None):
    """Stable ``log(sum(exp(values)))``; an empty reduction gives ``-inf``."""
    values = np.asarray(values, dtype=float)
    if values.size == 0 and axis is None:
        return -np.inf
    out = special.logsumexp(values, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ScalarObjective:
    """A scalar objective with analytic first and second derivatives.

    The domain is the open interval ``(lower_bound, inf)``.
    """

    value: Callable[[float], float]
    d1: Callable[[float], float]
    d2: Callable[[float], float]
    lower_bound: float = 0.0


@dataclass(frozen=True)
class NewtonResult:
    x: float
    converged: bool
    n_iter: int


def _bisect_derivative(obj, x, floor, upper):
    """Locate a root of ``obj.d1`` bracketing ``x``; used when the bound has the wrong shape."""
    g = obj.d1(x)
    if g > 0:
        lo, hi = x, min(10.0 * x, upper)
        for _ in range(60):
            if obj.d1(hi) <= 0 or hi >= upper:
                break
            lo, hi = hi, min(10.0 * hi, upper)
        if obj.d1(hi) > 0:
            return hi
    else:
        lo, hi = floor, x
        if obj.d1(lo) <= 0:
            return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if obj.d1(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def generalized_newton_maximize(
    obj: ScalarObjective,
    x0: float,
    max_iters: int = 100,
    tol: float = 1e-8,
    shift: float = 0.0,
    upper_bound: float = np.inf,
) -> NewtonResult:
    """Maximize a scalar objective by generalized Newton steps.

    At the current point ``x`` the objective is matched (value, first and
    second derivative) by ``g(u) = k + a*log(u) + b*u`` with ``u = x - shift``;
    the next iterate is the maximizer ``u* = -a/b``.  When the matched bound
    is not concave with an interior maximum (``a <= 0`` or ``b >= 0``) a
    bisection on the first derivative is used instead.  Every iterate is
    clamped above ``lower_bound`` and steps that would lower the objective
    are pulled back geometrically toward the current point, so the returned
    point never scores below ``x0`` beyond round-off at a stationary point.

    Parameters
    ----------
    obj : ScalarObjective
    x0 : float
        Starting point; must exceed ``obj.lower_bound``.
    max_iters, tol : int, float
        Stop once ``|L'(x)| <= tol`` or after ``max_iters`` updates.
    shift : float
        Origin of the log-linear bound. Passing the domain boundary makes the
        bound respect constraints such as ``nu > D + 1``.
    upper_bound : float
        Hard cap on the iterates.
    """
    lb = obj.lower_bound
    if not x0 > lb:
        raise ValueError(f"x0={x0} must exceed the lower bound {lb}")
    if shift > lb:
        raise ValueError("shift must not exceed the lower bound")
    floor = max(lb * (1.0 + 1e-6) + 1e-8, np.nextafter(lb, np.inf))
    x = min(max(float(x0), floor), upper_bound)
    fx = obj.value(x)
    for it in range(max_iters):
        g = obj.d1(x)
        if abs(g) <= tol:
            return NewtonResult(x, True, it)
        u = x - shift
        h = obj.d2(x)
        a = -u * u * h
        b = g - a / u
        if a > 0 and b < 0:
            cand = shift + (-a / b)
        else:
            cand = _bisect_derivative(obj, x, floor, upper_bound)
        cand = min(max(cand, floor), upper_bound)
        fc = obj.value(cand)

        def accept(c, f):
            # a stationary candidate is taken even if round-off makes its value look lower
            return f >= fx or abs(obj.d1(c)) <= tol

        # geometric pull-back toward x until the objective does not drop
        tries = 0
        while not accept(cand, fc) and tries < 60:
            cand = shift + np.sqrt((x - shift) * (cand - shift))
            fc = obj.value(cand)
            tries += 1
        if not accept(cand, fc):
            return NewtonResult(x, False, it + 1)
        if cand == x:
            return NewtonResult(x, abs(g) <= tol, it + 1)
        x, fx = cand, fc
    return NewtonResult(x, abs(obj.d1(x)) <= tol, max_iters)


def cholesky_with_jitter(A, name: str = "covariance", jitter: float = 1e-9):
    """Lower Cholesky factor of ``A``.

    On failure ``jitter * trace(A)/D`` is added to the diagonal and the
    factorization retried once.
    """
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    D = A.shape[-1]
    if not np.trace(A) > 0:
        raise SingularCovarianceError(f"{name} is not positive definite (non-positive trace)")
    ridge = jitter * np.trace(A) / D
    try:
        return np.linalg.cholesky(A + ridge * np.eye(D))
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(f"{name} is not positive definite (jitter {ridge:.3g} added)") from None


def chol_logdet(L) -> float:
    return float(2.0 * np.log(np.diag(L)).sum())


def _mahalanobis_sq(X, mean, L):
    diff = np.atleast_2d(X) - mean
    z = scipy.linalg.solve_triangular(L, diff.T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", z, z)


def mvn_logpdf(X, mean, L):
    """Gaussian log-density of the rows of ``X``; ``L`` is the Cholesky factor of the covariance."""
    D = L.shape[0]
    q = _mahalanobis_sq(X, mean, L)
    return -0.5 * (D * LOG_2PI + chol_logdet(L) + q)


def mvt_logpdf(X, df, loc, L):
    """Multivariate Student-t log-density with scale matrix ``L @ L.T``."""
    D = L.shape[0]
    q = _mahalanobis_sq(X, loc, L)
    return (
        special.gammaln(0.5 * (df + D))
        - special.gammaln(0.5 * df)
        - 0.5 * D * np.log(df * np.pi)
        - 0.5 * chol_logdet(L)
        - 0.5 * (df + D) * np.log1p(q / df)
    )


def student_t_logpdf(x, df, loc, scale_sq):
    """Univariate Student-t log-density with squared scale ``scale_sq`` (broadcasts)."""
    x = np.asarray(x, dtype=float)
    df = np.asarray(df, dtype=float)
    z = (x - loc) ** 2 / (df * scale_sq)
    return (
        special.gammaln(0.5 * (df + 1.0))
        - special.gammaln(0.5 * df)
        - 0.5 * np.log(df * np.pi * scale_sq)
        - 0.5 * (df + 1.0) * np.log1p(z)
    )

