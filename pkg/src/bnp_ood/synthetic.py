"""Synthetic benchmarks drawn from the normal-inverse-Wishart generative model.

Cluster parameters come from the prior::

    Sigma_k ~ IW(nu0, (nu0 - D - 1) Sigma0)      # E[Sigma_k] = Sigma0
    mu_k    ~ N(mu0, Sigma_k / kappa0)

inliers from ``N(mu_k, Sigma_k)`` and outliers from the prior predictive (a
fresh ``(mu, Sigma)`` per outlier).  Every random stream is a Philox
generator keyed by ``(seed, setting, role, class)`` so any cell of a sweep can
be regenerated on its own.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import EmbeddingDataset
from .io import fmt_float

__all__ = [
    "SynthConfig",
    "SyntheticSplit",
    "sample_wishart",
    "sample_inverse_wishart",
    "sample_cluster_params",
    "sample_prior_predictive",
    "generate",
    "generate_split",
    "run_sweep",
    "tight_class_regime",
    "write_sweep_csv",
    "SWEEP_COLUMNS",
]

_ROLE_PARAMS, _ROLE_TRAIN, _ROLE_TEST, _ROLE_OUTLIER = 0, 1, 2, 3


@dataclass(frozen=True)
class SynthConfig:
    D: int = 2
    K: int = 10
    N_k: int = 20
    nu0: float = 4.0
    kappa0: float = 0.05
    mu0: Optional[np.ndarray] = None
    Sigma0: Optional[np.ndarray] = None
    n_outliers: Optional[int] = None
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if self.D < 1 or self.K < 1 or self.N_k < 1:
            raise ValueError("D, K and N_k must be positive")
        if not self.nu0 > self.D + 1:
            raise ValueError(f"nu0 must exceed D + 1 = {self.D + 1}, got {self.nu0}")
        if not self.kappa0 > 0:
            raise ValueError("kappa0 must be positive")
        mu0 = np.zeros(self.D) if self.mu0 is None else np.asarray(self.mu0, dtype=float).reshape(self.D)
        S0 = np.eye(self.D) if self.Sigma0 is None else np.asarray(self.Sigma0, dtype=float).reshape(self.D, self.D)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "Sigma0", S0)
        if self.n_outliers is None:
            object.__setattr__(self, "n_outliers", self.K * self.N_k)
        elif self.n_outliers < 0:
            raise ValueError("n_outliers must be non-negative")

    def rng(self, role: int, index: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed, self.stream, role, index])
        return np.random.Generator(np.random.Philox(ss))


def sample_wishart(df: float, scale, size: Optional[int] = None, rng=None) -> np.ndarray:
    """Bartlett-decomposition draws from ``W(df, scale)`` (mean ``df * scale``).

    ``df`` may be any real ``> D - 1``.
    """
    rng = np.random.default_rng() if rng is None else rng
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    D = scale.shape[0]
    if not df > D - 1:
        raise ValueError(f"Wishart degrees of freedom must exceed D - 1 = {D - 1}")
    n = 1 if size is None else int(size)
    L = np.linalg.cholesky(scale)
    A = np.zeros((n, D, D))
    A[:, np.arange(D), np.arange(D)] = np.sqrt(rng.chisquare(df - np.arange(D), size=(n, D)))
    rows, cols = np.tril_indices(D, -1)
    A[:, rows, cols] = rng.standard_normal((n, len(rows)))
    LA = L @ A
    W = LA @ np.swapaxes(LA, -1, -2)
    W = 0.5 * (W + np.swapaxes(W, -1, -2))
    return W[0] if size is None else W


def sample_inverse_wishart(df: float, scale, size: Optional[int] = None, rng=None) -> np.ndarray:
    """``IW(df, scale)`` via the inverse of ``W(df, scale^-1)``; mean ``scale / (df - D - 1)``."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    W = sample_wishart(df, np.linalg.inv(scale), size, rng)
    S = np.linalg.inv(W)
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def _mvn_rows(rng, mean, Sigma, n):
    L = np.linalg.cholesky(Sigma)
    return mean + rng.standard_normal((n, len(mean))) @ L.T


def sample_cluster_params(cfg: SynthConfig, rng=None):
    """``K`` pairs ``(mu_k, Sigma_k)`` from the NIW prior.

    Without ``rng`` class ``k`` uses its own stream, so draws do not depend on
    how many classes are generated.
    """
    D = cfg.D
    psi = (cfg.nu0 - D - 1) * cfg.Sigma0
    mus = np.empty((cfg.K, D))
    Sigmas = np.empty((cfg.K, D, D))
    for k in range(cfg.K):
        r = cfg.rng(_ROLE_PARAMS, k) if rng is None else rng
        Sigmas[k] = sample_inverse_wishart(cfg.nu0, psi, rng=r)
        mus[k] = _mvn_rows(r, cfg.mu0, Sigmas[k] / cfg.kappa0, 1)[0]
    return mus, Sigmas


def sample_prior_predictive(cfg: SynthConfig, n: int, rng=None) -> np.ndarray:
    """``n`` points, each from its own freshly drawn cluster."""
    rng = cfg.rng(_ROLE_OUTLIER) if rng is None else rng
    D = cfg.D
    if n == 0:
        return np.empty((0, D))
    Sig = sample_inverse_wishart(cfg.nu0, (cfg.nu0 - D - 1) * cfg.Sigma0, size=n, rng=rng)
    L = np.linalg.cholesky(Sig)
    mu = cfg.mu0 + np.einsum("nij,nj->ni", L, rng.standard_normal((n, D))) / np.sqrt(cfg.kappa0)
    return mu + np.einsum("nij,nj->ni", L, rng.standard_normal((n, D)))


def _inliers(cfg, mus, Sigmas, role):
    X = np.concatenate([_mvn_rows(cfg.rng(role, k), mus[k], Sigmas[k], cfg.N_k) for k in range(cfg.K)])
    y = np.repeat(np.arange(cfg.K), cfg.N_k)
    return EmbeddingDataset.from_arrays(X, y, cfg.K)


def generate(cfg: SynthConfig):
    """``(inlier dataset, outlier matrix)`` with ``N_k`` inliers per class and ``n_outliers`` outliers."""
    mus, Sigmas = sample_cluster_params(cfg)
    return _inliers(cfg, mus, Sigmas, _ROLE_TRAIN), sample_prior_predictive(cfg, cfg.n_outliers)


@dataclass(frozen=True)
class SyntheticSplit:
    train: EmbeddingDataset
    test_in: EmbeddingDataset
    test_out: np.ndarray
    mus: np.ndarray = field(repr=False)
    Sigmas: np.ndarray = field(repr=False)


def generate_split(cfg: SynthConfig) -> SyntheticSplit:
    """Training inliers plus an evaluation split of fresh inliers from the same clusters and outliers."""
    mus, Sigmas = sample_cluster_params(cfg)
    return SyntheticSplit(
        _inliers(cfg, mus, Sigmas, _ROLE_TRAIN),
        _inliers(cfg, mus, Sigmas, _ROLE_TEST),
        sample_prior_predictive(cfg, cfg.n_outliers),
        mus,
        Sigmas,
    )


def tight_class_regime(seed: int, D: int = 16, K: int = 50, n: int = 500, ratio: float = 1e-2, n_test: int = 500):
    """Equal-size classes whose pooled within-class covariance is exactly ``ratio`` times the total.

    Class means are centred standard normals with between-class covariance
    ``B``; residuals are centred per class and linearly mapped so their
    pooled covariance is ``ratio / (1 - ratio) * B``.

    Returns
    -------
    (EmbeddingDataset, ndarray, ndarray)
        Training set, ``n_test`` fresh inliers from random classes and
        ``n_test`` outliers from ``N(0, B / (1 - ratio))``.
    """
    from scipy.linalg import sqrtm

    rng = np.random.default_rng(seed)
    mus = rng.normal(size=(K, D))
    mus -= mus.mean(axis=0)
    B = mus.T @ mus / K
    R = rng.normal(size=(K, n, D))
    R -= R.mean(axis=1, keepdims=True)
    W = np.einsum("kni,knj->ij", R, R) / (K * n)
    T = np.real(sqrtm(ratio / (1.0 - ratio) * B)) @ np.linalg.inv(np.real(sqrtm(W)))
    X = (mus[:, None, :] + R @ T.T).reshape(-1, D)
    ds = EmbeddingDataset.from_arrays(X, np.repeat(np.arange(K), n), K)
    x_in = mus[rng.integers(0, K, n_test)] + rng.normal(size=(n_test, D)) @ T.T
    x_out = rng.multivariate_normal(np.zeros(D), B / (1.0 - ratio), size=n_test)
    return ds, x_in, x_out


SWEEP_COLUMNS = ("parameter", "value", "seed", "method", "auroc", "accuracy", "error")
_SWEEPABLE = {"nu0": float, "N_k": int, "D": int, "K": int, "kappa0": float}


def _setting_stream(param: str, value) -> int:
    return zlib.crc32(f"{param}={value!r}".encode())


def _evaluate_cell(split: SyntheticSplit, method: str, fit_kw: dict):
    import warnings

    from .evaluation import accuracy, auroc
    from .models import fit_pipeline
    from .numerics import ConvergenceWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        pipe = fit_pipeline(method, split.train, **fit_kw.get(method, {}), **fit_kw.get("*", {}))
    t_in = pipe.score_table(split.test_in.X)
    t_out = pipe.score_table(split.test_out)
    return auroc(t_in.score, t_out.score), accuracy(t_in.predicted_class, split.test_in.y)


def run_sweep(
    parameter: str,
    values: Sequence,
    methods: Sequence[str],
    seeds: Iterable[int],
    base: Optional[SynthConfig] = None,
    whiten: bool = True,
    fit_kwargs: Optional[dict] = None,
) -> list:
    """AUROC and accuracy for every (setting, seed, method) cell.

    Each cell fits on the training inliers and scores fresh inliers against
    ``K * N_k`` prior-predictive outliers (unless ``base.n_outliers`` says
    otherwise).  A cell whose data cannot be generated or whose fit fails is
    kept with empty metrics and the error message.

    Returns
    -------
    list of dict
        Long-format rows keyed by :data:`SWEEP_COLUMNS`.
    """
    if parameter not in _SWEEPABLE:
        raise ValueError(f"cannot sweep {parameter!r}; choose from {', '.join(_SWEEPABLE)}")
    base = SynthConfig() if base is None else base
    fit_kw = {"*": {"whiten": whiten}}
    fit_kw.update(fit_kwargs or {})
    rows = []
    seeds = list(seeds)
    for value in values:
        value = _SWEEPABLE[parameter](value)
        for seed in seeds:
            try:
                n_out = None if base.n_outliers == base.K * base.N_k else base.n_outliers
                cfg = replace(base, **{parameter: value}, seed=int(seed), stream=_setting_stream(parameter, value), n_outliers=n_out)
                split = generate_split(cfg)
            except (ValueError, np.linalg.LinAlgError) as exc:
                rows += [dict(parameter=parameter, value=value, seed=seed, method=m, auroc=None, accuracy=None, error=str(exc)) for m in methods]
                continue
            for m in methods:
                try:
                    a, acc = _evaluate_cell(split, m, fit_kw)
                    err = ""
                except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
                    a = acc = None
                    err = f"{type(exc).__name__}: {exc}"
                rows.append(dict(parameter=parameter, value=value, seed=seed, method=m, auroc=a, accuracy=acc, error=err))
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_cell(r[c]) for c in SWEEP_COLUMNS])
