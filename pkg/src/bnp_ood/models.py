"""Model registry: fit any method by name, and rebuild models from JSON documents."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .baselines import BASELINE_VARIANTS, MahalanobisModel, fit_mahalanobis
from .coupled import CoupledModel, em_fit_coupled
from .data import EmbeddingDataset, FormatError
from .diag import DiagonalModel, em_fit_diag
from .full import FullCovarianceModel, em_fit_full
from .preprocess import Whitener, apply_whitener, fit_whitener
from .scoring import ScoreTable, score_table
from .tied import TiedModel, fit_tied

__all__ = ["METHODS", "DPMM_VARIANTS", "Pipeline", "fit_model", "fit_pipeline", "model_from_dict"]

DPMM_VARIANTS = ("tied", "full", "diag", "coupled")
METHODS = DPMM_VARIANTS + BASELINE_VARIANTS

_CLASSES = {
    "tied": TiedModel,
    "full": FullCovarianceModel,
    "diag": DiagonalModel,
    "coupled": CoupledModel,
    **{v: MahalanobisModel for v in BASELINE_VARIANTS},
}


def fit_model(name: str, ds: EmbeddingDataset, **kw):
    """Fit method ``name`` on ``ds``; keyword arguments go to the variant's fit function."""
    if name == "tied":
        return fit_tied(ds)
    if name == "full":
        return em_fit_full(ds, **kw)
    if name == "diag":
        return em_fit_diag(ds, **kw)
    if name == "coupled":
        return em_fit_coupled(ds, **kw)
    if name in BASELINE_VARIANTS:
        return fit_mahalanobis(ds, name, **kw)
    raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


@dataclass
class Pipeline:
    """A fitted model that expects inputs in the space produced by ``whitener``."""

    model: object
    whitener: Optional[Whitener] = None

    @property
    def variant(self) -> str:
        return self.model.variant

    @property
    def counts(self) -> np.ndarray:
        return self.model.counts

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X if self.whitener is None else apply_whitener(self.whitener, X)

    def score_table(self, X, alpha=None, weighted=True) -> ScoreTable:
        return score_table(self.model, self.transform(X), alpha=alpha, weighted=weighted)

    def to_dict(self):
        d = dict(self.model.to_dict())
        d["preprocessing"] = None if self.whitener is None else {"whitener": self.whitener.to_dict()}
        return d


def fit_pipeline(
    name: str,
    ds: EmbeddingDataset,
    whiten: bool = True,
    eig_threshold: float = 1e-7,
    keep_dims: Optional[int] = None,
    **kw,
) -> Pipeline:
    """Optionally whiten ``ds``, then fit ``name`` on the transformed data."""
    w = fit_whitener(ds, eig_threshold, keep_dims) if whiten else None
    data = ds if w is None else ds.transform(w)
    return Pipeline(fit_model(name, data, **kw), w)


def model_from_dict(d):
    """Inverse of ``to_dict``; documents with a ``preprocessing`` key give a :class:`Pipeline`."""
    variant = d.get("variant")
    cls = _CLASSES.get(variant)
    if cls is None:
        raise FormatError(f"unknown model variant {variant!r}")
    try:
        model = cls.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed {variant} model document: {exc}") from None
    if "preprocessing" not in d:
        return model
    pre = d["preprocessing"]
    return Pipeline(model, None if pre is None else Whitener.from_dict(pre["whitener"]))
