"""Dirichlet-process mixture models for out-of-distribution scoring of embeddings."""

__version__ = "0.1.0"

from .baselines import MahalanobisModel, fit_mahalanobis
from .coupled import CoupledModel, em_fit_coupled
from .data import EmbeddingDataset, compute_class_stats, compute_empirical_moments
from .diag import DiagonalModel, em_fit_diag
from .evaluation import accuracy, auroc, fm_null_analysis, forstner_moonen, pearson
from .full import FullCovarianceModel, em_fit_full
from .models import METHODS, Pipeline, fit_model, fit_pipeline, model_from_dict
from .preprocess import Whitener, apply_whitener, fit_whitener
from .scoring import ScoreTable, classify, dpmm_score, inlier_probability, score_table
from .tied import TiedModel, fit_tied

__all__ = [
    "EmbeddingDataset",
    "compute_class_stats",
    "compute_empirical_moments",
    "Whitener",
    "fit_whitener",
    "apply_whitener",
    "TiedModel",
    "fit_tied",
    "FullCovarianceModel",
    "em_fit_full",
    "DiagonalModel",
    "em_fit_diag",
    "CoupledModel",
    "em_fit_coupled",
    "MahalanobisModel",
    "fit_mahalanobis",
    "METHODS",
    "Pipeline",
    "fit_model",
    "fit_pipeline",
    "model_from_dict",
    "ScoreTable",
    "score_table",
    "dpmm_score",
    "inlier_probability",
    "classify",
    "auroc",
    "accuracy",
    "pearson",
    "forstner_moonen",
    "fm_null_analysis",
]
