"""Backfitting and smooth backfitting estimators for additive quantile models."""

from .backfit import (
    AdditiveFit,
    Dataset,
    FitConfig,
    fit_bf,
    fit_quantile,
    fit_sbf_grid,
    fit_sbf_pseudo,
    normalize_fit,
    predict,
)
from .kernels import KernelSpec, kde_marginal, weighted_kde_pairwise
from .mean_backfit import WeightedDataset, fit_bf_star, fit_sbf_star
from .quantile import CheckLossProblem, check_loss, check_objective, weighted_quantile

__version__ = "0.1.0"

__all__ = [
    "AdditiveFit",
    "CheckLossProblem",
    "Dataset",
    "FitConfig",
    "KernelSpec",
    "WeightedDataset",
    "check_loss",
    "check_objective",
    "fit_bf",
    "fit_bf_star",
    "fit_quantile",
    "fit_sbf_grid",
    "fit_sbf_pseudo",
    "fit_sbf_star",
    "kde_marginal",
    "normalize_fit",
    "predict",
    "weighted_kde_pairwise",
    "weighted_quantile",
]
