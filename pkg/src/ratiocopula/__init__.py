"""Copula density estimation by classifying latent data against Gaussian noise."""

from .baselines import GaussianCopula, KdeCopula
from .classifier import MlpSpec, MLPRatio, PolyLogisticSpec, PolyRatio, TrainConfig, build_model, train
from .estimator import FitReport, RatioCopula, fit_ratio_copula, normalization_check
from .exceptions import FitWarning, ModelFormatError, NumericalError, RatioCopulaError, ValidationError
from .gaussian import CorrelationMatrix, KlDiagnostic, estimate_correlation, kl_gaussian_copula
from .io import load_model, save_model
from .marginals import EmpiricalMarginals, latent_to_pseudo, pseudo_to_latent
from .metrics import (
    avg_loglik,
    gen_gaussian_copula,
    gen_gaussian_mixture_copula,
    gen_image_copula,
    random_correlation,
    read_pgm,
    wasserstein2,
)
from .sampling import HmcConfig, sample_copula, sample_data, sample_latent

__version__ = "0.1.0"

__all__ = [
    "RatioCopula",
    "FitReport",
    "fit_ratio_copula",
    "normalization_check",
    "GaussianCopula",
    "KdeCopula",
    "EmpiricalMarginals",
    "pseudo_to_latent",
    "latent_to_pseudo",
    "CorrelationMatrix",
    "KlDiagnostic",
    "estimate_correlation",
    "kl_gaussian_copula",
    "MlpSpec",
    "MLPRatio",
    "PolyLogisticSpec",
    "PolyRatio",
    "TrainConfig",
    "build_model",
    "train",
    "HmcConfig",
    "sample_latent",
    "sample_copula",
    "sample_data",
    "avg_loglik",
    "wasserstein2",
    "random_correlation",
    "gen_gaussian_copula",
    "gen_gaussian_mixture_copula",
    "gen_image_copula",
    "read_pgm",
    "save_model",
    "load_model",
    "RatioCopulaError",
    "ValidationError",
    "NumericalError",
    "ModelFormatError",
    "FitWarning",
]
