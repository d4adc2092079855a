"""Sparse Gaussian-process regression with the Rényi alpha-ELBO."""

__version__ = "0.1.0"

from .kernels import Hyperparams, KernelSpec, gram, parse_kernel, se_eigen_tail, se_spectrum
from .linalg import LemmaDegenerate, NumericalFailure, SolverConfig
from .model import Dataset, FitConfig, GPModel, fit, predict, rmse, select_alpha, select_inducing, standardize
from .objective import AlphaParam, alpha_elbo, alpha_elbo_grad, exact_loglik, svgp_elbo, upper_bound

__all__ = [
    "AlphaParam",
    "Dataset",
    "FitConfig",
    "GPModel",
    "Hyperparams",
    "KernelSpec",
    "LemmaDegenerate",
    "NumericalFailure",
    "SolverConfig",
    "alpha_elbo",
    "alpha_elbo_grad",
    "exact_loglik",
    "fit",
    "gram",
    "parse_kernel",
    "predict",
    "rmse",
    "se_eigen_tail",
    "se_spectrum",
    "select_alpha",
    "select_inducing",
    "standardize",
    "svgp_elbo",
    "upper_bound",
]
