"""Constrained Bayesian optimization with a two-step lookahead acquisition."""

from .acquisition import (
    MissingIncumbentError,
    PosteriorBundle,
    batch_eic_mc,
    certainly_feasible,
    ei,
    eic,
    eic_grad,
    pf,
)
from .gp import FactorizationError, GPModel, KernelParams, fit_hyperparameters
from .lookahead import (
    CandidateBatch,
    FantasyEngine,
    FantasySample,
    TwoStepConfig,
    TwoStepResult,
    alpha,
    estimate_value,
    fantasy_log_density_and_score,
    inner_maximize,
    lr_gradient_estimate,
    lr_gradient_sample,
    optimize,
    sample_fantasies,
)
from .problems import ConstrainedProblem, get_problem, problem_names

__all__ = [
    "CandidateBatch",
    "ConstrainedProblem",
    "FactorizationError",
    "FantasyEngine",
    "FantasySample",
    "GPModel",
    "KernelParams",
    "MissingIncumbentError",
    "PosteriorBundle",
    "TwoStepConfig",
    "TwoStepResult",
    "alpha",
    "batch_eic_mc",
    "certainly_feasible",
    "ei",
    "eic",
    "eic_grad",
    "estimate_value",
    "fantasy_log_density_and_score",
    "fit_hyperparameters",
    "get_problem",
    "inner_maximize",
    "lr_gradient_estimate",
    "lr_gradient_sample",
    "optimize",
    "pf",
    "problem_names",
    "sample_fantasies",
]

__version__ = "0.1.0"
