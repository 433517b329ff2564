"""Benchmark problems."""

from .base import BayesianReliabilityProblem, EvalCounter, log_sigmoid_failure
from .cantilever import cantilever_problem, exact_failure_probability, gaussian_posterior
from .corroded_beam import corroded_beam_problem
from .kl import Kernel, KLField, field_realize, kl_expand
from .linear import linear_lsf, linear_pf, linear_problem

__all__ = [
    "BayesianReliabilityProblem", "EvalCounter", "log_sigmoid_failure",
    "cantilever_problem", "exact_failure_probability", "gaussian_posterior",
    "corroded_beam_problem",
    "Kernel", "KLField", "field_realize", "kl_expand",
    "linear_lsf", "linear_pf", "linear_problem",
]
