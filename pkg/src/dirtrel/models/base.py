"""Problem container shared by estimators, baselines and the CLI."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class EvalCounter:
    """Thread-safe tallies of limit-state and likelihood evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self.lsf = 0
        self.likelihood = 0

    def add(self, lsf: int = 0, likelihood: int = 0) -> None:
        with self._lock:
            self.lsf += lsf
            self.likelihood += likelihood

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.lsf, self.likelihood


def log_sigmoid_failure(g, gamma: float) -> np.ndarray:
    """log s_gamma(g) = -log(1 + exp(gamma * g)), stable for large |gamma g|."""
    return -np.logaddexp(0.0, gamma * np.asarray(g, dtype=float))


@dataclass(eq=False)
class BayesianReliabilityProblem:
    """Prior, likelihood and limit state of a (possibly Bayesian) reliability task.

    Failure means ``lsf(x) <= 0``. When ``conditional_pf`` is given it
    replaces the failure indicator: it returns the probability of failure
    given ``x`` (for hierarchical models whose remaining variables are
    integrated out), and ``log_conditional_pf_smooth(x, gamma)`` is its
    sigmoid-smoothed counterpart used to shape proposals. ``to_standard``/``from_standard`` map between the
    physical variables and independent standard normals. Each conditional
    failure evaluation is charged ``evals_per_point`` limit-state calls.
    """

    name: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    log_prior: Callable[[np.ndarray], np.ndarray]
    sample_prior: Callable[[np.random.Generator, int], np.ndarray]
    lsf: Callable[[np.ndarray], np.ndarray]
    log_likelihood: Callable[[np.ndarray], np.ndarray] | None = None
    to_standard: Callable[[np.ndarray], np.ndarray] | None = None
    from_standard: Callable[[np.ndarray], np.ndarray] | None = None
    conditional_pf: Callable[[np.ndarray], np.ndarray] | None = None
    log_conditional_pf_smooth: Callable[[np.ndarray, float], np.ndarray] | None = None
    log_likelihood_bound: float | None = None
    evals_per_point: int = 1
    params: dict = field(default_factory=dict)
    counter: EvalCounter = field(default_factory=EvalCounter)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).reshape(self.dim)
        self.upper = np.asarray(self.upper, dtype=float).reshape(self.dim)
        if np.any(self.upper <= self.lower):
            raise ValueError("upper bounds must exceed lower bounds")
        if self.to_standard is None:
            self.to_standard = _identity
            self.from_standard = _identity

    @property
    def has_data(self) -> bool:
        return self.log_likelihood is not None

    def g(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        self.counter.add(lsf=x.shape[0])
        return np.asarray(self.lsf(x), dtype=float)

    def loglik(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.log_likelihood is None:
            return np.zeros(x.shape[0])
        self.counter.add(likelihood=x.shape[0])
        return np.asarray(self.log_likelihood(x), dtype=float)

    def failure(self, x, gamma: float | None = None) -> np.ndarray:
        """Sharp (gamma=None) or sigmoid-smoothed failure weight at ``x``."""
        x = np.atleast_2d(x)
        if self.conditional_pf is not None:
            self.counter.add(lsf=x.shape[0] * self.evals_per_point)
            return np.asarray(self.conditional_pf(x), dtype=float)
        g = self.g(x)
        if gamma is None:
            return (g <= 0).astype(float)
        return np.exp(log_sigmoid_failure(g, gamma))

    def log_failure(self, x, gamma: float) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.conditional_pf is not None:
            self.counter.add(lsf=x.shape[0] * self.evals_per_point)
            if self.log_conditional_pf_smooth is not None:
                return np.asarray(self.log_conditional_pf_smooth(x, gamma), dtype=float)
            with np.errstate(divide="ignore"):
                return np.log(np.asarray(self.conditional_pf(x), dtype=float))
        return log_sigmoid_failure(self.g(x), gamma)

    # unnormalised log-targets for the transport maps
    def log_target_failure(self, gamma: float) -> Callable[[np.ndarray], np.ndarray]:
        """log of s_gamma(g) * L * pi0 (the first optimal proposal)."""

        def fn(x):
            return self.log_failure(x, gamma) + self.loglik(x) + self.log_prior(x)

        return fn

    def log_target_evidence(self) -> Callable[[np.ndarray], np.ndarray]:
        """log of L * pi0 (the evidence proposal)."""

        def fn(x):
            return self.loglik(x) + self.log_prior(x)

        return fn


def _identity(x):
    return np.asarray(x, dtype=float)


def standard_normal_logpdf(x) -> np.ndarray:
    x = np.atleast_2d(x)
    return -0.5 * np.sum(x**2, axis=1) - 0.5 * x.shape[1] * np.log(2 * np.pi)
