"""Linear limit state in independent standard normal variables."""

from __future__ import annotations

import numpy as np
from scipy import special

from .base import BayesianReliabilityProblem, standard_normal_logpdf

BOX_MARGIN = 6.0


def linear_lsf(theta, alpha: float) -> np.ndarray | float:
    """g(theta) = alpha - sum(theta) / sqrt(d)."""
    theta = np.asarray(theta, dtype=float)
    d = theta.shape[-1]
    return alpha - theta.sum(axis=-1) / np.sqrt(d)


def linear_pf(alpha: float) -> float:
    """Exact failure probability Phi(-alpha), independent of d."""
    return float(special.ndtr(-alpha))


def linear_problem(d: int, alpha: float, margin: float = BOX_MARGIN) -> BayesianReliabilityProblem:
    """Prior-only problem; the box is centred on 0 and wide enough for the failure tail."""
    if d < 1:
        raise ValueError("d must be >= 1")
    half = margin + abs(alpha) / np.sqrt(d)
    return BayesianReliabilityProblem(
        name="linear",
        dim=d,
        lower=-half * np.ones(d),
        upper=half * np.ones(d),
        log_prior=standard_normal_logpdf,
        sample_prior=lambda rng, m: rng.standard_normal((m, d)),
        lsf=lambda x: linear_lsf(x, alpha),
        params={"d": d, "alpha": alpha, "exact_pf": linear_pf(alpha)},
    )
