"""Simply supported beam with corroded cross-section and uncertain geometry statistics.

The inferred quantities are the hyperparameters ``(mu_b, mu_h, sigma_b,
sigma_h)`` of the jointly normal width ``b`` and height ``h``; the load ``F``
and span ``L`` are lognormal with fixed moments. Failure means the bending
stress exceeds the allowable stress, so the failure probability given a
hyperparameter vector integrates over ``(b, h, F, L)``.
"""

from __future__ import annotations

import numpy as np
from scipy import optimize, special, stats
from scipy.special import logsumexp

from .base import BayesianReliabilityProblem, log_sigmoid_failure

STEEL_WEIGHT = 78_500.0  # N / m^3
SIGMA_MAX = 500e6  # Pa
CORRELATION = 0.4
LOAD_MOMENTS = (3500.0, 700.0)
SPAN_MOMENTS = (5.0, 0.5)
HYPER_LOWER = np.array([0.1, 0.015, 0.015, 0.00225])
HYPER_UPPER = np.array([0.3, 0.045, 0.045, 0.00675])
# (mean, std) of the priors on mu_b, mu_h (normal) and sigma_b, sigma_h (lognormal)
PRIOR_MOMENTS = ((0.2, 0.03), (0.03, 4.5e-3), (0.03, 4.5e-3), (4.5e-3, 6.75e-4))
DATA = ((0.18, 0.026), (0.14, 0.019))
INNER_SAMPLES = 10_000


class BeamDomainError(ValueError):
    pass


def lognormal_params(mean: float, std: float) -> tuple[float, float]:
    """(mu, sigma) of log X for a lognormal X with the given mean and std."""
    s2 = np.log1p((std / mean) ** 2)
    return float(np.log(mean) - 0.5 * s2), float(np.sqrt(s2))


def corroded_beam_stress(b, h, F, L, rho_st: float = STEEL_WEIGHT):
    """Maximum bending stress M / W in Pa.

    ``M = F L / 4 + rho_st b h L^2 / 8`` (midspan point load plus self
    weight) and ``W = b h^2 / 6``.
    """
    b, h, F, L = (np.asarray(v, dtype=float) for v in (b, h, F, L))
    if np.any(b <= 0) or np.any(h <= 0) or np.any(L <= 0):
        raise BeamDomainError("beam geometry must be positive")
    W = b * h**2 / 6.0
    M = F * L / 4.0 + rho_st * b * h * L**2 / 8.0
    return M / W


class _Hyperprior:
    """Independent normal/lognormal priors on the four hyperparameters, truncated to the box."""

    def __init__(self, lower=HYPER_LOWER, upper=HYPER_UPPER, moments=PRIOR_MOMENTS):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.dists = [stats.norm(*moments[0]), stats.norm(*moments[1])]
        for mean, std in moments[2:]:
            mu, s = lognormal_params(mean, std)
            self.dists.append(stats.lognorm(s=s, scale=np.exp(mu)))
        self.log_mass = sum(np.log(dist.cdf(u) - dist.cdf(l))
                            for dist, l, u in zip(self.dists, self.lower, self.upper))

    def logpdf(self, x):
        x = np.atleast_2d(x)
        out = sum(dist.logpdf(x[:, j]) for j, dist in enumerate(self.dists)) - self.log_mass
        inside = np.all((x >= self.lower) & (x <= self.upper), axis=1)
        return np.where(inside, out, -np.inf)

    def sample(self, rng, m):
        u = rng.uniform(size=(m, 4))
        lo = np.array([d.cdf(l) for d, l in zip(self.dists, self.lower)])
        hi = np.array([d.cdf(h) for d, h in zip(self.dists, self.upper)])
        return np.column_stack([d.ppf(lo[j] + u[:, j] * (hi[j] - lo[j]))
                                for j, d in enumerate(self.dists)])

    def to_standard(self, x):
        x = np.atleast_2d(x)
        z = []
        for j, dist in enumerate(self.dists):
            lo, hi = dist.cdf(self.lower[j]), dist.cdf(self.upper[j])
            z.append(special.ndtri((dist.cdf(x[:, j]) - lo) / (hi - lo)))
        return np.column_stack(z)

    def from_standard(self, z):
        z = np.atleast_2d(z)
        x = []
        for j, dist in enumerate(self.dists):
            lo, hi = dist.cdf(self.lower[j]), dist.cdf(self.upper[j])
            x.append(dist.ppf(lo + special.ndtr(z[:, j]) * (hi - lo)))
        return np.column_stack(x)


def beam_log_likelihood(x, data) -> np.ndarray:
    """Sum over observations of the bivariate normal log-density of (D_b, D_h)."""
    x = np.atleast_2d(x)
    mb, mh, sb, sh = x.T
    if np.any(sb <= 0) or np.any(sh <= 0):
        raise BeamDomainError("standard deviations must be positive")
    rho = CORRELATION
    out = np.zeros(x.shape[0])
    for db, dh in data:
        zb = (db - mb) / sb
        zh = (dh - mh) / sh
        q = (zb**2 - 2 * rho * zb * zh + zh**2) / (1 - rho**2)
        out += -0.5 * q - np.log(2 * np.pi * sb * sh * np.sqrt(1 - rho**2))
    return out


class InnerSample:
    """Common random numbers for the conditional failure probability.

    Standard normals for (b, h) and fixed lognormal draws of (F, L); the same
    draws serve every hyperparameter vector.
    """

    def __init__(self, n: int = INNER_SAMPLES, seed: int = 0):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, 4))
        rho = CORRELATION
        self.zb = z[:, 0]
        self.zh = rho * z[:, 0] + np.sqrt(1 - rho**2) * z[:, 1]
        muF, sF = lognormal_params(*LOAD_MOMENTS)
        muL, sL = lognormal_params(*SPAN_MOMENTS)
        self.F = np.exp(muF + sF * z[:, 2])
        self.L = np.exp(muL + sL * z[:, 3])

    def __len__(self):
        return self.zb.size


def beam_lsf(b, h, F, L):
    """sigma_max - stress: failure when the stress exceeds the allowable value."""
    return SIGMA_MAX - corroded_beam_stress(b, h, F, L)


def conditional_failure_probability(x, inner: InnerSample, chunk: int = 64) -> np.ndarray:
    """Fraction of the inner sample that fails under each hyperparameter vector.

    Non-physical draws (b <= 0 or h <= 0) count as failed.
    """
    x = np.atleast_2d(x)
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], chunk):
        blk = x[start:start + chunk]
        b = blk[:, :1] + blk[:, 2:3] * inner.zb
        h = blk[:, 1:2] + blk[:, 3:4] * inner.zh
        ok = (b > 0) & (h > 0)
        bs, hs = np.where(ok, b, 1.0), np.where(ok, h, 1.0)
        fail = (beam_lsf(bs, hs, inner.F, inner.L) <= 0) | ~ok
        out[start:start + chunk] = fail.mean(axis=1)
    return out


def log_smoothed_conditional_pf(x, inner: InnerSample, gamma: float, chunk: int = 64) -> np.ndarray:
    """log of the inner-sample mean of s_gamma(1 - stress / sigma_max).

    The limit state is normalised by the allowable stress so ``gamma`` is
    dimensionless. Non-physical draws count as failed (weight one).
    """
    x = np.atleast_2d(x)
    out = np.empty(x.shape[0])
    n = len(inner)
    for start in range(0, x.shape[0], chunk):
        blk = x[start:start + chunk]
        b = blk[:, :1] + blk[:, 2:3] * inner.zb
        h = blk[:, 1:2] + blk[:, 3:4] * inner.zh
        ok = (b > 0) & (h > 0)
        bs, hs = np.where(ok, b, 1.0), np.where(ok, h, 1.0)
        g = beam_lsf(bs, hs, inner.F, inner.L) / SIGMA_MAX
        logs = np.where(ok, log_sigmoid_failure(g, gamma), 0.0)
        out[start:start + chunk] = logsumexp(logs, axis=1) - np.log(n)
    return out


def _hyperparameter_lsf(x):
    raise NotImplementedError(
        "failure is random given the hyperparameters; use conditional_pf or augmented_lsf")


def augmented_lsf(x, z) -> np.ndarray:
    """Limit state in the augmented space.

    ``x`` holds hyperparameters (m, 4) and ``z`` standard normals (m, 4) for
    (b, h, F, L). Non-physical geometry is mapped to a failed state.
    """
    x, z = np.atleast_2d(x), np.atleast_2d(z)
    rho = CORRELATION
    b = x[:, 0] + x[:, 2] * z[:, 0]
    h = x[:, 1] + x[:, 3] * (rho * z[:, 0] + np.sqrt(1 - rho**2) * z[:, 1])
    muF, sF = lognormal_params(*LOAD_MOMENTS)
    muL, sL = lognormal_params(*SPAN_MOMENTS)
    F = np.exp(muF + sF * z[:, 2])
    L = np.exp(muL + sL * z[:, 3])
    ok = (b > 0) & (h > 0)
    g = beam_lsf(np.where(ok, b, 1.0), np.where(ok, h, 1.0), F, L)
    return np.where(ok, g, -SIGMA_MAX)


def corroded_beam_problem(data_sets=DATA[:1], inner_samples: int = INNER_SAMPLES,
                          inner_seed: int = 0) -> BayesianReliabilityProblem:
    """Hyperparameter-space problem updated with the given (D_b, D_h) pairs.

    The box is the physical hyperparameter box; the conditional failure
    probability replaces the indicator.
    """
    data = tuple((float(db), float(dh)) for db, dh in data_sets)
    prior = _Hyperprior()
    inner = InnerSample(inner_samples, inner_seed)
    problem = BayesianReliabilityProblem(
        name="corroded_beam",
        dim=4,
        lower=HYPER_LOWER,
        upper=HYPER_UPPER,
        log_prior=prior.logpdf,
        sample_prior=prior.sample,
        lsf=_hyperparameter_lsf,
        log_likelihood=(lambda x: beam_log_likelihood(x, data)) if data else None,
        to_standard=prior.to_standard,
        from_standard=prior.from_standard,
        conditional_pf=lambda x: conditional_failure_probability(x, inner),
        log_conditional_pf_smooth=lambda x, gamma: log_smoothed_conditional_pf(x, inner, gamma),
        evals_per_point=inner_samples,
        params={"data": [list(p) for p in data], "inner_samples": inner_samples,
                "inner_seed": inner_seed},
    )
    problem.log_likelihood_bound = max_log_likelihood(data) if data else 0.0
    problem.prior = prior
    problem.augmented = (4, augmented_lsf)
    problem.inner = inner
    return problem


def max_log_likelihood(data, n_starts: int = 8) -> float:
    """Supremum of the log-likelihood over the hyperparameter box (multistart L-BFGS-B)."""
    data = tuple(data)
    bounds = list(zip(HYPER_LOWER, HYPER_UPPER))
    rng = np.random.default_rng(0)
    best = -np.inf
    starts = rng.uniform(HYPER_LOWER, HYPER_UPPER, size=(n_starts, 4))
    starts[0] = 0.5 * (HYPER_LOWER + HYPER_UPPER)
    for x0 in starts:
        res = optimize.minimize(lambda x: -beam_log_likelihood(x, data)[0], x0,
                                method="L-BFGS-B", bounds=bounds)
        best = max(best, -float(res.fun))
    return best
