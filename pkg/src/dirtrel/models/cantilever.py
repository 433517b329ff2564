"""Cantilever beam with a random flexibility field and noisy deflection data.

The flexibility ``F(x) = 1 / (E I)`` is a Gaussian random field expanded in
``M`` KL modes. Deflection is linear in ``F``, hence affine in the KL
coefficients, so the problem stores the affine maps to the sensor readings and
to the tip deflection once and evaluates them with a matrix product.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg, special

from .base import BayesianReliabilityProblem, standard_normal_logpdf
from .kl import Kernel, KLField, field_realize, kl_expand

LENGTH = 2.0  # m
LOAD = 20.0  # kN
MEAN_FLEX = 1e-4  # 1 / (kN m^2)
STD_FLEX = 3.5e-5
TRUE_CORR_LENGTH = 2.0
NOISE_STD = 1e-3  # m
NOISE_CORR_LENGTH = 1.0
N_MESH = 201
THRESHOLD_RATIO = 55.0  # delta_max = L / 55
BOX_HALF_WIDTH = 6.0


class FlexibilityDomainError(ValueError):
    pass


def _cumtrapz(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    inc = 0.5 * np.diff(x) * (y[..., 1:] + y[..., :-1])
    out = np.zeros_like(y)
    out[..., 1:] = np.cumsum(inc, axis=-1)
    return out


def cantilever_deflection(flex, P: float = LOAD, L: float = LENGTH, mesh=None,
                          check: bool = True) -> np.ndarray:
    """Deflection on a uniform mesh of ``[0, L]`` for a tip load ``P``.

    Integrates ``w'' = F(x) P (L - x)`` twice with the trapezoid rule from the
    clamped end (``w(0) = w'(0) = 0``). ``flex`` is (n_mesh,) or (m, n_mesh).
    """
    flex = np.asarray(flex, dtype=float)
    if check and np.any(flex <= 0):
        raise FlexibilityDomainError("flexibility must be positive")
    x = np.linspace(0.0, L, flex.shape[-1]) if mesh is None else np.asarray(mesh, float)
    curvature = flex * P * (L - x)
    return _cumtrapz(_cumtrapz(curvature, x), x)


def sensor_locations(m_obs: int, L: float = LENGTH) -> np.ndarray:
    """``m_obs`` equally spaced points in (0, L]."""
    return L * np.arange(1, m_obs + 1) / m_obs


def interpolation_matrix(mesh: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rows of linear-interpolation weights from mesh values to ``points``."""
    points = np.asarray(points, dtype=float)
    if np.any(points < mesh[0]) or np.any(points > mesh[-1]):
        raise ValueError("observation locations must lie in [0, L]")
    i = np.clip(np.searchsorted(mesh, points, side="right") - 1, 0, mesh.size - 2)
    t = (points - mesh[i]) / (mesh[i + 1] - mesh[i])
    H = np.zeros((points.size, mesh.size))
    rows = np.arange(points.size)
    H[rows, i] = 1 - t
    H[rows, i + 1] = t
    return H


def _affine_deflection(kl: KLField, H: np.ndarray, P: float, L: float):
    """Offset and matrix of the map xi -> H w(F(xi))."""
    w0 = cantilever_deflection(kl.mean, P, L, kl.mesh, check=False)
    B = cantilever_deflection(kl.basis().T, P, L, kl.mesh, check=False)  # (M, n_mesh)
    return H @ w0, H @ B.T


def cantilever_problem(M: int = 10, corr_length: float = 2.5, m_obs: int = 10,
                       noise_std: float = NOISE_STD, noise_corr_length: float = NOISE_CORR_LENGTH,
                       seed: int = 0, n_mesh: int = N_MESH, true_corr_length: float = TRUE_CORR_LENGTH,
                       box_half_width: float = BOX_HALF_WIDTH, xi_true=None,
                       add_noise: bool = True) -> BayesianReliabilityProblem:
    """KL-coefficient problem with standard normal prior and Gaussian likelihood.

    A "true" flexibility field (all mesh modes of the ``true_corr_length``
    kernel, drawn from ``seed``) generates the synthetic readings at
    ``m_obs`` sensors, corrupted by exponentially correlated noise. Passing
    ``xi_true`` uses the prior expansion with those coefficients as the truth
    instead; ``add_noise=False`` keeps the readings exact.
    """
    if m_obs < 1:
        raise ValueError("need at least one sensor")
    L, P = LENGTH, LOAD
    kl = kl_expand(Kernel(STD_FLEX, corr_length), L, n_mesh, M, mean=MEAN_FLEX)
    rng = np.random.default_rng(seed)
    true_kl = kl_expand(Kernel(STD_FLEX, true_corr_length), L, n_mesh, n_mesh, mean=MEAN_FLEX)
    true_flex = field_realize(true_kl, rng.standard_normal(n_mesh))
    if xi_true is not None:
        true_flex = field_realize(kl, xi_true)
    sensors = sensor_locations(m_obs, L)
    H = interpolation_matrix(kl.mesh, sensors)
    noise_cov = Kernel(noise_std, noise_corr_length)(sensors, sensors)
    chol = linalg.cholesky(noise_cov, lower=True)
    w_true = cantilever_deflection(true_flex, P, L, kl.mesh, check=False)
    noise = chol @ rng.standard_normal(m_obs)
    data = H @ w_true + (noise if add_noise else 0.0)

    obs0, obs_mat = _affine_deflection(kl, H, P, L)
    tip_row = np.zeros((1, n_mesh))
    tip_row[0, -1] = 1.0
    tip0, tip_mat = _affine_deflection(kl, tip_row, P, L)
    tip0, tip_vec = float(tip0[0]), tip_mat[0]
    delta_max = L / THRESHOLD_RATIO
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    const = -0.5 * (m_obs * np.log(2 * np.pi) + logdet)

    def log_likelihood(xi):
        resid = data - (obs0 + np.atleast_2d(xi) @ obs_mat.T)
        z = linalg.solve_triangular(chol, resid.T, lower=True)
        return const - 0.5 * np.sum(z**2, axis=0)

    def lsf(xi):
        return delta_max - (tip0 + np.atleast_2d(xi) @ tip_vec)

    hw = float(box_half_width)
    problem = BayesianReliabilityProblem(
        name="cantilever",
        dim=M,
        lower=-hw * np.ones(M),
        upper=hw * np.ones(M),
        log_prior=standard_normal_logpdf,
        sample_prior=lambda g, m: g.standard_normal((m, M)),
        lsf=lsf,
        log_likelihood=log_likelihood,
        log_likelihood_bound=const,
        params={"M": M, "corr_length": corr_length, "m_obs": m_obs, "seed": seed,
                "noise_std": noise_std, "noise_corr_length": noise_corr_length,
                "n_mesh": n_mesh, "delta_max": delta_max},
    )
    problem.kl = kl
    problem.data = data
    problem.true_flex = true_flex
    problem.affine = {"obs0": obs0, "obs_mat": obs_mat, "tip0": tip0, "tip_vec": tip_vec,
                      "noise_cov": noise_cov}
    return problem


def gaussian_posterior(problem) -> tuple[np.ndarray, np.ndarray]:
    """Exact posterior mean and covariance of the KL coefficients (linear-Gaussian model)."""
    a = problem.affine
    G = a["obs_mat"]
    Sinv_G = linalg.solve(a["noise_cov"], G, assume_a="pos")
    prec = np.eye(G.shape[1]) + G.T @ Sinv_G
    cov = linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (Sinv_G.T @ (problem.data - a["obs0"]))
    return mean, cov


def exact_failure_probability(problem, posterior: bool = True) -> tuple[float, float]:
    """Failure probability of the tip deflection and its log, in closed form.

    The tip deflection is Gaussian under both the prior and the posterior.
    Ignores the truncation of the coefficient box.
    """
    a = problem.affine
    if posterior:
        mean, cov = gaussian_posterior(problem)
    else:
        mean, cov = np.zeros(problem.dim), np.eye(problem.dim)
    mu = a["tip0"] + a["tip_vec"] @ mean
    sd = float(np.sqrt(a["tip_vec"] @ cov @ a["tip_vec"]))
    z = (problem.params["delta_max"] - mu) / sd
    return float(special.ndtr(-z)), float(special.log_ndtr(-z))
