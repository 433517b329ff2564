"""Karhunen-Loeve expansion of 1-D random fields by Nystrom quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEG_EIG_TOL = 1e-10


class KLNumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Kernel:
    """Stationary covariance ``sigma^2 * k(|x - x'|)``.

    ``kind`` is ``"exponential"`` (``exp(-r / corr_length)``) or
    ``"constant"``.
    """

    sigma: float
    corr_length: float = 1.0
    kind: str = "exponential"

    def __post_init__(self):
        if self.kind not in ("exponential", "constant"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.sigma >= 0 or not self.corr_length > 0:
            raise ValueError("kernel needs sigma >= 0 and corr_length > 0")

    def __call__(self, x, y) -> np.ndarray:
        r = np.abs(np.subtract.outer(np.asarray(x, float), np.asarray(y, float)))
        if self.kind == "constant":
            return np.full(r.shape, self.sigma**2)
        return self.sigma**2 * np.exp(-r / self.corr_length)


@dataclass(frozen=True)
class KLField:
    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # (n_mesh, M)
    mesh: np.ndarray
    weights: np.ndarray
    kernel: Kernel

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    def basis(self) -> np.ndarray:
        """Columns sqrt(lambda_i) phi_i on the mesh."""
        return self.eigenfunctions * np.sqrt(self.eigenvalues)


def trapezoid_weights(mesh: np.ndarray) -> np.ndarray:
    h = np.diff(mesh)
    w = np.zeros_like(mesh)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def kl_expand(kernel: Kernel, length: float, n_mesh: int, M: int, mean=0.0) -> KLField:
    """Leading ``M`` eigenpairs of the covariance operator on ``[0, length]``.

    Discretises the integral eigenproblem with trapezoid weights ``W`` and
    solves the symmetric problem ``W^1/2 C W^1/2 v = lambda v``; the returned
    eigenfunctions ``phi = W^-1/2 v`` are orthonormal under ``W``.
    """
    if not 1 <= M <= n_mesh:
        raise ValueError("need 1 <= M <= n_mesh")
    mesh = np.linspace(0.0, length, n_mesh)
    w = trapezoid_weights(mesh)
    sw = np.sqrt(w)
    K = kernel(mesh, mesh)
    lam, V = np.linalg.eigh(sw[:, None] * K * sw[None, :])
    lam, V = lam[::-1], V[:, ::-1]
    if lam.min() < -NEG_EIG_TOL * max(1.0, abs(lam[0])):
        raise KLNumericalError(f"negative eigenvalue {lam.min():.3e}")
    lam = np.clip(lam[:M], 0.0, None)
    phi = V[:, :M] / sw[:, None]
    # fix the sign so each eigenfunction starts nonnegative
    phi *= np.where(phi[0] < 0, -1.0, 1.0)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), mesh.shape).copy()
    return KLField(mean, lam, phi, mesh, w, kernel)


def field_realize(kl: KLField, xi, lognormal: bool = False) -> np.ndarray:
    """mean + sum sqrt(lambda_i) phi_i xi_i on the mesh; ``xi`` is (M,) or (m, M).

    With ``lognormal`` the expansion describes the underlying Gaussian field
    and the result is its exponential.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != kl.n_modes:
        raise ValueError(f"expected {kl.n_modes} coefficients, got {xi.shape[-1]}")
    out = kl.mean + xi @ kl.basis().T
    return np.exp(out) if lognormal else out


def lognormal_field_params(mean: float, std: float) -> tuple[float, float]:
    """Mean and std of log F for a lognormal field with the given moments."""
    s2 = np.log1p((std / mean) ** 2)
    return float(np.log(mean) - 0.5 * s2), float(np.sqrt(s2))
