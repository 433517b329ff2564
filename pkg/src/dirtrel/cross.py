"""Cross approximation: maxvol pivoting, matrix skeletons and TT-cross.

``tt_cross`` builds a fixed-rank tensor train from point evaluations of a
black-box function on a tensor-product grid. Forward sweeps update the left
index sets, backward sweeps the right index sets, both through maxvol on
orthonormalised fibre matrices.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .tt import GridSpec, TTTensor, eval_discrete

log = logging.getLogger(__name__)

MAXVOL_TAU = 0.01
MAXVOL_SWAPS = 200
PINV_RTOL = 1e-12
PROBE_SIZE = 1000


class MaxvolWarning(RuntimeWarning):
    pass


class CrossEvaluationError(ArithmeticError):
    """The target function returned a non-finite value."""

    def __init__(self, message: str, index: np.ndarray):
        super().__init__(message)
        self.index = index


class CrossBudgetError(RuntimeError):
    """Evaluation budget exhausted before the sweeps finished."""

    def __init__(self, message: str, report: "CrossReport"):
        super().__init__(message)
        self.report = report


def maxvol(A, tau: float = MAXVOL_TAU, max_swaps: int = MAXVOL_SWAPS) -> np.ndarray:
    """Row indices of a quasi-maximal-volume ``r x r`` submatrix of ``A``.

    Parameters
    ----------
    A : array of shape (m, r), m >= r, full column rank.
    tau : dominance tolerance; iteration stops once every entry of
        ``A @ inv(A[I])`` is at most ``1 + tau`` in modulus.
    max_swaps : swap cap. When hit, the current index set is returned and a
        :class:`MaxvolWarning` is issued.

    Returns
    -------
    ndarray of int, shape (r,)
    """
    A = np.asarray(A, dtype=float)
    m, r = A.shape
    if m < r:
        raise ValueError(f"maxvol needs m >= r, got {A.shape}")
    if r == 0:
        return np.zeros(0, dtype=int)
    _, R, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag[0] == 0 or diag[-1] <= 1e-13 * diag[0] * max(m, r):
        raise np.linalg.LinAlgError(
            f"maxvol: matrix is numerically rank deficient "
            f"(pivot ratio {diag[-1] / max(diag[0], 1e-300):.3e}, shape {A.shape})"
        )
    idx = np.array(piv[:r], dtype=int)
    B = scipy.linalg.solve(A[idx].T, A.T).T
    for _ in range(max_swaps):
        flat = int(np.argmax(np.abs(B)))
        i, j = divmod(flat, r)
        if abs(B[i, j]) <= 1.0 + tau:
            return idx
        # rank-one update of B after replacing row idx[j] by row i
        bj = B[:, j].copy()
        bi = B[i, :].copy()
        bi[j] -= 1.0
        B -= np.outer(bj, bi / B[i, j])
        idx[j] = i
    if np.max(np.abs(B)) > 1.0 + tau:
        warnings.warn(f"maxvol did not converge in {max_swaps} swaps", MaxvolWarning)
    return idx


def _pinv_rrqr(U: np.ndarray, rtol: float = PINV_RTOL) -> tuple[np.ndarray, int]:
    """Pseudo-inverse through column-pivoted QR; returns (U+, effective rank)."""
    Q, R, piv = scipy.linalg.qr(U, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return np.zeros(U.T.shape), 0
    k = int(np.sum(diag > rtol * diag[0]))
    Rk = R[:k, :]
    Rk_pinv = Rk.T @ np.linalg.inv(Rk @ Rk.T)
    out = np.zeros((U.shape[1], U.shape[0]))
    out[piv, :] = Rk_pinv @ Q[:, :k].T
    return out, k


@dataclass
class Skeleton:
    C: np.ndarray
    U: np.ndarray
    R: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    rank: int

    def reconstruct(self) -> np.ndarray:
        Upinv, _ = _pinv_rrqr(self.U)
        return self.C @ Upinv @ self.R


def skeleton(A, r: int, sweeps: int = 4) -> Skeleton:
    """Cross (CUR) decomposition ``A ~ C U^+ R`` from ``r`` rows and columns.

    Column and row sets are refined alternately with maxvol on orthonormal
    bases of the current column/row blocks.
    """
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} not in [1, {min(m, n)}]")
    _, _, cols = scipy.linalg.qr(A, mode="economic", pivoting=True)
    cols = np.sort(cols[:r])
    rows = np.arange(r)
    for _ in range(sweeps):
        Qc, _ = np.linalg.qr(A[:, cols])
        rows_new = np.sort(maxvol(Qc))
        Qr, _ = np.linalg.qr(A[rows_new, :].T)
        cols_new = np.sort(maxvol(Qr))
        if np.array_equal(rows_new, rows) and np.array_equal(cols_new, cols):
            break
        rows, cols = rows_new, cols_new
    U = A[np.ix_(rows, cols)]
    _, k = _pinv_rrqr(U)
    return Skeleton(A[:, cols], U, A[rows, :], rows, cols, k)


@dataclass
class CrossConfig:
    """Settings for :func:`tt_cross`.

    ``init_right`` optionally gives, per interface k = 1..d-1, an integer
    array of right multi-indices (positions k..d-1). Otherwise they are
    drawn with ``init_sampler(rng, m)`` (points in grid coordinates mapped to
    the nearest nodes), or uniformly over the grid indices.
    """

    max_rank: int = 4
    tol: float = 1e-4
    iter_max: int = 4
    max_evals: int | None = None
    init_right: Sequence[np.ndarray] | None = None
    init_sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None
    probe_size: int = PROBE_SIZE
    batch_size: int | None = None
    executor: object | None = None

    def __post_init__(self):
        if self.max_rank < 1:
            raise ValueError("max_rank must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.iter_max < 1:
            raise ValueError("iter_max must be >= 1")


@dataclass
class CrossReport:
    iterations: int = 0
    evals: int = 0
    final_change: float = float("inf")
    ranks: tuple[int, ...] = ()
    changes: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "evals": self.evals,
            "ranks": list(self.ranks),
            "final_change": self.final_change if np.isfinite(self.final_change) else None,
        }


class _Evaluator:
    def __init__(self, f, cfg: CrossConfig, report: CrossReport):
        self.f = f
        self.cfg = cfg
        self.report = report

    def __call__(self, idx: np.ndarray) -> np.ndarray:
        m = idx.shape[0]
        if self.cfg.max_evals is not None and self.report.evals + m > self.cfg.max_evals:
            raise CrossBudgetError(
                f"evaluation budget {self.cfg.max_evals} exceeded "
                f"({self.report.evals} used, {m} requested)",
                self.report,
            )
        ex = self.cfg.executor
        if ex is not None and self.cfg.batch_size and m > self.cfg.batch_size:
            chunks = [idx[i:i + self.cfg.batch_size] for i in range(0, m, self.cfg.batch_size)]
            vals = np.concatenate(list(ex.map(self.f, chunks)))
        else:
            vals = np.asarray(self.f(idx), dtype=float).reshape(m)
        self.report.evals += m
        bad = ~np.isfinite(vals)
        if np.any(bad):
            where = idx[np.argmax(bad)]
            raise CrossEvaluationError(f"non-finite value at index {where.tolist()}", where)
        return vals


def _fibre_indices(left: np.ndarray, n: int, right: np.ndarray) -> np.ndarray:
    """All (left, i, right) multi-indices ordered as (a, i, b), b fastest."""
    ra, rb = left.shape[0], right.shape[0]
    a, i, b = np.meshgrid(np.arange(ra), np.arange(n), np.arange(rb), indexing="ij")
    a, i, b = a.ravel(), i.ravel(), b.ravel()
    return np.hstack([left[a], i[:, None], right[b]])


def _rank_caps(dims: Sequence[int], r: int) -> list[int]:
    d = len(dims)
    caps = [1]
    for k in range(1, d):
        left = int(np.prod(dims[:k], dtype=object))
        right = int(np.prod(dims[k:], dtype=object))
        caps.append(min(r, left, right))
    caps.append(1)
    return caps


def _initial_right(dims, caps, cfg: CrossConfig, grid: GridSpec, rng) -> list[np.ndarray]:
    d = len(dims)
    right = [None] * (d + 1)
    right[d] = np.zeros((1, 0), dtype=int)
    if cfg.init_right is not None:
        if len(cfg.init_right) != d - 1:
            raise ValueError(f"init_right needs {d - 1} index sets")
        for k in range(1, d):
            J = np.asarray(cfg.init_right[k - 1], dtype=int).reshape(-1, d - k)
            if J.shape[0] > caps[k]:
                raise ValueError(f"init_right[{k - 1}] longer than the rank cap {caps[k]}")
            if np.any(J < 0) or np.any(J >= np.asarray(dims[k:])):
                raise ValueError(f"init_right[{k - 1}] holds out-of-range indices")
            right[k] = J
        return right
    rmax = max(caps)
    if cfg.init_sampler is not None:
        pts = grid.nearest(cfg.init_sampler(rng, rmax))
    else:
        pts = np.stack([rng.integers(0, n, size=rmax) for n in dims], axis=1)
    for k in range(1, d):
        right[k] = pts[: caps[k], k:]
    return right


def _orth(M: np.ndarray) -> np.ndarray:
    Q, _ = np.linalg.qr(M)
    return Q


def _interp_core(M: np.ndarray, rmax: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormalise the columns of M, keep at most ``rmax`` and pick maxvol rows.

    Returns (rows, M_hat) where M_hat = Q inv(Q[rows]) interpolates M's column
    space at the selected rows.
    """
    Q = _orth(M)
    if Q.shape[1] > rmax:
        U, s, _ = np.linalg.svd(M, full_matrices=False)
        Q = U[:, :rmax]
    rows = maxvol(Q)
    return rows, scipy.linalg.solve(Q[rows].T, Q.T).T


def tt_cross(
    f: Callable[[np.ndarray], np.ndarray],
    grid: GridSpec,
    cfg: CrossConfig | None = None,
    rng: np.random.Generator | int | None = None,
) -> tuple[TTTensor, CrossReport]:
    """Approximate ``f`` on the nodes of ``grid`` by a tensor train.

    ``f`` receives an integer array of shape (m, d) of node indices and returns
    m values. Sweeps stop after ``cfg.iter_max`` forward/backward iterations or
    once the RMS change of the approximation on a fixed random probe set,
    relative to its RMS value, falls below ``cfg.tol``.
    """
    cfg = cfg or CrossConfig()
    rng = np.random.default_rng(rng)
    dims = grid.dims
    d = len(dims)
    report = CrossReport()
    evaluate = _Evaluator(f, cfg, report)

    if d == 1:
        idx = np.arange(dims[0])[:, None]
        vals = evaluate(idx)
        tt = TTTensor((vals.reshape(1, -1, 1),))
        report.iterations, report.final_change, report.ranks = 1, 0.0, tt.ranks
        return tt, report

    caps = _rank_caps(dims, cfg.max_rank)
    right = _initial_right(dims, caps, cfg, grid, rng)
    left: list[np.ndarray | None] = [None] * (d + 1)
    left[0] = np.zeros((1, 0), dtype=int)
    probes = np.stack([rng.integers(0, n, size=cfg.probe_size) for n in dims], axis=1)

    cores: list[np.ndarray | None] = [None] * d
    prev_probe = None
    cached_first = None  # fibre of core 0 from the previous backward sweep
    while report.iterations < cfg.iter_max:
        # forward sweep
        for k in range(d):
            rl, rr = left[k].shape[0], right[k + 1].shape[0]
            if k == 0 and cached_first is not None:
                vals = cached_first
            else:
                vals = evaluate(_fibre_indices(left[k], dims[k], right[k + 1]))
            if k == d - 1:
                cores[k] = vals.reshape(rl, dims[k], 1)
                last_fibre = vals
                break
            M = vals.reshape(rl * dims[k], rr)
            rows, Mhat = _interp_core(M, caps[k + 1])
            a, i = np.divmod(rows, dims[k])
            left[k + 1] = np.hstack([left[k][a], i[:, None]])
            cores[k] = Mhat.reshape(rl, dims[k], -1)
        # backward sweep
        for k in range(d - 1, -1, -1):
            rl, rr = left[k].shape[0], right[k + 1].shape[0]
            if k == d - 1:
                vals = last_fibre
            else:
                vals = evaluate(_fibre_indices(left[k], dims[k], right[k + 1]))
            if k == 0:
                cores[0] = vals.reshape(1, dims[0], rr)
                cached_first = vals
                break
            M = vals.reshape(rl, dims[k] * rr).T
            rows, Mhat = _interp_core(M, caps[k])
            i, b = np.divmod(rows, rr)
            right[k] = np.hstack([i[:, None], right[k + 1][b]])
            cores[k] = Mhat.T.reshape(-1, dims[k], rr)
        report.iterations += 1
        tt = TTTensor(tuple(cores))
        probe_vals = eval_discrete(tt, probes)
        if prev_probe is not None:
            scale = np.sqrt(np.mean(probe_vals**2))
            change = np.sqrt(np.mean((probe_vals - prev_probe) ** 2)) / max(scale, 1e-300)
            report.changes.append(float(change))
            report.final_change = float(change)
            log.debug("tt_cross iter %d change %.3e evals %d", report.iterations, change, report.evals)
            if change <= cfg.tol:
                break
        prev_probe = probe_vals
    report.ranks = tt.ranks
    return tt, report
