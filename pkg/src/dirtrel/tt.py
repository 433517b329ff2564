"""Tensor-train container, grid description and evaluation routines.

A :class:`TTTensor` stores a discretised multivariate function as a chain
of 3-way cores ``core[k]`` of shape ``(r_{k-1}, n_k, r_k)`` with
``r_0 = r_d = 1``. Entries are products of core slices; values between
grid nodes are obtained by linearly interpolating each core slice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DENSE_CAP = 10**7
DEFAULT_NODES = 33


class TTShapeError(ValueError):
    """Inconsistent core shapes or grid sizes."""


class TTDomainError(ValueError):
    """Point or index outside the tensor domain."""


class TTResourceError(MemoryError):
    """Dense materialisation would exceed the configured cap."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float, order="C")  # fixed layout keeps BLAS sums reproducible
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TTTensor:
    """Tensor train with cores of shape ``(r_{k-1}, n_k, r_k)``."""

    cores: tuple[np.ndarray, ...]

    def __post_init__(self):
        cores = tuple(_frozen(c) for c in self.cores)
        if len(cores) == 0:
            raise TTShapeError("a tensor train needs at least one core")
        for k, c in enumerate(cores):
            if c.ndim != 3:
                raise TTShapeError(f"core {k} must be 3-way, got shape {c.shape}")
            if c.shape[1] < 2:
                raise TTShapeError(f"core {k} has mode size {c.shape[1]} < 2")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise TTShapeError("boundary ranks must equal 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[2] != cores[k + 1].shape[0]:
                raise TTShapeError(
                    f"rank mismatch between core {k} ({cores[k].shape}) "
                    f"and core {k + 1} ({cores[k + 1].shape})"
                )
        object.__setattr__(self, "cores", cores)

    @property
    def ndim(self) -> int:
        return len(self.cores)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[2] for c in self.cores)

    def __repr__(self) -> str:
        return f"TTTensor(dims={self.dims}, ranks={self.ranks})"

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "ranks": list(self.ranks),
            "cores": [c.ravel(order="C").tolist() for c in self.cores],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TTTensor":
        dims, ranks = data["dims"], data["ranks"]
        cores = [
            np.asarray(flat, dtype=float).reshape(ranks[k], dims[k], ranks[k + 1])
            for k, flat in enumerate(data["cores"])
        ]
        return cls(tuple(cores))

    def dumps(self) -> str:
        """Structured-text snapshot (JSON, cores flattened row-major)."""
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "TTTensor":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class GridSpec:
    """Per-dimension strictly increasing node sequences.

    The first and last node of each sequence are the box bounds.
    """

    nodes: tuple[np.ndarray, ...]
    _steps: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = tuple(_frozen(x) for x in self.nodes)
        for k, x in enumerate(nodes):
            if x.ndim != 1 or x.size < 2:
                raise TTShapeError(f"grid {k} needs at least two nodes")
            if np.any(np.diff(x) <= 0):
                raise TTShapeError(f"grid {k} is not strictly increasing")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "_steps", tuple(_frozen(np.diff(x)) for x in nodes))

    @classmethod
    def uniform(cls, lower, upper, n: int | Sequence[int] = DEFAULT_NODES) -> "GridSpec":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        lower, upper = np.broadcast_arrays(lower, upper)
        ns = np.broadcast_to(np.asarray(n), lower.shape)
        return cls(tuple(np.linspace(a, b, int(m)) for a, b, m in zip(lower, upper, ns)))

    @property
    def ndim(self) -> int:
        return len(self.nodes)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(x.size for x in self.nodes)

    @property
    def lower(self) -> np.ndarray:
        return np.array([x[0] for x in self.nodes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([x[-1] for x in self.nodes])

    @property
    def steps(self) -> tuple[np.ndarray, ...]:
        return self._steps

    def points(self, idx) -> np.ndarray:
        """Map an integer index array of shape (m, d) to node coordinates."""
        idx = np.asarray(idx, dtype=int)
        return np.stack([self.nodes[k][idx[:, k]] for k in range(self.ndim)], axis=1)

    def nearest(self, x) -> np.ndarray:
        """Nearest node index per coordinate for points of shape (m, d)."""
        x = np.atleast_2d(x)
        out = np.empty(x.shape, dtype=int)
        for k, nodes in enumerate(self.nodes):
            j = np.clip(np.searchsorted(nodes, x[:, k]), 1, nodes.size - 1)
            left_closer = (x[:, k] - nodes[j - 1]) <= (nodes[j] - x[:, k])
            out[:, k] = np.where(left_closer, j - 1, j)
        return out

    def locate(self, k: int, xk) -> tuple[np.ndarray, np.ndarray]:
        """Cell index and local coordinate in [0, 1] for values along dim ``k``."""
        nodes = self.nodes[k]
        xk = np.asarray(xk, dtype=float)
        i = np.clip(np.searchsorted(nodes, xk, side="right") - 1, 0, nodes.size - 2)
        t = (xk - nodes[i]) / self._steps[k][i]
        return i, np.clip(t, 0.0, 1.0)

    def contains(self, x, atol: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lower - atol) & (x <= self.upper + atol), axis=1)

    def to_dict(self) -> dict:
        return {"nodes": [x.tolist() for x in self.nodes]}

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        return cls(tuple(np.asarray(x, dtype=float) for x in data["nodes"]))


def eval_discrete(tt: TTTensor, idx) -> float | np.ndarray:
    """Evaluate ``tt`` at integer multi-indices (one index or an (m, d) array)."""
    idx = np.asarray(idx, dtype=int)
    single = idx.ndim == 1
    idx = np.atleast_2d(idx)
    if idx.shape[1] != tt.ndim:
        raise TTDomainError(f"index length {idx.shape[1]} != tensor order {tt.ndim}")
    dims = np.asarray(tt.dims)
    if np.any(idx < 0) or np.any(idx >= dims):
        raise TTDomainError(f"index out of range for dims {tt.dims}")
    v = np.ones((idx.shape[0], 1))
    for k, core in enumerate(tt.cores):
        v = _chain(v, core[:, idx[:, k], :])
    out = v[:, 0]
    return float(out[0]) if single else out


def _chain(v: np.ndarray, slices: np.ndarray) -> np.ndarray:
    """sum_r v[m, r] * slices[r, m, s], accumulated in a fixed order over r.

    Shared by :func:`eval_discrete` and :func:`full_tensor` so the two agree
    bit for bit.
    """
    out = v[:, 0, None] * slices[0]
    for r in range(1, v.shape[1]):
        out = out + v[:, r, None] * slices[r]
    return out


def eval_continuous(tt: TTTensor, grid: GridSpec, x) -> float | np.ndarray:
    """Evaluate the linearly interpolated tensor train at real points.

    Each core slice is interpolated between the two bracketing nodes and the
    slices are chained. Points outside the grid box raise
    :class:`TTDomainError`; there is no extrapolation.
    """
    if grid.dims != tt.dims:
        raise TTShapeError(f"grid dims {grid.dims} do not match tensor dims {tt.dims}")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if not np.all(grid.contains(x)):
        raise TTDomainError("point outside the grid bounds")
    v = np.ones((x.shape[0], 1))
    for k, core in enumerate(tt.cores):
        i, t = grid.locate(k, x[:, k])
        slices = (1.0 - t)[None, :, None] * core[:, i, :] + t[None, :, None] * core[:, i + 1, :]
        v = _chain(v, slices)
    out = v[:, 0]
    return float(out[0]) if single else out


def full_tensor(tt: TTTensor, cap: int = DENSE_CAP) -> np.ndarray:
    """Materialise the dense array; only meant as a small-size oracle."""
    size = int(np.prod(tt.dims, dtype=object))
    if size > cap:
        raise TTResourceError(f"dense size {size} exceeds cap {cap}")
    out = np.ones((1, 1))
    for core in tt.cores:
        r, n, s = core.shape
        m = out.shape[0]
        # every prefix row meets every slice of the core
        out = _chain(np.repeat(out, n, axis=0), np.tile(core, (1, m, 1)))
    return out.reshape(tt.dims)


def storage_size(tt: TTTensor) -> int:
    """Number of stored core entries, ``sum_k r_{k-1} n_k r_k``."""
    return int(sum(c.size for c in tt.cores))
