"""Squared tensor-train inverse Rosenblatt transports and their composition.

A single layer (:class:`SirtLayer`) stores a tensor train approximating the
square root of an unnormalised density on a box. Its density is

    f(z) = (tt(z)**2 + tau) / c,

with ``tt`` the linearly interpolated tensor train, a tiny uniform floor
``tau`` and ``c`` the exact integral. Marginals of the squared train follow
from right-to-left Gram matrices of the cores, so every conditional density
is a sum of squares and every conditional CDF is a nondecreasing
piecewise-cubic function with closed-form cell integrals.

A :class:`DirtMap` composes layers built over tempered targets
``pi**beta_l``: layer ``l + 1`` approximates the pullback of the next bridge
density under the map assembled so far, expressed in reference coordinates.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from . import _kernels
from .cross import CrossConfig, CrossReport, tt_cross
from .tt import DEFAULT_NODES, GridSpec, TTTensor

log = logging.getLogger(__name__)

FLOOR_ABS = 1e-30
FLOOR_MIX = 1e-10
NEWTON_ITERS = 80
CDF_TOL = 1e-13
_LOG_CLIP = 700.0


class TransportDomainError(ValueError):
    """Input outside the support box or on the boundary of (0, 1)."""


class TransportBuildError(RuntimeError):
    def __init__(self, message: str, layers_built: int):
        super().__init__(message)
        self.layers_built = layers_built


# ---------------------------------------------------------------------------
# reference density and tempering schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceDensity:
    """Product of truncated N(0, std**2) densities on [-half_width, half_width]."""

    std: float = 3.0
    half_width: float = 4.0

    def __post_init__(self):
        if not (self.std > 0 and self.half_width > 0):
            raise ValueError("reference std and half_width must be positive")

    @property
    def _mass(self) -> float:
        a = self.half_width / self.std
        return float(special.ndtr(a) - special.ndtr(-a))

    @property
    def _cdf_lo(self) -> float:
        return float(special.ndtr(-self.half_width / self.std))

    def logpdf(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        logp1 = -0.5 * (z / self.std) ** 2 - np.log(self.std * np.sqrt(2 * np.pi) * self._mass)
        return logp1.sum(axis=1)

    def cdf(self, z) -> np.ndarray:
        return (special.ndtr(np.asarray(z) / self.std) - self._cdf_lo) / self._mass

    def icdf(self, v) -> np.ndarray:
        z = self.std * special.ndtri(self._cdf_lo + np.asarray(v) * self._mass)
        return np.clip(z, -self.half_width, self.half_width)

    def sample(self, rng: np.random.Generator, m: int, d: int) -> np.ndarray:
        return self.icdf(rng.uniform(size=(m, d)))

    def grid(self, d: int, n: int = DEFAULT_NODES) -> GridSpec:
        return GridSpec.uniform(-self.half_width * np.ones(d), self.half_width * np.ones(d), n)

    def to_dict(self) -> dict:
        return {"kind": "truncated_gaussian", "std": self.std, "half_width": self.half_width}


@dataclass(frozen=True)
class TemperingSchedule:
    """Increasing exponents beta_0 < ... < beta_L = 1.

    beta_0 labels the starting point of the bridge, which is the reference;
    layer l = 1..L targets ``pi ** beta_l``.
    """

    betas: tuple[float, ...]

    def __post_init__(self):
        b = tuple(float(x) for x in self.betas)
        if len(b) < 1:
            raise ValueError("schedule needs at least one exponent")
        if any(x <= 0 or x > 1 for x in b):
            raise ValueError("exponents must lie in (0, 1]")
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError("exponents must be strictly increasing")
        if b[-1] != 1.0:
            raise ValueError("final exponent must equal 1")
        object.__setattr__(self, "betas", b)

    @property
    def n_layers(self) -> int:
        return max(len(self.betas) - 1, 1)

    @property
    def layer_betas(self) -> tuple[float, ...]:
        return self.betas[1:] if len(self.betas) > 1 else self.betas

    @classmethod
    def geometric(cls, n_layers: int, beta0: float = 1e-4) -> "TemperingSchedule":
        """beta_l = beta0 ** (1 - l / L), l = 0..L."""
        if n_layers < 1:
            raise ValueError("need at least one layer")
        betas = [beta0 ** (1.0 - l / n_layers) for l in range(n_layers)] + [1.0]
        return cls(tuple(betas))

    @classmethod
    def from_ratio(cls, beta0: float, ratio: float) -> "TemperingSchedule":
        """beta_{l+1} = ratio * beta_l starting at beta0; must land on 1."""
        n = int(round(np.log(1.0 / beta0) / np.log(ratio)))
        if not np.isclose(beta0 * ratio**n, 1.0, rtol=1e-9):
            raise ValueError(f"beta0={beta0} with ratio {ratio} does not reach 1")
        return cls(tuple(beta0 * ratio**l for l in range(n)) + (1.0,))

    def to_dict(self) -> dict:
        return {"betas": list(self.betas)}


# ---------------------------------------------------------------------------
# single layer
# ---------------------------------------------------------------------------


def _cell_gram(core: np.ndarray, G: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Integral over the box of core(z) G core(z)^T for a piecewise-linear core."""
    A = core[:, :-1, :]
    B = core[:, 1:, :]
    AG = np.einsum("ais,st->ait", A, G)
    BG = np.einsum("ais,st->ait", B, G)
    aa = np.einsum("ait,bit->iab", AG, A)
    bb = np.einsum("ait,bit->iab", BG, B)
    ab = np.einsum("ait,bit->iab", AG, B)
    cells = (aa + bb + 0.5 * (ab + ab.transpose(0, 2, 1))) / 3.0
    return np.einsum("i,iab->ab", h, cells)


def _sqrt_psd(G: np.ndarray) -> np.ndarray:
    G = 0.5 * (G + G.T)
    w, U = np.linalg.eigh(G)
    return U * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class SirtLayer:
    """Normalised squared tensor-train density on a box."""

    tt: TTTensor
    grid: GridSpec
    floor_mix: float = FLOOR_MIX
    report: CrossReport | None = None
    shift: float = 0.0

    def __post_init__(self):
        if self.tt.dims != self.grid.dims:
            raise ValueError("tensor and grid dims differ")
        d = self.tt.ndim
        steps = self.grid.steps
        G = np.ones((1, 1))
        whitened = [None] * d
        for k in range(d - 1, -1, -1):
            S = _sqrt_psd(G)
            whitened[k] = np.einsum("ais,st->ait", self.tt.cores[k], S)
            G = _cell_gram(self.tt.cores[k], G, steps[k])
        c_tt = float(G[0, 0])
        if not c_tt > 0:
            raise ValueError("squared tensor train integrates to zero")
        widths = self.grid.upper - self.grid.lower
        log_tail = np.concatenate([np.cumsum(np.log(widths)[::-1])[::-1][1:], [0.0]])
        log_vol = float(np.sum(np.log(widths)))
        log_tau = np.log(self.floor_mix * c_tt) - log_vol
        object.__setattr__(self, "_whitened", tuple(whitened))
        object.__setattr__(self, "_log_tail", log_tail)
        object.__setattr__(self, "_log_tau", float(log_tau))
        object.__setattr__(self, "c_tt", c_tt)
        object.__setattr__(self, "chat", c_tt * (1.0 + self.floor_mix))
        object.__setattr__(self, "_packed", _kernels.pack_layer(whitened, self.tt.cores,
                                                                  self.grid.nodes))

    @property
    def ndim(self) -> int:
        return self.tt.ndim

    def log_density(self, z) -> np.ndarray:
        """log f(z) for points inside the box."""
        _, logf = self._sweep(np.atleast_2d(z), inverse=False)
        return logf

    # -- core routine ---------------------------------------------------------
    def _sweep(self, data: np.ndarray, inverse: bool, upto: int | None = None):
        """Compiled equivalent of :meth:`_sweep_numpy`."""
        data = np.ascontiguousarray(data, dtype=float)
        d = self.ndim if upto is None else upto
        W, C, X, nn = self._packed
        return _kernels.sweep(W, C, X, nn, self._log_tau, self._log_tail, data, bool(inverse),
                              d, NEWTON_ITERS, CDF_TOL)

    def _sweep_numpy(self, data: np.ndarray, inverse: bool, upto: int | None = None):
        """Run the sequential conditional maps over dims 0..upto-1.

        inverse=True: ``data`` holds uniforms, returns box points.
        inverse=False: ``data`` holds box points, returns uniforms.
        Also returns the log of the product of conditional densities.
        """
        data = np.asarray(data, dtype=float)
        m = data.shape[0]
        d = self.ndim if upto is None else upto
        out = np.empty((m, d))
        logf = np.zeros(m)
        L = np.ones((m, 1))
        s = np.zeros(m)  # L_true = exp(s) * L
        for k in range(d):
            out[:, k], logc, L, s = self._step(k, L, s, data[:, k], inverse)
            logf += logc
        return out, logf

    def _conditional_state(self, k: int, L: np.ndarray, s: np.ndarray):
        nodes = self.grid.nodes[k]
        h = self.grid.steps[k]
        Ct = self._whitened[k]
        rl, n, rr = Ct.shape
        W = (L @ Ct.reshape(rl, n * rr)).reshape(-1, n, rr)
        a2 = np.einsum("mnr,mnr->mn", W, W)
        ab = np.einsum("mnr,mnr->mn", W[:, :-1], W[:, 1:])
        log_te = self._log_tau + self._log_tail[k] - 2.0 * s
        tau_eff = np.exp(np.minimum(log_te, _LOG_CLIP))
        cells = h * ((a2[:, :-1] + ab + a2[:, 1:]) / 3.0 + tau_eff[:, None])
        cum = np.cumsum(cells, axis=1)
        return nodes, h, a2, ab, tau_eff, cells, cum

    def _step(self, k, L, s, xk, inverse):
        nodes, h, a2, ab, te, cells, cum = self._conditional_state(k, L, s)
        m = L.shape[0]
        rows = np.arange(m)
        total = cum[:, -1]
        if inverse:
            target = xk * total
            i = np.minimum(np.sum(cum < target[:, None], axis=1), cells.shape[1] - 1)
            before = np.where(i > 0, cum[rows, i - 1], 0.0)
            rem = np.clip(target - before, 0.0, cells[rows, i])
            A, B, AB, hh = a2[rows, i], a2[rows, i + 1], ab[rows, i], h[i]
            t = _solve_cell(A, B, AB, te, hh, rem, cells[rows, i], total)
            z = nodes[i] + t * hh
            z = np.minimum(z, nodes[-1])
            res = z
        else:
            i, t = self.grid.locate(k, xk)
            A, B, AB, hh = a2[rows, i], a2[rows, i + 1], ab[rows, i], h[i]
            before = np.where(i > 0, cum[rows, i - 1], 0.0)
            u = (before + _cell_mass(A, B, AB, te, hh, t)) / total
            res = np.clip(u, 0.0, 1.0)
        w2 = A * (1 - t) ** 2 + 2 * AB * t * (1 - t) + B * t**2
        logc = np.log(np.maximum(w2, 0.0) + te) - np.log(total)
        core = self.tt.cores[k]
        slices = (1 - t)[:, None, None] * core[:, i, :].transpose(1, 0, 2)
        slices += t[:, None, None] * core[:, i + 1, :].transpose(1, 0, 2)
        L = np.einsum("mr,mrs->ms", L, slices)
        nrm = np.linalg.norm(L, axis=1)
        ok = nrm > 0
        L[ok] /= nrm[ok, None]
        s = s + np.where(ok, np.log(np.where(ok, nrm, 1.0)), -_LOG_CLIP)
        return res, logc, L, s


def _cell_mass(A, B, AB, te, h, t):
    t2, t3 = t * t, t * t * t
    return h * (A * (t - t2 + t3 / 3.0) + AB * (t2 - 2.0 * t3 / 3.0) + B * t3 / 3.0 + te * t)


def _solve_cell(A, B, AB, te, h, rem, cell, total):
    """Solve cell_mass(t) = rem for t in [0, 1] (safeguarded Newton)."""
    lo = np.zeros_like(rem)
    hi = np.ones_like(rem)
    t = np.where(cell > 0, rem / np.where(cell > 0, cell, 1.0), 0.5)
    tol = CDF_TOL * total
    for _ in range(NEWTON_ITERS):
        val = _cell_mass(A, B, AB, te, h, t) - rem
        done = np.abs(val) <= tol
        if np.all(done):
            break
        pos = val > 0
        hi = np.where(pos, t, hi)
        lo = np.where(pos, lo, t)
        deriv = h * (A * (1 - t) ** 2 + 2 * AB * t * (1 - t) + B * t**2 + te)
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = t - val / deriv
        bad = ~np.isfinite(tn) | (tn <= lo) | (tn >= hi)
        tn = np.where(bad, 0.5 * (lo + hi), tn)
        t = np.where(done, t, tn)
    return np.clip(t, 0.0, 1.0)


def _check_box(layer_or_grid: GridSpec, x: np.ndarray):
    if not np.all(layer_or_grid.contains(x)):
        raise TransportDomainError("point outside the layer box")


def build_sirt_layer(
    target: Callable[[np.ndarray], np.ndarray],
    grid: GridSpec,
    cfg: CrossConfig | None = None,
    *,
    log_target: bool = False,
    rng=None,
    floor_mix: float = FLOOR_MIX,
) -> SirtLayer:
    """Cross-approximate the square root of ``target`` on ``grid`` and wrap it.

    ``target`` maps box points (m, d) to positive values, or to log-values when
    ``log_target`` is set. Log-targets are shifted by the maximum of the first
    evaluated batch before exponentiation.
    """
    state = {"shift": None}

    def sqrt_target(idx):
        x = grid.points(idx)
        vals = np.asarray(target(x), dtype=float)
        if np.any(np.isnan(vals)):
            raise TransportDomainError("target returned NaN")
        if log_target:
            if state["shift"] is None:
                finite = vals[np.isfinite(vals)]
                state["shift"] = float(finite.max()) if finite.size else 0.0
            scaled = np.exp(np.minimum(vals - state["shift"], _LOG_CLIP))
        else:
            if np.any(vals < 0):
                raise TransportDomainError("target ratio must be nonnegative")
            scaled = vals
        return np.sqrt(scaled + FLOOR_ABS)

    tt, report = tt_cross(sqrt_target, grid, cfg, rng)
    return SirtLayer(tt, grid, floor_mix=floor_mix, report=report, shift=state["shift"] or 0.0)


def conditional_cdf(layer: SirtLayer, k: int, prefix, xk: float) -> float:
    """CDF of coordinate ``k`` given the preceding coordinates ``prefix``."""
    prefix = np.asarray(prefix, dtype=float).reshape(1, k)
    lo, hi = layer.grid.lower, layer.grid.upper
    if np.any(prefix < lo[:k]) or np.any(prefix > hi[:k]):
        raise TransportDomainError("prefix outside the layer box")
    if not lo[k] <= xk <= hi[k]:
        raise TransportDomainError("x_k outside the layer box")
    L, s = np.ones((1, 1)), np.zeros(1)
    for j in range(k):
        _, _, L, s = layer._step(j, L, s, prefix[:, j], inverse=False)
    u, _, _, _ = layer._step(k, L, s, np.array([xk]), inverse=False)
    return float(u[0])


def irt_invert(layer: SirtLayer, u) -> tuple[np.ndarray, np.ndarray | float]:
    """Sequentially invert the conditional CDFs; returns (x, f(x))."""
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    if np.any(u <= 0) or np.any(u >= 1):
        raise TransportDomainError("uniform inputs must lie strictly inside (0, 1)")
    x, logf = layer._sweep(u, inverse=True)
    dens = np.exp(logf)
    return (x[0], float(dens[0])) if single else (x, dens)


def rosenblatt_forward(layer: SirtLayer, x) -> np.ndarray:
    """Map box points to (0, 1)^d through the conditional CDFs."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    _check_box(layer.grid, x)
    u, _ = layer._sweep(x, inverse=False)
    return u[0] if single else u


# ---------------------------------------------------------------------------
# composite map
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DirtMap:
    """Composition of squared-TT layers plus an affine map to physical space.

    Reference points ``u`` live in the reference box; ``push`` applies the
    newest layer first and the affine scaling last.
    """

    layers: tuple[SirtLayer, ...]
    schedule: TemperingSchedule
    reference: ReferenceDensity
    lower: np.ndarray
    upper: np.ndarray
    evals: int = 0
    build_seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def ndim(self) -> int:
        return self.lower.size

    @property
    def _scale(self) -> np.ndarray:
        return (self.upper - self.lower) / (2.0 * self.reference.half_width)

    def _to_physical(self, y):
        return self.lower + (y + self.reference.half_width) * self._scale

    def _to_reference_box(self, x):
        return (x - self.lower) / self._scale - self.reference.half_width

    def push(self, u, n_layers: int | None = None):
        """Map reference points to physical points; returns (x, log Jacobian)."""
        return _push(self.layers if n_layers is None else self.layers[:n_layers],
                     self.reference, np.atleast_2d(u), self._to_physical, self._scale)

    def log_density(self, x) -> np.ndarray:
        """Log pushforward density of the reference at physical points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = self._to_reference_box(x)
        hw = self.reference.half_width
        y = np.clip(y, -hw, hw)
        logp = -np.sum(np.log(self._scale)) * np.ones(x.shape[0])
        for layer in self.layers:
            v, logf = layer._sweep(y, inverse=False)
            logp += logf
            y = self.reference.icdf(np.clip(v, 1e-300, 1.0 - 1e-16))
            logp -= self.reference.logpdf(y)
        return logp + self.reference.logpdf(y)

    def pull(self, x) -> np.ndarray:
        """Inverse of :meth:`push`: physical points to reference points."""
        y = self._to_reference_box(np.atleast_2d(np.asarray(x, dtype=float)))
        for layer in self.layers:
            v, _ = layer._sweep(y, inverse=False)
            y = self.reference.icdf(v)
        return y

    def to_dict(self) -> dict:
        return {
            "format": "dirtrel.dirtmap/1",
            "schedule": self.schedule.to_dict(),
            "reference": self.reference.to_dict(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "evals": self.evals,
            "meta": self.meta,
            "layers": [
                {
                    "tt": layer.tt.to_dict(),
                    "grid": layer.grid.to_dict(),
                    "floor_mix": layer.floor_mix,
                    "shift": layer.shift,
                    "cross": layer.report.to_dict() if layer.report else None,
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DirtMap":
        ref = data["reference"]
        layers = []
        for item in data["layers"]:
            rep = None
            if item.get("cross"):
                c = item["cross"]
                change = float("inf") if c["final_change"] is None else c["final_change"]
                rep = CrossReport(c["iterations"], c["evals"], change, tuple(c["ranks"]))
            layers.append(SirtLayer(TTTensor.from_dict(item["tt"]), GridSpec.from_dict(item["grid"]),
                                    floor_mix=item["floor_mix"], report=rep, shift=item["shift"]))
        return cls(
            tuple(layers),
            TemperingSchedule(tuple(data["schedule"]["betas"])),
            ReferenceDensity(ref["std"], ref["half_width"]),
            np.asarray(data["lower"]),
            np.asarray(data["upper"]),
            evals=data["evals"],
            meta=data.get("meta", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "DirtMap":
        return cls.from_dict(json.loads(text))


def _push(layers, reference, u, to_physical, scale):
    y = np.asarray(u, dtype=float)
    logJ = np.zeros(y.shape[0])
    for layer in reversed(layers):
        v = reference.cdf(y)
        v = np.clip(v, 0.0, 1.0)
        y_new, logf = layer._sweep(v, inverse=True)
        logJ += reference.logpdf(y) - logf
        y = y_new
    logJ += np.sum(np.log(scale))
    return to_physical(y), logJ


def dirt_sample(dmap: DirtMap, u) -> tuple[np.ndarray, np.ndarray]:
    """Push reference points through the map.

    Returns the physical points and the log of the pushforward density there.
    """
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    hw = dmap.reference.half_width
    if np.any(np.abs(u) >= hw):
        raise TransportDomainError("reference points must lie inside the reference box")
    x, logJ = dmap.push(u)
    logp = dmap.reference.logpdf(u) - logJ
    return (x[0], float(logp[0])) if single else (x, logp)


def sample(dmap: DirtMap, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(rng)
    u = dmap.reference.sample(rng, n, dmap.ndim)
    return dirt_sample(dmap, u)


def dirt_build(
    problem,
    log_target: Callable[[np.ndarray], np.ndarray],
    schedule: TemperingSchedule | None = None,
    reference: ReferenceDensity | None = None,
    cfg: CrossConfig | None = None,
    *,
    n_nodes: int = DEFAULT_NODES,
    seed=None,
    floor_mix: float = FLOOR_MIX,
) -> DirtMap:
    """Build a composite transport towards the unnormalised ``exp(log_target)``.

    ``problem`` supplies the physical box through ``lower``/``upper``.
    """
    t0 = time.perf_counter()
    schedule = schedule or TemperingSchedule.geometric(4)
    reference = reference or ReferenceDensity()
    cfg = cfg or CrossConfig()
    rng = np.random.default_rng(seed)
    lower = np.asarray(problem.lower, dtype=float)
    upper = np.asarray(problem.upper, dtype=float)
    d = lower.size
    grid = reference.grid(d, n_nodes)
    if cfg.init_sampler is None:
        cfg = _with_sampler(cfg, lambda g, m: reference.sample(g, m, d))

    layers: list[SirtLayer] = []
    evals = 0
    for l, beta in enumerate(schedule.layer_betas):
        current = DirtMap(tuple(layers), schedule, reference, lower, upper)

        def log_pullback(z, beta=beta, current=current):
            x, logJ = current.push(z)
            return beta * np.asarray(log_target(x), dtype=float) + logJ

        try:
            layer = build_sirt_layer(log_pullback, grid, cfg, log_target=True, rng=rng,
                                     floor_mix=floor_mix)
        except Exception as exc:
            raise TransportBuildError(f"layer {l + 1} failed: {exc}", len(layers)) from exc
        evals += layer.report.evals
        layers.append(layer)
        log.info("layer %d/%d beta=%.3g ranks=%s evals=%d", l + 1, schedule.n_layers, beta,
                 layer.tt.ranks, layer.report.evals)
    return DirtMap(tuple(layers), schedule, reference, lower, upper, evals=evals,
                   build_seconds=time.perf_counter() - t0)


def _with_sampler(cfg: CrossConfig, sampler) -> CrossConfig:
    return dataclasses.replace(cfg, init_sampler=sampler)
