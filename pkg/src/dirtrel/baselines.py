"""Comparison estimators: Subset Simulation, BUS with Subset Simulation, Cross-Entropy.

All three work in independent standard normal coordinates. Problems supply
``from_standard`` to reach the physical variables.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, special

from .estimators import EstimateReport, _cov_or_nan, run_rng
from .models.base import BayesianReliabilityProblem

TARGET_ACCEPTANCE = 0.44
ADAPT_CHUNK = 0.1  # fraction of chains between spread updates
CE_REG = 1e-8


class LikelihoodBoundError(ArithmeticError):
    def __init__(self, msg: str, observed: float):
        super().__init__(msg)
        self.observed = observed


class CovarianceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SusConfig:
    n_per_level: int = 3000
    p0: float = 0.1
    max_levels: int = 50
    spread: float = 1.0  # initial proposal scale relative to the seed spread

    def __post_init__(self):
        if not 0 < self.p0 < 1:
            raise ValueError("p0 must lie in (0, 1)")
        ns = self.n_per_level * self.p0
        if abs(ns - round(ns)) > 1e-9 or round(ns) < 2:
            raise ValueError("n_per_level * p0 must be an integer >= 2")
        if self.max_levels < 1 or not self.spread > 0:
            raise ValueError("max_levels >= 1 and spread > 0 required")

    @property
    def n_seeds(self) -> int:
        return int(round(self.n_per_level * self.p0))


@dataclass(frozen=True)
class CeConfig:
    n_per_level: int = 3000
    elite_fraction: float = 0.1
    max_levels: int = 50

    def __post_init__(self):
        if not 0 < self.elite_fraction < 1:
            raise ValueError("elite_fraction must lie in (0, 1)")
        if self.max_levels < 1 or self.n_per_level < 2:
            raise ValueError("invalid CE sizes")

    def n_elite(self) -> int:
        return int(math.ceil(self.elite_fraction * self.n_per_level))

    def check_dim(self, d: int) -> None:
        if self.n_elite() < d + 1:
            raise ValueError(f"elite count {self.n_elite()} < d + 1 = {d + 1}")


# ---------------------------------------------------------------------------
# Subset Simulation
# ---------------------------------------------------------------------------


@dataclass
class SusRun:
    estimate: float
    thresholds: list[float]
    level_probs: list[float]
    truncated: bool
    evals: int
    samples: np.ndarray = field(repr=False, default=None)
    constraint: np.ndarray | None = field(repr=False, default=None)


def _level_chains(seeds: np.ndarray, seed_g: np.ndarray, seed_c, n_total: int, level_fn,
                threshold: float, scale: np.ndarray, rng, spread: float):
    """Conditional-sampling Markov chains from the seeds, adapted towards 0.44 acceptance.

    Each component moves by ``rho u + sigma xi`` with ``rho = sqrt(1 - sigma^2)``,
    which leaves the standard normal invariant, so a candidate is accepted
    exactly when it stays inside the current level.

    ``level_fn(u) -> (g, c)`` evaluates the level function and an optional
    constraint (accepted only where ``c <= 0``).
    """
    ns, d = seeds.shape
    per_chain = np.full(ns, n_total // ns)
    per_chain[: n_total - per_chain.sum()] += 1
    u_out = np.empty((n_total, d))
    g_out = np.empty(n_total)
    c_out = None if seed_c is None else np.empty(n_total)
    lam = spread
    pos = 0
    n_eval = 0
    order = rng.permutation(ns)
    chunk = max(1, int(round(ADAPT_CHUNK * ns)))
    for start in range(0, ns, chunk):
        idx = order[start:start + chunk]
        cur = seeds[idx].copy()
        cur_g = seed_g[idx].copy()
        cur_c = None if seed_c is None else seed_c[idx].copy()
        steps = per_chain[idx]
        sigma = np.minimum(1.0, lam * scale)
        rho = np.sqrt(1.0 - sigma**2)
        accepted = 0
        moves = 0
        for s in range(steps.max()):
            live = steps > s
            if s == 0:
                k = np.flatnonzero(live)
                u_out[pos:pos + k.size] = cur[k]
                g_out[pos:pos + k.size] = cur_g[k]
                if c_out is not None:
                    c_out[pos:pos + k.size] = cur_c[k]
                pos += k.size
                continue
            k = np.flatnonzero(live)
            cand = rho * cur[k] + sigma * rng.standard_normal((k.size, d))
            changed = np.ones(k.size, dtype=bool)
            g_new = cur_g[k].copy()
            c_new = None if cur_c is None else cur_c[k].copy()
            if np.any(changed):
                gv, cv = level_fn(cand[changed])
                n_eval += int(changed.sum())
                ok = gv <= threshold
                if cv is not None:
                    ok &= cv <= 0
                sel = np.flatnonzero(changed)[ok]
                cur[k[sel]] = cand[sel]
                g_new[sel] = gv[ok]
                if c_new is not None:
                    c_new[sel] = cv[ok]
                accepted += sel.size
            moves += k.size
            cur_g[k] = g_new
            if cur_c is not None:
                cur_c[k] = c_new
            u_out[pos:pos + k.size] = cur[k]
            g_out[pos:pos + k.size] = cur_g[k]
            if c_out is not None:
                c_out[pos:pos + k.size] = cur_c[k]
            pos += k.size
        if moves:
            i_chunk = start // chunk + 1
            lam *= math.exp((accepted / moves - TARGET_ACCEPTANCE) / math.sqrt(i_chunk))
    return u_out, g_out, c_out, n_eval


def _sus_core(level_fn, u0: np.ndarray, g0: np.ndarray, c0, cfg: SusConfig, rng) -> SusRun:
    """Levels of SuS started from ``(u0, g0)``, which must satisfy the constraint."""
    N = u0.shape[0]
    ns = cfg.n_seeds
    u, g, c = u0, g0, c0
    thresholds: list[float] = []
    probs: list[float] = []
    evals = 0
    for level in range(cfg.max_levels):
        order = np.argsort(g, kind="stable")
        b = 0.5 * (g[order[ns - 1]] + g[order[ns]])
        if b <= 0 or np.count_nonzero(g <= 0) >= ns:
            p_final = float(np.mean(g <= 0))
            probs.append(p_final)
            thresholds.append(0.0)
            est = cfg.p0**level * p_final
            return SusRun(est, thresholds, probs, False, evals, u, c)
        if thresholds and b >= thresholds[-1]:
            break
        thresholds.append(float(b))
        probs.append(cfg.p0)
        seeds = u[order[:ns]]
        scale = np.std(seeds, axis=0) if ns > 1 else np.ones(u.shape[1])
        scale = np.where(scale > 0, scale, 1.0)
        u, g, c, n_eval = _level_chains(seeds, g[order[:ns]], None if c is None else c[order[:ns]],
                                      N, level_fn, b, scale, rng, cfg.spread)
        evals += n_eval
    p_final = float(np.mean(g <= 0))
    level = len(thresholds)
    return SusRun(cfg.p0**level * p_final, thresholds, probs, True, evals, u, c)


def _sus_single(lsf: Callable, d: int, cfg: SusConfig, rng) -> SusRun:
    u0 = rng.standard_normal((cfg.n_per_level, d))
    g0 = np.asarray(lsf(u0), dtype=float)
    run = _sus_core(lambda v: (np.asarray(lsf(v), dtype=float), None), u0, g0, None, cfg, rng)
    run.evals += cfg.n_per_level
    return run


def _report(runs: list[SusRun], seed: int, t0: float, method: str, lsf_evals: int,
            lik_evals: int = 0, extra=None) -> EstimateReport:
    per_run = [r.estimate for r in runs]
    est = float(np.mean(per_run))
    info = {
        "thresholds": [r.thresholds for r in runs],
        "levels": [len(r.level_probs) for r in runs],
        "level_probs": [r.level_probs for r in runs],
        "truncated": [r.truncated for r in runs],
    }
    info.update(extra or {})
    return EstimateReport(est, per_run, _cov_or_nan(per_run) if len(runs) > 1 else 0.0,
                          lsf_evals, lik_evals, seed, time.perf_counter() - t0,
                          method=method, extra=info)


def subset_simulation(lsf: Callable, d: int, cfg: SusConfig | None = None, seed: int = 0,
                      runs: int = 1) -> EstimateReport:
    """Subset Simulation for ``P(lsf(U) <= 0)``, ``U`` standard normal in ``d`` dims.

    Intermediate thresholds sit halfway between the ``p0``-quantile neighbours
    of ``g``; conditional samples come from adaptive conditional-sampling
    chains started at the level seeds. Runs that reach ``max_levels`` are flagged in
    ``extra["truncated"]``.
    """
    cfg = cfg or SusConfig()
    t0 = time.perf_counter()
    out = [_sus_single(lsf, d, cfg, run_rng(seed, r)) for r in range(runs)]
    if any(r.truncated for r in out):
        warnings.warn("subset simulation hit max_levels; estimate truncated", RuntimeWarning)
    return _report(out, seed, t0, "sus", sum(r.evals for r in out))


def problem_sus(problem: BayesianReliabilityProblem, cfg: SusConfig | None = None, seed: int = 0,
                runs: int = 1) -> EstimateReport:
    """Prior failure probability of ``problem`` by SuS (counts through the problem)."""
    lsf, d = augmented_lsf(problem)
    lsf0, _ = problem.counter.snapshot()
    rep = subset_simulation(lsf, d, cfg, seed, runs)
    rep.lsf_evals = problem.counter.snapshot()[0] - lsf0
    return rep


def augmented_lsf(problem: BayesianReliabilityProblem):
    """Limit state over standard normals, plus its dimension.

    Hierarchical problems expose ``augmented`` = ``(n_extra, g(x, z))`` and
    get ``n_extra`` further standard normal coordinates.
    """
    d = problem.dim
    aug = getattr(problem, "augmented", None)
    if aug is None:
        return (lambda u: problem.g(problem.from_standard(u))), d
    n_extra, g_xz = aug

    def lsf(u):
        u = np.atleast_2d(u)
        problem.counter.add(lsf=u.shape[0])
        return g_xz(problem.from_standard(u[:, :d]), u[:, d:])

    return lsf, d + n_extra


# ---------------------------------------------------------------------------
# BUS
# ---------------------------------------------------------------------------


def bus_sus_posterior(problem: BayesianReliabilityProblem, cfg: SusConfig | None = None,
                      log_c: float | None = None, seed: int = 0, runs: int = 1) -> EstimateReport:
    """Posterior failure probability by BUS with Subset Simulation.

    One extra standard normal ``z0`` gives the auxiliary uniform
    ``Phi(z0)``; the acceptance event is ``log Phi(z0) + log c - log L <= 0``.
    Stage one runs SuS on the acceptance event, whose final level holds
    posterior samples; stage two runs SuS on the limit state with every
    MCMC move constrained to stay inside the acceptance event. The estimate
    is the stage-two product of level probabilities.

    ``log_c`` defaults to ``problem.log_likelihood_bound``; if that is also
    missing, the running maximum over the first level is used and the run is
    restarted with the larger value whenever a larger likelihood is seen.
    """
    cfg = cfg or SusConfig()
    t0 = time.perf_counter()
    lsf, d_aug = augmented_lsf(problem)
    d = problem.dim
    if log_c is None:
        log_c = problem.log_likelihood_bound
    lsf0, lik0 = problem.counter.snapshot()
    runs_out = []
    c_used = []
    for r in range(runs):
        rng = run_rng(seed, r)
        current = log_c
        while True:
            try:
                run = _bus_single(problem, lsf, d, d_aug, cfg, current, rng)
                break
            except LikelihoodBoundError as exc:
                if log_c is not None:
                    raise
                current = exc.observed
        runs_out.append(run)
        c_used.append(run.log_c)
    lsf1, lik1 = problem.counter.snapshot()
    return _report(runs_out, seed, t0, "bus_sus", lsf1 - lsf0, lik1 - lik0,
                   extra={"log_c": c_used, "acceptance_prob": [r.acceptance for r in runs_out]})


@dataclass
class _BusRun(SusRun):
    acceptance: float = 1.0
    log_c: float = 0.0


def _bus_single(problem, lsf, d, d_aug, cfg: SusConfig, log_c, rng) -> _BusRun:
    N = cfg.n_per_level
    dim = d_aug + 1

    def loglik(v):
        return problem.loglik(problem.from_standard(v[:, :d]))

    state = {"log_c": log_c}

    def accept_fn(v):
        ll = loglik(v)
        top = float(np.max(ll))
        if state["log_c"] is not None and top > state["log_c"] + 1e-9:
            raise LikelihoodBoundError(
                f"log-likelihood {top:.6g} exceeds the bound {state['log_c']:.6g}", top)
        return special.log_ndtr(v[:, -1]) + state["log_c"] - ll

    u0 = rng.standard_normal((N, dim))
    if log_c is None:
        ll0 = loglik(u0)
        state["log_c"] = float(np.max(ll0))
        h0 = special.log_ndtr(u0[:, -1]) + state["log_c"] - ll0
    else:
        h0 = accept_fn(u0)
    stage1 = _sus_core(lambda v: (accept_fn(v), None), u0, h0, None, cfg, rng)
    if stage1.truncated:
        raise RuntimeError("BUS acceptance stage did not converge within max_levels")
    u = stage1.samples
    h = np.asarray(accept_fn(u), dtype=float)
    inside = h <= 0
    if not np.any(inside):
        raise RuntimeError("no samples inside the acceptance event")
    seeds = u[inside]
    g_seeds = np.asarray(lsf(seeds[:, :d_aug]), dtype=float)

    def level_fn(v):
        return np.asarray(lsf(v[:, :d_aug]), dtype=float), accept_fn(v)

    # decorrelate the accepted set into a full level of posterior samples
    scale = np.std(seeds, axis=0) if seeds.shape[0] > 1 else np.ones(dim)
    scale = np.where(scale > 0, scale, 1.0)
    u, g, h, n_eval = _level_chains(seeds, g_seeds, h[inside], N, level_fn, np.inf, scale, rng,
                                  cfg.spread)
    stage2 = _sus_core(level_fn, u, g, h, cfg, rng)
    run = _BusRun(stage2.estimate, stage2.thresholds, stage2.level_probs, stage2.truncated,
                  stage1.evals + stage2.evals + n_eval + N + seeds.shape[0], stage2.samples, stage2.constraint,
                  acceptance=stage1.estimate, log_c=state["log_c"])
    return run


# ---------------------------------------------------------------------------
# Cross-Entropy
# ---------------------------------------------------------------------------


def _gauss_logpdf(u, mean, chol):
    z = linalg.solve_triangular(chol, (u - mean).T, lower=True)
    d = u.shape[1]
    return -0.5 * np.sum(z**2, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * d * np.log(2 * np.pi)


def _safe_chol(cov):
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        warnings.warn("degenerate CE covariance; adding 1e-8 to the diagonal", CovarianceWarning)
        return linalg.cholesky(cov + CE_REG * np.eye(cov.shape[0]), lower=True)


def _ce_single(lsf, d, cfg: CeConfig, rng):
    N = cfg.n_per_level
    mean = np.zeros(d)
    chol = np.eye(d)
    thresholds = []
    evals = 0
    for level in range(cfg.max_levels):
        u = mean + rng.standard_normal((N, d)) @ chol.T
        g = np.asarray(lsf(u), dtype=float)
        evals += N
        logw = -0.5 * np.sum(u**2, axis=1) - 0.5 * d * np.log(2 * np.pi) - _gauss_logpdf(u, mean, chol)
        q = float(np.quantile(g, cfg.elite_fraction))
        gam = max(q, 0.0)
        if thresholds:
            gam = min(gam, thresholds[-1])
        thresholds.append(gam)
        if gam <= 0:
            est = float(np.mean(np.exp(logw) * (g <= 0)))
            return est, thresholds, False, evals
        elite = g <= gam
        w = np.exp(logw[elite] - logw[elite].max())
        w /= w.sum()
        ue = u[elite]
        mean = w @ ue
        diff = ue - mean
        cov = (diff * w[:, None]).T @ diff
        chol = _safe_chol(0.5 * (cov + cov.T))
    est = float(np.mean(np.exp(logw) * (g <= 0)))
    return est, thresholds, True, evals


def cross_entropy(lsf: Callable, d: int, cfg: CeConfig | None = None, seed: int = 0,
                  runs: int = 1) -> EstimateReport:
    """Cross-Entropy importance sampling with a single Gaussian proposal.

    Each level refits mean and covariance to the likelihood-ratio-weighted
    elite set ``g <= gamma_t``; the last level's samples give the estimate.
    """
    cfg = cfg or CeConfig()
    cfg.check_dim(d)
    t0 = time.perf_counter()
    per_run, thr, trunc, evals = [], [], [], 0
    for r in range(runs):
        est, t, tr, ev = _ce_single(lsf, d, cfg, run_rng(seed, r))
        per_run.append(est)
        thr.append(t)
        trunc.append(tr)
        evals += ev
    if any(trunc):
        warnings.warn("cross-entropy hit max_levels; estimate truncated", RuntimeWarning)
    return EstimateReport(float(np.mean(per_run)), per_run,
                          _cov_or_nan(per_run) if runs > 1 else 0.0, evals, 0, seed,
                          time.perf_counter() - t0, method="ce",
                          extra={"thresholds": thr, "truncated": trunc})


def problem_ce(problem: BayesianReliabilityProblem, cfg: CeConfig | None = None, seed: int = 0,
               runs: int = 1) -> EstimateReport:
    lsf, d = augmented_lsf(problem)
    lsf0, _ = problem.counter.snapshot()
    rep = cross_entropy(lsf, d, cfg, seed, runs)
    rep.lsf_evals = problem.counter.snapshot()[0] - lsf0
    return rep


def bus_ce_posterior(problem: BayesianReliabilityProblem, cfg: CeConfig | None = None,
                     log_c: float | None = None, seed: int = 0, runs: int = 1) -> EstimateReport:
    """Posterior failure probability as a ratio of two Cross-Entropy estimates.

    On the BUS-augmented space with acceptance limit state
    ``h = log Phi(z0) + log c - log L``, estimates ``P(h <= 0)`` and
    ``P(max(g, h) <= 0)`` with independent CE runs and returns their ratio.
    ``log_c`` defaults to ``problem.log_likelihood_bound``, else to the
    largest log-likelihood over a pilot prior sample.
    """
    cfg = cfg or CeConfig()
    t0 = time.perf_counter()
    lsf, d_aug = augmented_lsf(problem)
    d = problem.dim
    dim = d_aug + 1
    cfg.check_dim(dim)
    lsf0, lik0 = problem.counter.snapshot()
    if log_c is None:
        log_c = problem.log_likelihood_bound
    if log_c is None:
        pilot = run_rng(seed, 1_000_000).standard_normal((cfg.n_per_level, d))
        log_c = float(np.max(problem.loglik(problem.from_standard(pilot))))

    def accept(v):
        ll = problem.loglik(problem.from_standard(v[:, :d]))
        return special.log_ndtr(v[:, -1]) + log_c - ll

    def joint(v):
        return np.maximum(np.asarray(lsf(v[:, :d_aug]), dtype=float), accept(v))

    per_run, evid, trunc = [], [], []
    for r in range(runs):
        z_hat, _, tz, _ = _ce_single(accept, dim, cfg, run_rng(seed, 2 * r))
        q_hat, _, tq, _ = _ce_single(joint, dim, cfg, run_rng(seed, 2 * r + 1))
        if not z_hat > 0:
            raise ArithmeticError("CE acceptance probability estimate is zero")
        per_run.append(q_hat / z_hat)
        evid.append(z_hat)
        trunc.append(tz or tq)
    if any(trunc):
        warnings.warn("cross-entropy hit max_levels; estimate truncated", RuntimeWarning)
    lsf1, lik1 = problem.counter.snapshot()
    return EstimateReport(float(np.mean(per_run)), per_run,
                          _cov_or_nan(per_run) if runs > 1 else 0.0, lsf1 - lsf0, lik1 - lik0,
                          seed, time.perf_counter() - t0, method="bus_ce",
                          extra={"acceptance_prob": evid, "log_c": log_c, "truncated": trunc})
