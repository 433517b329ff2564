"""Failure-probability estimators built on transport-map proposals.

Headline estimates reweight with the sharp failure indicator; the sigmoid
only shapes the proposal density. The smoothed reweighting, which carries the
bias controlled by ``gamma``, is reported alongside.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .cross import CrossConfig
from .models.base import BayesianReliabilityProblem
from .transport import DirtMap, ReferenceDensity, TemperingSchedule, dirt_build, sample

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "schema_version", "suite", "problem", "method", "d", "alpha_or_update",
    "estimate", "cov", "lsf_evals", "seed", "seconds",
)
DEFAULT_RUNS = 10


class DegenerateProposalError(ArithmeticError):
    pass


class UndefinedCovError(ArithmeticError):
    pass


class TunerError(RuntimeError):
    pass


@dataclass
class EstimateReport:
    estimate: float
    per_run: list[float]
    cov: float
    lsf_evals: int
    likelihood_evals: int
    seed: int
    wall_time: float
    method: str = ""
    smoothed_estimate: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lsf_evals < 0 or self.likelihood_evals < 0:
            raise ValueError("evaluation counts must be nonnegative")

    def csv_row(self, suite: str = "", problem: str = "", d: int | str = "",
                alpha_or_update="") -> dict:
        return {
            "schema_version": CSV_SCHEMA_VERSION,
            "suite": suite,
            "problem": problem,
            "method": self.method,
            "d": d,
            "alpha_or_update": alpha_or_update,
            "estimate": repr(float(self.estimate)),
            "cov": repr(float(self.cov)),
            "lsf_evals": self.lsf_evals,
            "seed": self.seed,
            "seconds": f"{self.wall_time:.3f}",
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


def write_csv(rows: Sequence[dict], handle=None) -> str:
    buf = handle or io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue() if handle is None else ""


def run_rng(seed: int, run: int) -> np.random.Generator:
    """Independent stream for repetition ``run`` of master ``seed``."""
    return np.random.default_rng([int(seed), int(run)])


def smooth_indicator(g, gamma: float):
    """Sigmoid surrogate 1 / (1 + exp(gamma * g)) of the failure indicator."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    g = np.asarray(g, dtype=float)
    out = special.expit(-gamma * g)
    return float(out) if out.ndim == 0 else out


def cov_over_runs(estimates: Sequence[float]) -> float:
    """Sample standard deviation over sample mean."""
    v = np.asarray(estimates, dtype=float)
    if v.size < 2:
        raise UndefinedCovError("need at least two estimates")
    mean = v.mean()
    if mean == 0:
        raise UndefinedCovError("CoV undefined for zero mean")
    return float(v.std(ddof=1) / abs(mean))


def _cov_or_nan(v) -> float:
    try:
        return cov_over_runs(v)
    except UndefinedCovError:
        return 0.0 if len(v) > 1 and np.all(np.asarray(v) == 0) else float("nan")


def _weighted_mean(logw: np.ndarray, factor: np.ndarray | None = None) -> float:
    """mean(factor * exp(logw)) computed with a shared shift."""
    finite = np.isfinite(logw)
    if not np.any(finite):
        return 0.0
    shift = logw[finite].max()
    vals = np.exp(logw - shift)
    if factor is not None:
        vals = vals * factor
    return float(np.mean(vals) * np.exp(shift))


def crude_mc(problem: BayesianReliabilityProblem, N: int, seed: int = 0,
             runs: int = 1, batch: int = 200_000) -> EstimateReport:
    """Mean of the sharp indicator over i.i.d. prior draws."""
    t0 = time.perf_counter()
    lsf0, lik0 = problem.counter.snapshot()
    per_run = []
    for run in range(runs):
        rng = run_rng(seed, run)
        hits = 0.0
        done = 0
        while done < N:
            m = min(batch, N - done)
            x = problem.sample_prior(rng, m)
            hits += problem.failure(x).sum()
            done += m
        per_run.append(hits / N)
    lsf1, lik1 = problem.counter.snapshot()
    est = float(np.mean(per_run))
    return EstimateReport(est, per_run, _cov_or_nan(per_run) if runs > 1 else 0.0,
                          lsf1 - lsf0, lik1 - lik0, seed, time.perf_counter() - t0,
                          method="mc", extra={"N": N, "std_error": _mc_se(est, N * runs)})


def _mc_se(p: float, n: int) -> float:
    return float(np.sqrt(max(p * (1 - p), 0.0) / n))


def build_map(problem: BayesianReliabilityProblem, log_target, *, schedule=None,
              reference=None, cfg=None, n_nodes: int = 33, seed=None) -> DirtMap:
    """:func:`dirt_build` with the problem's evaluation counts recorded in ``meta``."""
    lsf0, lik0 = problem.counter.snapshot()
    dmap = dirt_build(problem, log_target, schedule, reference, cfg, n_nodes=n_nodes, seed=seed)
    lsf1, lik1 = problem.counter.snapshot()
    dmap.meta.update({"lsf_evals": lsf1 - lsf0, "likelihood_evals": lik1 - lik0})
    return dmap


def build_failure_map(problem, gamma: float, **kw) -> DirtMap:
    """Map towards s_gamma(g) L pi0 (prior problems: s_gamma(g) pi0)."""
    dmap = build_map(problem, problem.log_target_failure(gamma), **kw)
    dmap.meta["target"] = {"kind": "failure", "gamma": gamma}
    return dmap


def build_evidence_map(problem, **kw) -> DirtMap:
    """Map towards L pi0."""
    dmap = build_map(problem, problem.log_target_evidence(), **kw)
    dmap.meta["target"] = {"kind": "evidence"}
    return dmap


def _map_evals(*maps: DirtMap) -> tuple[int, int]:
    return (sum(m.meta.get("lsf_evals", 0) for m in maps),
            sum(m.meta.get("likelihood_evals", 0) for m in maps))


def estimate_prior_pf(dmap: DirtMap, problem: BayesianReliabilityProblem, N: int,
                      gamma: float | None = None, seed: int = 0,
                      runs: int = DEFAULT_RUNS) -> EstimateReport:
    """Importance sampling with the map's pushforward as proposal.

    Each run draws ``N`` reference points, pushes them through ``dmap`` and
    averages ``1{g <= 0} pi0 / p``. Evaluation counts include the build.
    """
    t0 = time.perf_counter()
    lsf0, lik0 = problem.counter.snapshot()
    per_run, smoothed = [], []
    for run in range(runs):
        x, logp = sample(dmap, N, run_rng(seed, run))
        logw = problem.log_prior(x) - logp
        if problem.conditional_pf is not None:
            per_run.append(_weighted_mean(logw, problem.failure(x)))
            if gamma is not None and problem.log_conditional_pf_smooth is not None:
                smoothed.append(_weighted_mean(logw + problem.log_failure(x, gamma)))
            continue
        g = problem.g(x)
        per_run.append(_weighted_mean(logw, (g <= 0).astype(float)))
        if gamma is not None:
            smoothed.append(_weighted_mean(logw, smooth_indicator(g, gamma)))
    lsf1, lik1 = problem.counter.snapshot()
    blsf, blik = _map_evals(dmap)
    est = float(np.mean(per_run))
    return EstimateReport(
        est, per_run, _cov_or_nan(per_run) if runs > 1 else 0.0,
        lsf1 - lsf0 + blsf, lik1 - lik0 + blik, seed, time.perf_counter() - t0 + dmap.build_seconds,
        method="dirt", smoothed_estimate=float(np.mean(smoothed)) if smoothed else None,
        extra={"N": N, "runs": runs, "build_lsf_evals": blsf, "sample_lsf_evals": lsf1 - lsf0},
    )


def estimate_posterior_pf(map_q: DirtMap, map_z: DirtMap, problem: BayesianReliabilityProblem,
                          N: int, gamma: float | None = None, seed: int = 0,
                          runs: int = DEFAULT_RUNS) -> EstimateReport:
    """Ratio of two importance-sampling estimates, Q / Z.

    Q averages ``I * L * pi0 / p_Q`` over draws from ``map_q`` and Z averages
    ``L * pi0 / p_Z`` over independent draws from ``map_z``; the posterior
    normalising constant is never formed separately.
    """
    t0 = time.perf_counter()
    lsf0, lik0 = problem.counter.snapshot()
    per_run, smoothed, zs = [], [], []
    for run in range(runs):
        rng = run_rng(seed, run)
        xq, logpq = sample(map_q, N, rng)
        xz, logpz = sample(map_z, N, rng)
        logwq = problem.loglik(xq) + problem.log_prior(xq) - logpq
        logwz = problem.loglik(xz) + problem.log_prior(xz) - logpz
        z_hat = _weighted_mean(logwz)
        if not z_hat > 0:
            raise DegenerateProposalError("evidence estimate is zero")
        if problem.conditional_pf is not None:
            q_hat = _weighted_mean(logwq, problem.failure(xq))
            if gamma is not None and problem.log_conditional_pf_smooth is not None:
                smoothed.append(_weighted_mean(logwq + problem.log_failure(xq, gamma)) / z_hat)
        else:
            g = problem.g(xq)
            q_hat = _weighted_mean(logwq, (g <= 0).astype(float))
            if gamma is not None:
                smoothed.append(_weighted_mean(logwq, smooth_indicator(g, gamma)) / z_hat)
        per_run.append(q_hat / z_hat)
        zs.append(z_hat)
    lsf1, lik1 = problem.counter.snapshot()
    blsf, blik = _map_evals(map_q, map_z)
    est = float(np.mean(per_run))
    return EstimateReport(
        est, per_run, _cov_or_nan(per_run) if runs > 1 else 0.0,
        lsf1 - lsf0 + blsf, lik1 - lik0 + blik, seed,
        time.perf_counter() - t0 + map_q.build_seconds + map_z.build_seconds,
        method="dirt", smoothed_estimate=float(np.mean(smoothed)) if smoothed else None,
        extra={"N": N, "runs": runs, "evidence": zs, "build_lsf_evals": blsf},
    )


def select_gamma(grid: Sequence[float], estimates: Sequence[Sequence[float]],
                 reference: Sequence[float]) -> float:
    """argmin over the grid of | |mean_gamma - mean_ref| - SE_ref |.

    ``estimates[j]`` holds the repeated estimates at ``grid[j]``; ``reference``
    the repeated estimates at the sharp reference value. Ties go to the
    earliest grid entry.
    """
    ref = np.asarray(reference, dtype=float)
    if ref.size < 2:
        raise TunerError("need at least two reference repetitions")
    means = np.array([np.mean(e) for e in estimates])
    if np.all(means == 0) and np.all(ref == 0):
        raise TunerError("failure never observed at any gamma")
    se = ref.std(ddof=1) / np.sqrt(ref.size)
    crit = np.abs(np.abs(means - ref.mean()) - se)
    return float(grid[int(np.argmin(crit))])


def tune_gamma(estimate: Callable[[float, int], float], grid: Sequence[float],
               gamma_max: float, n_rep: int = 10, seed: int = 0) -> float:
    """Pick gamma by the bias-versus-noise rule.

    ``estimate(gamma, rep_seed)`` returns one posterior failure-probability
    estimate (including any map construction it needs).
    """
    if len(grid) == 0:
        raise ValueError("gamma grid is empty")
    if not gamma_max > max(grid):
        raise ValueError("gamma_max must exceed every grid value")
    seeds = [int(seed) * 1000 + i for i in range(n_rep)]
    ref = [estimate(gamma_max, s) for s in seeds]
    est = [[estimate(gm, s) for s in seeds] for gm in grid]
    return select_gamma(grid, est, ref)


def dirt_prior_pf(problem, gamma: float, N: int, *, runs: int = DEFAULT_RUNS, seed: int = 0,
                  schedule: TemperingSchedule | None = None, reference: ReferenceDensity | None = None,
                  cfg: CrossConfig | None = None, n_nodes: int = 33) -> tuple[EstimateReport, DirtMap]:
    dmap = build_failure_map(problem, gamma, schedule=schedule, reference=reference, cfg=cfg,
                             n_nodes=n_nodes, seed=seed)
    return estimate_prior_pf(dmap, problem, N, gamma, seed, runs), dmap


def dirt_posterior_pf(problem, gamma: float, N: int, *, runs: int = DEFAULT_RUNS, seed: int = 0,
                      schedule=None, reference=None, cfg=None,
                      n_nodes: int = 33) -> tuple[EstimateReport, DirtMap, DirtMap]:
    kw = dict(schedule=schedule, reference=reference, cfg=cfg, n_nodes=n_nodes)
    map_q = build_failure_map(problem, gamma, seed=[seed, 1], **kw)
    map_z = build_evidence_map(problem, seed=[seed, 2], **kw)
    return estimate_posterior_pf(map_q, map_z, problem, N, gamma, seed, runs), map_q, map_z
