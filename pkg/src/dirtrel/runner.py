"""Problem and method factories plus the benchmark suites driven by the CLI.

Everything here works on the plain dictionaries produced by
:mod:`dirtrel.config`, so cells can be shipped to worker processes.
"""

from __future__ import annotations

import fnmatch
import json
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from .config import TUNE_KEYS, ConfigError, RunConfig
from .cross import CrossBudgetError, CrossConfig
from .estimators import (
    EstimateReport, build_evidence_map, build_failure_map, crude_mc, estimate_posterior_pf,
    estimate_prior_pf, tune_gamma,
)
from .models.cantilever import cantilever_problem, exact_failure_probability
from .models.corroded_beam import DATA, corroded_beam_problem
from .models.linear import linear_problem
from .transport import DirtMap, ReferenceDensity, TemperingSchedule
from .tt import TTResourceError

SNAPSHOT_FORMAT = "dirtrel.snapshot/1"

EXIT_OK, EXIT_INTERNAL, EXIT_NUMERICAL, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3, 4
NUMERICAL_ERRORS = (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError)


def exit_code_for(exc: BaseException) -> int:
    """2 numerical, 3 config, 4 budget, 1 anything else; follows ``__cause__``."""
    seen = exc
    while seen is not None:
        if isinstance(seen, (CrossBudgetError, TTResourceError)):
            return EXIT_BUDGET
        seen = seen.__cause__
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NUMERICAL_ERRORS):
        return EXIT_NUMERICAL
    return EXIT_INTERNAL


# ---------------------------------------------------------------------------
# factories
# ---------------------------------------------------------------------------


def make_problem(block: dict):
    name = block["name"]
    try:
        if name == "linear":
            return linear_problem(block["d"], block["alpha"])
        if name == "corroded_beam":
            data = block["data"] if block.get("data") is not None else DATA[:block["update"]]
            return corroded_beam_problem(data, block["inner_samples"], block["inner_seed"])
        if name == "cantilever":
            return cantilever_problem(
                M=block["M"], corr_length=block["corr_length"], m_obs=block["m_obs"],
                noise_std=block["noise_std"], noise_corr_length=block["noise_corr_length"],
                seed=block["data_seed"], n_mesh=block["n_mesh"],
                box_half_width=block["box_half_width"])
    except ValueError as exc:
        raise ConfigError(f"problem {name!r}: {exc}") from exc
    raise ConfigError(f"unknown problem {name!r}")


def problem_label(block: dict) -> tuple[int | str, str]:
    """(d, alpha_or_update) columns of a CSV row."""
    name = block["name"]
    if name == "linear":
        return block["d"], block["alpha"]
    if name == "corroded_beam":
        upd = len(block["data"]) if block.get("data") is not None else block["update"]
        return 4, upd
    return block["M"], block["corr_length"]


def dirt_settings(method: dict):
    if method["beta_ratio"] is not None:
        schedule = TemperingSchedule.from_ratio(method["beta0"], method["beta_ratio"])
    else:
        schedule = TemperingSchedule.geometric(method["layers"], method["beta0"])
    cfg = CrossConfig(max_rank=method["rank"], tol=method["tol"], iter_max=method["sweeps"],
                      max_evals=method["max_evals"])
    reference = ReferenceDensity(method["reference_std"], method["half_width"])
    return dict(schedule=schedule, reference=reference, cfg=cfg, n_nodes=method["n_nodes"])


def build_maps(problem, method: dict, seed: int) -> dict[str, DirtMap]:
    """Failure map (and evidence map for problems with data)."""
    kw = dirt_settings(method)
    if problem.has_data:
        return {"failure": build_failure_map(problem, method["gamma"], seed=[seed, 1], **kw),
                "evidence": build_evidence_map(problem, seed=[seed, 2], **kw)}
    return {"failure": build_failure_map(problem, method["gamma"], seed=seed, **kw)}


def estimate_with_maps(problem, maps: dict[str, DirtMap], method: dict, seed: int,
                       runs: int) -> EstimateReport:
    if problem.has_data:
        if "evidence" not in maps:
            raise ConfigError("posterior problems need a snapshot with an evidence map")
        return estimate_posterior_pf(maps["failure"], maps["evidence"], problem, method["N"],
                                     method["gamma"], seed, runs)
    return estimate_prior_pf(maps["failure"], problem, method["N"], method["gamma"], seed, runs)


def run_method(problem, method: dict, seed: int, runs: int,
               maps: dict[str, DirtMap] | None = None) -> EstimateReport:
    name = method["name"]
    if name == "dirt":
        if maps is None:
            maps = build_maps(problem, method, seed)
        return estimate_with_maps(problem, maps, method, seed, runs)
    if maps is not None:
        raise ConfigError("--map only applies to the dirt method")
    if name == "mc":
        if problem.has_data:
            raise ConfigError("mc estimates prior failure probabilities only; use dirt, "
                              "bus_sus or ce for problems with data")
        return crude_mc(problem, method["N"], seed, runs)
    if name == "sus":
        if problem.has_data:
            raise ConfigError("sus ignores the data; use bus_sus for problems with data")
        cfg = bl.SusConfig(method["n_per_level"], method["p0"], method["max_levels"])
        return bl.problem_sus(problem, cfg, seed, runs)
    if name == "bus_sus":
        cfg = bl.SusConfig(method["n_per_level"], method["p0"], method["max_levels"])
        return bl.bus_sus_posterior(problem, cfg, method["log_c"], seed, runs)
    if name == "ce":
        cfg = bl.CeConfig(method["n_per_level"], method["elite_fraction"], method["max_levels"])
        try:
            if problem.has_data:
                return bl.bus_ce_posterior(problem, cfg, method["log_c"], seed, runs)
            return bl.problem_ce(problem, cfg, seed, runs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown method {name!r}")


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def snapshot_dumps(maps: dict[str, DirtMap], cfg: RunConfig) -> str:
    data = {
        "format": SNAPSHOT_FORMAT,
        "problem": cfg.problem,
        "method": cfg.method,
        "seed": cfg.seed,
        "maps": {k: m.to_dict() for k, m in maps.items()},
    }
    return json.dumps(data, sort_keys=True, indent=1)


def snapshot_loads(text: str, cfg: RunConfig | None = None) -> dict[str, DirtMap]:
    data = json.loads(text)
    if data.get("format") != SNAPSHOT_FORMAT:
        raise ConfigError(f"not a map snapshot (format {data.get('format')!r})")
    if cfg is not None and data["problem"] != cfg.problem:
        raise ConfigError("map snapshot was built for a different problem block")
    return {k: DirtMap.from_dict(v) for k, v in data["maps"].items()}


def build_report(maps: dict[str, DirtMap], seed: int) -> dict:
    out = {"seed": seed, "maps": {}}
    for key, m in maps.items():
        out["maps"][key] = {
            "layers": len(m.layers),
            "betas": list(m.schedule.layer_betas),
            "evals": m.evals,
            "lsf_evals": m.meta.get("lsf_evals", 0),
            "likelihood_evals": m.meta.get("likelihood_evals", 0),
            "max_rank": max(max(layer.tt.ranks) for layer in m.layers),
            "cross": [layer.report.to_dict() for layer in m.layers],
        }
    return out


# ---------------------------------------------------------------------------
# benchmark suites
# ---------------------------------------------------------------------------

# gamma used per reliability index: roughly alpha + 2, so the sigmoid stays
# resolved on the grid while its bias is small against the failure tail
LINEAR_GAMMA = {2.5: 4.0, 3.5: 5.0, 4.5: 7.0, 5.5: 8.0, 6.5: 9.0, 7.5: 10.0}

LINEAR_DIRT = {"name": "dirt", "rank": 2, "layers": 12, "beta0": 1e-4, "beta_ratio": None,
               "gamma": 5.0, "n_nodes": 17, "sweeps": 1, "tol": 1e-4, "max_evals": None,
               "N": 10_000, "reference_std": 3.0, "half_width": 4.0}
SUS = {"name": "sus", "n_per_level": 3000, "p0": 0.1, "max_levels": 50}
BUS_SUS = {"name": "bus_sus", "n_per_level": 3000, "p0": 0.1, "max_levels": 50, "log_c": None}
CE = {"name": "ce", "n_per_level": 3000, "elite_fraction": 0.1, "max_levels": 50, "log_c": None}
BEAM_DIRT = dict(LINEAR_DIRT, n_nodes=33, beta_ratio=10.0, gamma=10.0)
# deflections are O(1e-2) m, so the sigmoid needs a large sharpness
CANTILEVER_DIRT = dict(LINEAR_DIRT, n_nodes=33, beta_ratio=10.0, gamma=1000.0)


def _linear(d, alpha):
    return {"name": "linear", "d": d, "alpha": alpha}


def _beam(update):
    return {"name": "corroded_beam", "update": update, "data": None, "inner_samples": 10_000,
            "inner_seed": 0}


def _cantilever(M, corr_length=2.5):
    return {"name": "cantilever", "M": M, "corr_length": corr_length, "m_obs": 10,
            "noise_std": 1e-3, "noise_corr_length": 1.0, "data_seed": 0, "n_mesh": 201,
            "box_half_width": 6.0}


def suite_cells(suite: str) -> list[tuple[str, dict, dict]]:
    """(cell id, problem block, method block) in table order."""
    cells = []
    if suite == "linear_dim_sweep":
        for d in (2, 25, 50, 75, 100):
            for m in (dict(LINEAR_DIRT, gamma=LINEAR_GAMMA[3.5]), SUS, CE):
                cells.append((f"d={d} alpha=3.5 {m['name']}", _linear(d, 3.5), m))
    elif suite == "linear_alpha_sweep":
        for a in (2.5, 3.5, 4.5, 5.5, 6.5, 7.5):
            for m in (dict(LINEAR_DIRT, gamma=LINEAR_GAMMA[a]), SUS, CE):
                cells.append((f"d=100 alpha={a} {m['name']}", _linear(100, a), m))
    elif suite == "corroded_beam":
        for u in (1, 2):
            for m in (BUS_SUS, CE, BEAM_DIRT):
                cells.append((f"update={u} {m['name']}", _beam(u), m))
    elif suite == "cantilever":
        for M in (5, 10, 20):
            for m in (BUS_SUS, CE, CANTILEVER_DIRT):
                cells.append((f"M={M} lc=2.5 {m['name']}", _cantilever(M), m))
    else:
        raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")
    return cells


SUITES = ("linear_dim_sweep", "linear_alpha_sweep", "corroded_beam", "cantilever")


def cell_seed(master: int, index: int) -> int:
    """Per-cell seed, fixed by the master seed and the cell's table position."""
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


@dataclass
class CellResult:
    cell: str
    problem: dict
    method: dict
    seed: int
    report: dict | None = None
    row: dict | None = None
    error: str | None = None
    exit_code: int = 0
    detail: dict = field(default_factory=dict)


def run_cell(cell: str, problem_block: dict, method_block: dict, seed: int, runs: int,
             suite: str = "") -> CellResult:
    """Run one table cell; failures are captured instead of raised."""
    res = CellResult(cell, problem_block, method_block, seed)
    d, a = problem_label(problem_block)
    t0 = time.perf_counter()
    try:
        problem = make_problem(problem_block)
        rep = run_method(problem, method_block, seed, runs)
    except Exception as exc:  # noqa: BLE001 - recorded per cell
        res.error = f"{type(exc).__name__}: {exc}"
        res.exit_code = exit_code_for(exc)
        res.detail["traceback"] = traceback.format_exc(limit=5)
        res.row = {
            "schema_version": 1, "suite": suite, "problem": problem_block["name"],
            "method": method_block["name"], "d": d, "alpha_or_update": a,
            "estimate": "nan", "cov": "nan", "lsf_evals": 0, "seed": seed,
            "seconds": f"{time.perf_counter() - t0:.3f}",
        }
        return res
    res.report = json.loads(rep.to_json())
    res.row = rep.csv_row(suite, problem_block["name"], d, a)
    exact = _reference_value(problem)
    if exact is not None:
        res.detail["reference"] = exact
    return res


def _reference_value(problem) -> float | None:
    if problem.name == "linear":
        return problem.params["exact_pf"]
    if problem.name == "cantilever":
        return exact_failure_probability(problem)[0]
    return None


def _run_cell_args(args):
    return run_cell(*args)


def run_suite(suite: str, seed: int = 0, runs: int = 10, jobs: int = 1,
              pattern: str | None = None) -> list[CellResult]:
    """Run the suite's cells, in parallel if ``jobs > 1``; results keep table order."""
    cells = suite_cells(suite)
    work = [(cid, p, m, cell_seed(seed, i), runs, suite)
            for i, (cid, p, m) in enumerate(cells)
            if pattern is None or fnmatch.fnmatchcase(cid, pattern)]
    if jobs <= 1 or len(work) <= 1:
        return [run_cell(*w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_args, work))


def format_table(results: list[CellResult]) -> str:
    """Rows per parameter value, columns mean / CoV / evaluations per method."""
    methods: list[str] = []
    rows: dict[str, dict[str, CellResult]] = {}
    for r in results:
        key, method = r.cell.rsplit(" ", 1)
        if method not in methods:
            methods.append(method)
        rows.setdefault(key, {})[method] = r
    head = f"{'case':<22}" + "".join(f"| {m:^34}" for m in methods)
    sub = f"{'':<22}" + "".join(f"| {'mean':>11} {'CoV':>8} {'evals':>12} " for _ in methods)
    lines = [head, sub, "-" * len(sub)]
    for key, cols in rows.items():
        line = f"{key:<22}"
        for m in methods:
            r = cols.get(m)
            if r is None:
                line += f"| {'':>34}"
            elif r.error:
                line += f"| {'failed (exit ' + str(r.exit_code) + ')':>34}"
            else:
                rep = r.report
                line += f"| {rep['estimate']:>11.4e} {_fmt_cov(rep['cov']):>8} {rep['lsf_evals']:>12d} "
        lines.append(line)
    return "\n".join(lines) + "\n"


def _fmt_cov(c) -> str:
    return "nan" if c is None or (isinstance(c, float) and math.isnan(c)) else f"{c:.4f}"


def gamma_tuning(cfg: RunConfig) -> dict:
    """Choose gamma from ``cfg.tune`` using smoothed single-run DIRT estimates."""
    if cfg.method["name"] != "dirt":
        raise ConfigError("tune-gamma needs a dirt method block")
    tune = cfg.tune or {}
    tune = {k: tune.get(k, v[0]) for k, v in TUNE_KEYS.items()}
    problem = make_problem(cfg.problem)
    method = cfg.method
    values: dict[str, list] = {}

    def estimate(gamma, rep_seed):
        m = dict(method, gamma=float(gamma))
        rep = run_method(problem, m, rep_seed, 1)
        val = rep.smoothed_estimate if rep.smoothed_estimate is not None else rep.estimate
        values.setdefault(repr(float(gamma)), []).append(val)
        return val

    best = tune_gamma(estimate, tune["grid"], tune["gamma_max"], tune["n_rep"], cfg.seed)
    return {"gamma": best, "grid": tune["grid"], "gamma_max": tune["gamma_max"],
            "n_rep": tune["n_rep"], "estimates": values}
