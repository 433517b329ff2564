"""Command-line entry point.

Subcommands::

    dirtrel build-map  --config run.yaml [--seed S] [--out DIR]
    dirtrel estimate   --config run.yaml [--map DIR/map.json] [--seed S] [--out DIR]
    dirtrel benchmark  SUITE [--runs R] [--filter GLOB] [--jobs J] [--seed S] [--out DIR]
    dirtrel tune-gamma --config run.yaml [--seed S] [--out DIR]

Exit codes: 0 success, 2 numerical failure, 3 invalid configuration,
4 evaluation or memory budget exhausted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .estimators import write_csv
from .runner import (
    EXIT_CONFIG, EXIT_INTERNAL, EXIT_OK, SUITES, build_maps, build_report, exit_code_for, format_table,
    make_problem, problem_label, run_method, run_suite, snapshot_dumps, snapshot_loads,
    gamma_tuning,
)

log = logging.getLogger("dirtrel")


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=float) + "\n"


def _untimed(row: dict, report: dict | None) -> None:
    """Blank wall-clock fields so repeated runs give identical bytes."""
    row["seconds"] = ""
    if report is not None:
        report["wall_time"] = None


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def cmd_build_map(args) -> int:
    cfg = _resolve(args)
    if cfg.method["name"] != "dirt":
        raise ConfigError("build-map needs a dirt method block")
    problem = make_problem(cfg.problem)
    maps = build_maps(problem, cfg.method, cfg.seed)
    _write(os.path.join(cfg.out, "map.json"), snapshot_dumps(maps, cfg))
    report = build_report(maps, cfg.seed)
    report["problem"] = cfg.problem
    _write(os.path.join(cfg.out, "build_report.json"), _json(report))
    print(f"wrote {os.path.join(cfg.out, 'map.json')}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _resolve(args)
    maps = None
    if args.map is not None:
        with open(args.map, encoding="utf-8") as fh:
            maps = snapshot_loads(fh.read(), cfg)
    problem = make_problem(cfg.problem)
    rep = run_method(problem, cfg.method, cfg.seed, cfg.runs, maps=maps)
    d, a = problem_label(cfg.problem)
    row = rep.csv_row("", cfg.problem["name"], d, a)
    report = json.loads(rep.to_json())
    if args.reproducible:
        _untimed(row, report)
    _write(os.path.join(cfg.out, "estimate.csv"), write_csv([row]))
    detail = {"config": cfg.to_dict(), "report": report, "map": args.map}
    _write(os.path.join(cfg.out, "estimate.json"), _json(detail))
    print(f"{cfg.method['name']} estimate {rep.estimate:.6e} cov {rep.cov:.4f} "
          f"lsf_evals {rep.lsf_evals}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    out = args.out or "results"
    seed = args.seed if args.seed is not None else 0
    results = run_suite(args.suite, seed=seed, runs=args.runs, jobs=args.jobs,
                        pattern=args.filter)
    if not results:
        raise ConfigError(f"no cells of {args.suite!r} match {args.filter!r}")
    if args.reproducible:
        for r in results:
            _untimed(r.row, r.report)
    stem = os.path.join(out, f"benchmark_{args.suite}")
    _write(stem + ".csv", write_csv([r.row for r in results]))
    _write(stem + ".json", _json([
        {"cell": r.cell, "seed": r.seed, "problem": r.problem, "method": r.method,
         "report": r.report, "error": r.error, "exit_code": r.exit_code, "detail": r.detail}
        for r in results]))
    table = format_table(results)
    _write(stem + ".txt", table)
    sys.stdout.write(table)
    failed = [r for r in results if r.error]
    for r in failed:
        print(f"cell {r.cell!r} failed: {r.error}", file=sys.stderr)
    if failed and len(failed) == len(results):
        return max(r.exit_code for r in failed)
    return EXIT_OK


def cmd_tune_gamma(args) -> int:
    cfg = _resolve(args)
    result = gamma_tuning(cfg)
    result["seed"] = cfg.seed
    _write(os.path.join(cfg.out, "tune_gamma.json"), _json(result))
    print(f"selected gamma {result['gamma']:g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dirtrel", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log build progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--reproducible", action="store_true",
                       help="leave timing fields blank so reruns are byte-identical")

    p = sub.add_parser("build-map", help="build and save DIRT maps")
    common(p)
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("estimate", help="run the configured estimator")
    common(p)
    p.add_argument("--map", default=None, help="map snapshot from build-map")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("benchmark", help="run a comparison suite")
    p.add_argument("suite", choices=SUITES)
    common(p, config=False)
    p.add_argument("--runs", type=int, default=10, help="repetitions per cell")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--filter", default=None, help="glob on cell ids, e.g. 'd=2 *'")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("tune-gamma", help="select the sigmoid sharpness")
    common(p)
    p.set_defaults(func=cmd_tune_gamma)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    if getattr(args, "runs", 1) < 1 or getattr(args, "jobs", 1) < 1:
        print("error: --runs and --jobs must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = exit_code_for(exc)
        if code == EXIT_INTERNAL:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
