"""Run configuration: YAML with strict keys and line-referenced errors.

Grammar (all blocks are mappings)::

    problem:
      name: linear | corroded_beam | cantilever
      <problem parameters>
    method:
      name: dirt | sus | bus_sus | ce | mc
      <method parameters>
    runs: 10          # repetitions for the CoV
    seed: 0           # master seed
    out: results      # output directory
    tune:             # only read by tune-gamma
      grid: [50, 100, 200]
      gamma_max: 6000
      n_rep: 10

Parameters and defaults are listed in ``PROBLEM_KEYS`` and ``METHOD_KEYS``.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field
from typing import Any

import yaml


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


def _pos_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 1


def _nonneg_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _real(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _pos_real(v):
    return _real(v) and v > 0


def _unit(v):
    return _real(v) and 0 < v < 1


def _opt(check):
    return lambda v: v is None or check(v)


def _data_pairs(v):
    return isinstance(v, list) and all(
        isinstance(p, list) and len(p) == 2 and all(_real(x) for x in p) for p in v)


# key -> (default, validator, description)
PROBLEM_KEYS: dict[str, dict[str, tuple[Any, Any, str]]] = {
    "linear": {
        "d": (2, _pos_int, "dimension"),
        "alpha": (3.5, _real, "reliability index"),
    },
    "corroded_beam": {
        "update": (1, lambda v: v in (0, 1, 2), "number of data points used (0 = prior)"),
        "data": (None, _opt(_data_pairs), "explicit [[D_b, D_h], ...] overriding update"),
        "inner_samples": (10_000, _pos_int, "inner sample size of the conditional Pf"),
        "inner_seed": (0, _nonneg_int, "seed of the inner sample"),
    },
    "cantilever": {
        "M": (10, _pos_int, "KL modes"),
        "corr_length": (2.5, _pos_real, "prior correlation length"),
        "m_obs": (10, _pos_int, "number of sensors"),
        "noise_std": (1e-3, _pos_real, "noise standard deviation"),
        "noise_corr_length": (1.0, _pos_real, "noise correlation length"),
        "data_seed": (0, _nonneg_int, "seed of the synthetic truth and noise"),
        "n_mesh": (201, lambda v: _pos_int(v) and v >= 3, "mesh nodes"),
        "box_half_width": (6.0, _pos_real, "half width of the coefficient box"),
    },
}

METHOD_KEYS: dict[str, dict[str, tuple[Any, Any, str]]] = {
    "dirt": {
        "rank": (2, _pos_int, "maximum TT rank"),
        "layers": (12, _pos_int, "number of layers (geometric schedule)"),
        "beta0": (1e-4, _unit, "first tempering exponent"),
        "beta_ratio": (None, _opt(lambda v: _real(v) and v > 1), "ratio schedule instead of layers"),
        "gamma": (5.0, _pos_real, "sigmoid sharpness"),
        "n_nodes": (17, lambda v: _pos_int(v) and v >= 2, "grid nodes per dimension"),
        "sweeps": (1, _pos_int, "maximum cross iterations per layer"),
        "tol": (1e-4, _pos_real, "cross stopping tolerance"),
        "max_evals": (None, _opt(_pos_int), "cross evaluation budget per layer"),
        "N": (10_000, _pos_int, "importance samples per run"),
        "reference_std": (3.0, _pos_real, "reference standard deviation"),
        "half_width": (4.0, _pos_real, "reference box half width"),
    },
    "sus": {
        "n_per_level": (3000, _pos_int, "samples per level"),
        "p0": (0.1, _unit, "level probability"),
        "max_levels": (50, _pos_int, "level cap"),
    },
    "bus_sus": {
        "n_per_level": (3000, _pos_int, "samples per level"),
        "p0": (0.1, _unit, "level probability"),
        "max_levels": (50, _pos_int, "level cap"),
        "log_c": (None, _opt(_real), "log of the likelihood bound"),
    },
    "ce": {
        "n_per_level": (3000, _pos_int, "samples per level"),
        "elite_fraction": (0.1, _unit, "elite fraction"),
        "max_levels": (50, _pos_int, "level cap"),
        "log_c": (None, _opt(_real), "log likelihood bound (posterior problems)"),
    },
    "mc": {
        "N": (100_000, _pos_int, "samples per run"),
    },
}

TUNE_KEYS = {
    "grid": ([50.0, 100.0, 200.0, 500.0, 1000.0],
             lambda v: isinstance(v, list) and len(v) > 0 and all(_pos_real(x) for x in v),
             "gamma grid"),
    "gamma_max": (6000.0, _pos_real, "sharp reference gamma"),
    "n_rep": (10, lambda v: _pos_int(v) and v >= 2, "repetitions per gamma"),
}

TOP_KEYS = {
    "runs": (10, _pos_int, "repetitions"),
    "seed": (0, _nonneg_int, "master seed"),
    "out": ("results", lambda v: isinstance(v, str) and v != "", "output directory"),
}


@dataclass
class RunConfig:
    problem: dict
    method: dict
    runs: int = 10
    seed: int = 0
    out: str = "results"
    tune: dict | None = None
    source: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        out = {"problem": dict(self.problem), "method": dict(self.method),
               "runs": self.runs, "seed": self.seed, "out": self.out}
        if self.tune is not None:
            out["tune"] = dict(self.tune)
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_EXP_FLOAT = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$")


def _to_python(node):
    """Plain Python data from a composed node, plus a map from key paths to lines."""
    lines: dict[tuple, int] = {}

    def walk(n, path):
        lines[path] = n.start_mark.line + 1
        if isinstance(n, yaml.MappingNode):
            out = {}
            for k, v in n.value:
                key = yaml.safe_load(yaml.serialize(k))
                if key in out:
                    raise ConfigError(f"duplicate key {key!r}", k.start_mark.line + 1)
                lines[path + (key,)] = k.start_mark.line + 1
                out[key] = walk(v, path + (key,))
            return out
        if isinstance(n, yaml.SequenceNode):
            return [walk(v, path + (i,)) for i, v in enumerate(n.value)]
        if n.style is None and n.tag == "tag:yaml.org,2002:str" and _EXP_FLOAT.match(n.value):
            return float(n.value)  # YAML 1.1 reads 1e-4 as a string
        return yaml.safe_load(yaml.serialize(n))

    return walk(node, ()), lines


def _fill(block: dict, spec: dict, path: tuple, lines: dict, where: str) -> dict:
    out = {}
    for key, value in block.items():
        if key not in spec:
            raise ConfigError(f"unknown key {key!r} in {where}; allowed: {sorted(spec)}",
                              lines.get(path + (key,)))
        default, check, desc = spec[key]
        if isinstance(value, int) and not isinstance(value, bool) and isinstance(default, float):
            value = float(value)
        if not check(value):
            raise ConfigError(f"invalid value {value!r} for {key!r} ({desc})",
                              lines.get(path + (key,)))
        out[key] = value
    for key, (default, _, _) in spec.items():
        out.setdefault(key, copy.deepcopy(default))
    return out


def _named_block(data, key, table, lines):
    if key not in data:
        raise ConfigError(f"missing {key!r} block", 1)
    block = data[key]
    if not isinstance(block, dict):
        raise ConfigError(f"{key!r} must be a mapping", lines.get((key,)))
    name = block.get("name")
    if name not in table:
        raise ConfigError(f"{key}.name must be one of {sorted(table)}, got {name!r}",
                          lines.get((key, "name"), lines.get((key,))))
    rest = {k: v for k, v in block.items() if k != "name"}
    filled = _fill(rest, table[name], (key,), lines, f"{key} block for {name!r}")
    return {"name": name, **filled}


def parse_config(text: str, source: str | None = None) -> RunConfig:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {exc}", mark.line + 1 if mark else None) from exc
    if node is None:
        raise ConfigError("empty config", 1)
    data, lines = _to_python(node)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1)
    allowed = set(TOP_KEYS) | {"problem", "method", "tune"}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown top-level key {key!r}; allowed: {sorted(allowed)}",
                              lines.get((key,)))
    problem = _named_block(data, "problem", PROBLEM_KEYS, lines)
    method = _named_block(data, "method", METHOD_KEYS, lines)
    top = _fill({k: data[k] for k in TOP_KEYS if k in data}, TOP_KEYS, (), lines, "top level")
    tune = None
    if "tune" in data:
        if not isinstance(data["tune"], dict):
            raise ConfigError("'tune' must be a mapping", lines.get(("tune",)))
        tune = _fill(data["tune"], TUNE_KEYS, ("tune",), lines, "tune block")
        if not tune["gamma_max"] > max(tune["grid"]):
            raise ConfigError("tune.gamma_max must exceed every grid value",
                              lines.get(("tune", "gamma_max")))
    cfg = RunConfig(problem, method, tune=tune, source=source, **top)
    _cross_checks(cfg, lines)
    return cfg


def _cross_checks(cfg: RunConfig, lines):
    m = cfg.method
    if m["name"] in ("sus", "bus_sus"):
        ns = m["n_per_level"] * m["p0"]
        if abs(ns - round(ns)) > 1e-9 or round(ns) < 2:
            raise ConfigError("n_per_level * p0 must be an integer >= 2",
                              lines.get(("method", "p0"), lines.get(("method",))))
    if m["name"] == "dirt" and m["beta_ratio"] is not None:
        n = math.log(1 / m["beta0"]) / math.log(m["beta_ratio"])
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("beta0 * beta_ratio**k must reach 1 exactly",
                              lines.get(("method", "beta_ratio")))
    if m["name"] == "ce":
        n_elite = math.ceil(m["elite_fraction"] * m["n_per_level"])
        if n_elite < 2:
            raise ConfigError("elite_fraction * n_per_level must give at least 2 elite samples",
                              lines.get(("method", "elite_fraction"), lines.get(("method",))))


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, source=path)
