import csv
import json
import subprocess
import sys

import pytest

from dirtrel.cli import main

LINEAR_DIRT = """\
problem:
  name: linear
  d: {d}
  alpha: 3.5
method:
  name: dirt
  rank: 2
  layers: {layers}
  n_nodes: 17
  N: 1000
runs: 2
seed: 3
"""


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def without_seconds(rows):
    return [{k: v for k, v in r.items() if k != "seconds"} for r in rows]


class TestBuildMap:
    def test_smoke_and_determinism(self, tmp_path):
        cfg = write(tmp_path, LINEAR_DIRT.format(d=2, layers=4))
        assert main(["build-map", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["build-map", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "map.json").read_bytes()
        assert a == (tmp_path / "b" / "map.json").read_bytes()
        report = json.loads((tmp_path / "a" / "build_report.json").read_text())
        fmap = report["maps"]["failure"]
        assert fmap["max_rank"] <= 2 and fmap["layers"] == 4 and fmap["evals"] > 0

    def test_twelve_layer_build_d25(self, tmp_path):
        cfg = write(tmp_path, LINEAR_DIRT.format(d=25, layers=12))
        assert main(["build-map", "--config", cfg, "--out", str(tmp_path)]) == 0
        fmap = json.loads((tmp_path / "build_report.json").read_text())["maps"]["failure"]
        assert fmap["layers"] == 12 and fmap["max_rank"] <= 2
        assert fmap["lsf_evals"] > 0

    def test_needs_dirt(self, tmp_path, capsys):
        cfg = write(tmp_path, "problem:\n  name: linear\nmethod:\n  name: mc\n")
        assert main(["build-map", "--config", cfg, "--out", str(tmp_path)]) == 3


class TestEstimate:
    def test_mc_always_fails(self, tmp_path):
        cfg = write(tmp_path, "problem:\n  name: linear\n  alpha: -50\nmethod:\n  name: mc\n"
                              "  N: 1000\nruns: 3\n")
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 0
        row = read_rows(tmp_path / "estimate.csv")[0]
        assert float(row["estimate"]) == 1.0 and float(row["cov"]) == 0.0
        assert row["lsf_evals"] == "3000" and row["method"] == "mc"

    def test_same_seed_same_rows(self, tmp_path):
        cfg = write(tmp_path, LINEAR_DIRT.format(d=2, layers=4))
        for out in ("a", "b"):
            assert main(["estimate", "--config", cfg, "--out", str(tmp_path / out)]) == 0
        a, b = (read_rows(tmp_path / o / "estimate.csv") for o in ("a", "b"))
        assert without_seconds(a) == without_seconds(b)
        assert float(a[0]["estimate"]) > 0

    def test_reproducible_bytes(self, tmp_path):
        cfg = write(tmp_path, LINEAR_DIRT.format(d=2, layers=4))
        args = ["estimate", "--config", cfg, "--reproducible", "--out", str(tmp_path / "o")]
        names = ("estimate.csv", "estimate.json")
        assert main(args) == 0
        first = [(tmp_path / "o" / n).read_bytes() for n in names]
        assert main(args) == 0
        assert first == [(tmp_path / "o" / n).read_bytes() for n in names]

    def test_seed_override(self, tmp_path):
        cfg = write(tmp_path, LINEAR_DIRT.format(d=2, layers=4))
        main(["estimate", "--config", cfg, "--seed", "11", "--out", str(tmp_path)])
        assert read_rows(tmp_path / "estimate.csv")[0]["seed"] == "11"

    def test_map_reuse(self, tmp_path):
        cfg = write(tmp_path, LINEAR_DIRT.format(d=2, layers=4))
        main(["build-map", "--config", cfg, "--out", str(tmp_path / "m")])
        main(["estimate", "--config", cfg, "--out", str(tmp_path / "fresh")])
        mp = str(tmp_path / "m" / "map.json")
        assert main(["estimate", "--config", cfg, "--map", mp, "--out", str(tmp_path / "re")]) == 0
        fresh, reused = (read_rows(tmp_path / o / "estimate.csv")[0] for o in ("fresh", "re"))
        assert fresh["estimate"] == reused["estimate"]
        detail = json.loads((tmp_path / "re" / "estimate.json").read_text())
        assert detail["map"] == mp

    def test_map_for_other_problem(self, tmp_path):
        cfg = write(tmp_path, LINEAR_DIRT.format(d=2, layers=4))
        main(["build-map", "--config", cfg, "--out", str(tmp_path / "m")])
        other = write(tmp_path, LINEAR_DIRT.format(d=3, layers=4), "other.yaml")
        code = main(["estimate", "--config", other, "--map", str(tmp_path / "m" / "map.json"),
                     "--out", str(tmp_path)])
        assert code == 3

    def test_config_error_exit(self, tmp_path, capsys):
        cfg = write(tmp_path, "problem:\n  name: linear\n  dd: 2\nmethod:\n  name: mc\n")
        assert main(["estimate", "--config", cfg]) == 3
        assert "line 3" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["estimate", "--config", str(tmp_path / "nope.yaml")]) == 3

    def test_budget_exit(self, tmp_path, capsys):
        cfg = write(tmp_path, LINEAR_DIRT.format(d=2, layers=4) .replace("  N: 1000\n",
                                                                         "  N: 1000\n  max_evals: 10\n"))
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 4

    def test_numerical_exit(self, tmp_path):
        cfg = write(tmp_path, "problem:\n  name: corroded_beam\n  inner_samples: 100\n"
                              "method:\n  name: bus_sus\n  n_per_level: 100\n  log_c: -100\n"
                              "runs: 1\n")
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 2

    def test_mc_rejects_data(self, tmp_path):
        cfg = write(tmp_path, "problem:\n  name: corroded_beam\nmethod:\n  name: mc\n")
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 3


class TestBenchmark:
    def test_filtered_cell(self, tmp_path):
        out = tmp_path / "bench"
        code = main(["benchmark", "linear_dim_sweep", "--filter", "d=2 * sus", "--runs", "2",
                     "--out", str(out), "--reproducible"])
        assert code == 0
        rows = read_rows(out / "benchmark_linear_dim_sweep.csv")
        assert len(rows) == 1
        assert rows[0]["suite"] == "linear_dim_sweep" and rows[0]["d"] == "2"
        assert rows[0]["alpha_or_update"] == "3.5" and int(rows[0]["lsf_evals"]) > 0
        detail = json.loads((out / "benchmark_linear_dim_sweep.json").read_text())
        assert detail[0]["seed"] == int(rows[0]["seed"])
        assert "d=2 alpha=3.5" in (out / "benchmark_linear_dim_sweep.txt").read_text()

    def test_deterministic_and_jobs(self, tmp_path):
        args = ["benchmark", "linear_dim_sweep", "--filter", "d=2 *", "--runs", "2",
                "--reproducible"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--jobs", "2", "--out", str(tmp_path / "b")]) == 0
        name = "benchmark_linear_dim_sweep.csv"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        methods = [r["method"] for r in read_rows(tmp_path / "a" / name)]
        assert methods == ["dirt", "sus", "ce"]

    def test_no_match(self, tmp_path):
        assert main(["benchmark", "cantilever", "--filter", "nothing*", "--out",
                     str(tmp_path)]) == 3

    @pytest.mark.parametrize("suite,n", [("linear_dim_sweep", 15), ("linear_alpha_sweep", 18),
                                         ("corroded_beam", 6), ("cantilever", 9)])
    def test_suite_layout(self, suite, n):
        from dirtrel.runner import suite_cells
        cells = suite_cells(suite)
        assert len(cells) == n
        if suite == "linear_dim_sweep":
            assert sorted({p["d"] for _, p, _ in cells}) == [2, 25, 50, 75, 100]
        if suite == "linear_alpha_sweep":
            assert sorted({p["alpha"] for _, p, _ in cells}) == [2.5, 3.5, 4.5, 5.5, 6.5, 7.5]
        if suite == "corroded_beam":
            assert sorted({p["update"] for _, p, _ in cells}) == [1, 2]


def test_tune_gamma(tmp_path):
    cfg = write(tmp_path, LINEAR_DIRT.format(d=2, layers=4)
                + "tune:\n  grid: [2, 5]\n  gamma_max: 50\n  n_rep: 2\n")
    assert main(["tune-gamma", "--config", cfg, "--out", str(tmp_path)]) == 0
    result = json.loads((tmp_path / "tune_gamma.json").read_text())
    assert result["gamma"] in (2.0, 5.0)
    assert len(result["estimates"]["50.0"]) == 2


def test_bad_runs(tmp_path):
    assert main(["benchmark", "cantilever", "--runs", "0"]) == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dirtrel", "--help"], capture_output=True,
                         text=True, check=True)
    for sub in ("build-map", "estimate", "benchmark", "tune-gamma"):
        assert sub in out.stdout
