"""Command-line interface."""

import json

import numpy as np
import pytest
from jsonschema import validate

from lshfw import acmdp, cli
from lshfw.vecspace import Dataset, load_dataset


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def two_points(tmp_path):
    Dataset([[1.0, 0.0], [0.0, 1.0]]).to_csv(tmp_path / "pts.csv")
    return tmp_path


class TestGen:
    def test_uniform_sphere(self, tmp_path):
        assert run("gen", "uniform_sphere", "--n", 50, "--d", 4, "--out", tmp_path / "u.bin") == 0
        pts = load_dataset(tmp_path / "u.bin").points
        assert pts.shape == (50, 4)
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)
        man = json.loads((tmp_path / "u.bin.manifest.json").read_text())
        assert len(man["config_hash"]) == 16

    def test_planted_manifest(self, tmp_path):
        out = tmp_path / "p.csv"
        assert run("gen", "planted_maxip", "--n", 200, "--d", 8, "--ip", 0.8, "--out", out) == 0
        man = json.loads((tmp_path / "p.csv.manifest.json").read_text())
        pts = load_dataset(out).points
        q = np.array(man["query"])
        assert pts[man["planted_index"]] @ q == pytest.approx(0.8, abs=1e-12)
        assert man["planted_ip"] == pytest.approx(0.8, abs=1e-12)

    def test_gridworld_round_trip(self, tmp_path):
        out = tmp_path / "g.json"
        assert run("gen", "gridworld", "--rows", 3, "--cols", 3, "--out", out) == 0
        mdp = acmdp.Acmdp.load(out)
        assert mdp.n_states == 9

    @pytest.mark.parametrize("n", [0, -5])
    def test_bad_n(self, tmp_path, capsys, n):
        assert run("gen", "uniform_sphere", "--n", n, "--out", tmp_path / "x.csv") == 2
        assert "n must be" in capsys.readouterr().err

    def test_deterministic(self, tmp_path):
        for name in ("a.bin", "b.bin"):
            run("gen", "uniform_sphere", "--n", 30, "--d", 3, "--seed", 4, "--out", tmp_path / name)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


class TestBuildIndex:
    def test_build_and_use(self, tmp_path):
        run("gen", "uniform_sphere", "--n", 300, "--d", 6, "--out", tmp_path / "u.csv")
        assert run("build-index", "--data", tmp_path / "u.csv", "--out", tmp_path / "u.idx",
                   "--K", 8, "--L", 4, "--query-scale", "per_query") == 0
        cfg = {"algo": "fw", "data": "u.csv", "max_iters": 20, "search": "lsh", "c": 0.9,
               "objective": {"kind": "random_quadratic", "seed": 1},
               "index": {"path": "u.idx"}}
        assert run("run", write_config(tmp_path / "c.json", cfg), "--out-dir", tmp_path / "o") == 0
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["iterations"] == 20

    def test_missing_data(self, tmp_path, capsys):
        assert run("build-index", "--data", tmp_path / "nope.csv", "--out", tmp_path / "x") == 2
        assert "lshfw build-index: error" in capsys.readouterr().err


class TestRun:
    def test_two_point_quadratic(self, two_points):
        cfg = {"algo": "fw", "data": "pts.csv", "max_iters": 200,
               "objective": {"kind": "squared_distance", "mu": [0.5, 0.5]}}
        out = two_points / "out"
        assert run("run", write_config(two_points / "c.json", cfg), "--out-dir", out) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["final_objective"] <= 0.02
        lines = (out / "trace.jsonl").read_text().splitlines()
        assert len(lines) == 202
        assert json.loads(lines[0])["config_hash"] == summary["config_hash"]
        assert summary["beta"] == 1.0 and summary["D"] == pytest.approx(np.sqrt(2))

    def test_traces_byte_identical(self, two_points):
        cfg = {"algo": "fw", "data": "pts.csv", "max_iters": 50, "seed": 3,
               "objective": {"kind": "squared_distance", "mu": [0.3, 0.7]}}
        c = write_config(two_points / "c.json", cfg)
        run("run", c, "--out-dir", two_points / "a")
        run("run", c, "--out-dir", two_points / "b")
        assert (two_points / "a" / "trace.jsonl").read_bytes() == \
            (two_points / "b" / "trace.jsonl").read_bytes()

    def test_gnuplot(self, two_points):
        cfg = {"algo": "fw", "data": "pts.csv", "max_iters": 10, "g_star": 0.0,
               "objective": {"kind": "squared_distance", "mu": [0.5, 0.5]}}
        gp = two_points / "h.dat"
        assert run("run", write_config(two_points / "c.json", cfg), "--out-dir", two_points,
                   "--gnuplot", gp) == 0
        rows = np.loadtxt(gp)
        assert rows.shape == (11, 2)
        np.testing.assert_array_equal(rows[:, 0], np.arange(11))

    def test_gnuplot_needs_g_star(self, two_points, capsys):
        cfg = {"algo": "fw", "data": "pts.csv", "max_iters": 5,
               "objective": {"kind": "squared_distance", "mu": [0.5, 0.5]}}
        assert run("run", write_config(two_points / "c.json", cfg), "--out-dir", two_points,
                   "--gnuplot", two_points / "h.dat") == 2
        assert "g_star" in capsys.readouterr().err

    def test_herding(self, two_points):
        cfg = {"algo": "herding", "data": "pts.csv", "max_iters": 40, "mu": "mean"}
        assert run("run", write_config(two_points / "c.json", cfg), "--out-dir", two_points) == 0
        summary = json.loads((two_points / "summary.json").read_text())
        assert summary["final_objective"] <= 2.0 / 41

    def test_sfwpo_monotone(self, tmp_path):
        run("gen", "gridworld", "--out", tmp_path / "g.json")
        cfg = {"algo": "sfwpo", "mdp": "g.json", "max_iters": 50, "seed": 1}
        assert run("run", write_config(tmp_path / "c.json", cfg), "--out-dir", tmp_path,
                   "--gnuplot", tmp_path / "gap.dat") == 0
        recs = [json.loads(l) for l in (tmp_path / "trace.jsonl").read_text().splitlines()[1:]]
        J = np.array([r["J"] for r in recs])
        assert np.all(np.diff(J) >= -1e-9)
        assert np.loadtxt(tmp_path / "gap.dat").shape[1] == 2

    @pytest.mark.parametrize("cfg,msg", [
        ({"algo": "fw"}, "data"),
        ({"algo": "sfwpo", "data": "x"}, "mdp"),
        ({"algo": "fw", "data": "pts.csv", "bogus": 1}, "bogus"),
        ({"algo": "fw", "data": "pts.csv", "c": 1.5}, "1.5"),
    ])
    def test_invalid_config(self, two_points, capsys, cfg, msg):
        assert run("run", write_config(two_points / "c.json", cfg)) == 2
        err = capsys.readouterr().err
        assert "lshfw run: error" in err and msg in err


class TestBench:
    def test_report_schema(self, tmp_path):
        run("gen", "uniform_sphere", "--n", 500, "--d", 8, "--out", tmp_path / "u.bin")
        cfg = {"algo": "fw", "data": "u.bin", "max_iters": 30, "c": 0.9,
               "objective": {"kind": "random_quadratic", "seed": 2},
               "index": {"bits_per_table": 8, "num_tables": 8, "query_scale": "per_query"}}
        out = tmp_path / "bench.json"
        assert run("bench", write_config(tmp_path / "c.json", cfg), "--out", out) == 0
        report = json.loads(out.read_text())
        validate(report, cli.BENCH_REPORT_SCHEMA)
        assert set(report["arms"]) == {"exact", "lsh"}
        assert report["arms"]["exact"]["mean_candidates_touched"] == 500


class TestCertify:
    def trace(self, tmp_path, iters):
        Dataset([[1.0, 0.0], [0.0, 1.0]]).to_csv(tmp_path / "pts.csv")
        cfg = {"algo": "fw", "data": "pts.csv", "max_iters": iters,
               "objective": {"kind": "squared_distance", "mu": [0.5, 0.5]}}
        run("run", write_config(tmp_path / "c.json", cfg), "--out-dir", tmp_path)
        return tmp_path / "trace.jsonl"

    def test_pass(self, tmp_path, capsys):
        t = self.trace(tmp_path, 100)
        assert run("certify", t, "--beta", 1, "--D", np.sqrt(2), "--g-star", 0) == 0
        assert json.loads(capsys.readouterr().out.splitlines()[-1])["passed"] is True

    def test_fail_with_wrong_beta(self, tmp_path):
        t = self.trace(tmp_path, 100)
        assert run("certify", t, "--beta", 1e-6, "--D", 1e-3, "--g-star", 0) == 1

    def test_missing_trace(self, tmp_path):
        assert run("certify", tmp_path / "none.jsonl", "--beta", 1, "--D", 1) == 2
