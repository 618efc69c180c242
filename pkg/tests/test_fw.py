"""Frank-Wolfe, Herding and convergence certification."""

import io
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lshfw import fw, oracle
from lshfw.fw import FwConfig, certify_convergence, frank_wolfe, herding
from lshfw.lsh import HashFamilyConfig
from lshfw.maxip import build_index
from lshfw.vecspace import Dataset, make_rng, random_unit_vectors


@pytest.fixture(scope="module")
def sphere_instance():
    rng = make_rng(77)
    ds = Dataset(random_unit_vectors(2000, 16, rng))
    obj = fw.random_convex_quadratic(16, rng)
    return ds, obj


class TestObjectives:
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = make_rng(seed)
        obj = fw.random_convex_quadratic(8, rng)
        h = 1e-6
        for w in rng.standard_normal((20, 8)):
            num = np.array([(obj.eval(w + h * e) - obj.eval(w - h * e)) / (2 * h)
                            for e in np.eye(8)])
            g = obj.grad(w)
            assert np.linalg.norm(num - g) <= 1e-5 * max(1.0, np.linalg.norm(g))

    @pytest.mark.parametrize("seed", range(5))
    def test_smoothness_upper_bound(self, seed):
        rng = make_rng(seed)
        obj = fw.random_convex_quadratic(6, rng)
        for _ in range(50):
            x, y = rng.standard_normal((2, 6))
            rhs = obj.eval(x) + obj.grad(x) @ (y - x) + obj.beta / 2 * (y - x) @ (y - x)
            assert obj.eval(y) <= rhs + 1e-9

    def test_squared_distance_is_one_smooth(self):
        obj = fw.squared_distance([1.0, 2.0])
        assert obj.beta == 1.0
        np.testing.assert_array_equal(obj.grad(np.zeros(2)), [-1.0, -2.0])
        assert obj.eval(np.zeros(2)) == 2.5


class TestConfig:
    def test_step_clamped(self):
        cfg = FwConfig(c=0.5)
        assert cfg.step_size(0) == 1.0
        assert cfg.step_size(10) == pytest.approx(2 / (0.5 * 12))

    def test_standard_schedule(self):
        cfg = FwConfig()
        assert [cfg.step_size(t) for t in range(3)] == [1.0, 2 / 3, 0.5]

    @pytest.mark.parametrize("kw", [{"epsilon": 0}, {"c": 0}, {"c": 1.1}, {"max_iters": -1},
                                    {"step": 0.0}, {"step": 1.5}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FwConfig(**kw)


class TestFrankWolfe:
    def test_two_point_quadratic(self):
        ds = Dataset([[1.0, 0.0], [0.0, 1.0]])
        res = frank_wolfe(ds, fw.squared_distance([0.5, 0.5]), FwConfig(max_iters=200))
        assert res.trace.records[-1].objective <= 2 * 1 * 2 / 201
        assert len(res.trace.records) == 201

    def test_optimal_vertex_start_stops(self):
        ds = Dataset([[0.0, 0.0], [1.0, 0.0]])
        res = frank_wolfe(ds, fw.squared_distance([0.0, 0.0]),
                          FwConfig(max_iters=50, early_stop=True, w0=[0.0, 0.0]))
        assert res.trace.converged_early
        assert res.trace.records[0].gap <= 0
        assert len(res.trace.records) == 1

    def test_iterates_stay_in_hull(self, sphere_instance):
        ds, obj = sphere_instance
        rng = make_rng(1)
        cfg = FwConfig(max_iters=60, seed=2)
        w, _ = fw._initial_point(ds, cfg)
        for rec in frank_wolfe(ds, obj, cfg).trace.records[:-1]:
            assert oracle.hull_violation(ds, w, rng.standard_normal((20, ds.dim))) <= 1e-9
            w = (1 - rec.eta) * w + rec.eta * ds.points[rec.index]

    def test_weights_reconstruct_iterate(self, sphere_instance):
        ds, obj = sphere_instance
        res = frank_wolfe(ds, obj, FwConfig(max_iters=100, seed=4))
        idx = np.array(list(res.weights))
        wts = np.array(list(res.weights.values()))
        assert wts.min() >= 0 and abs(wts.sum() - 1) <= 1e-9
        np.testing.assert_allclose(wts @ ds.points[idx], res.w, atol=1e-9)

    def test_exact_matches_oracle_each_iteration(self, sphere_instance):
        ds, obj = sphere_instance
        cfg = FwConfig(max_iters=40, seed=3)
        w, _ = fw._initial_point(ds, cfg)
        for rec in frank_wolfe(ds, obj, cfg).trace.records[:-1]:
            assert rec.index == oracle.minip_direction(ds, w, obj.grad(w)).best_index
            w = (1 - rec.eta) * w + rec.eta * ds.points[rec.index]

    def test_lsh_mode_runs_and_audits(self, sphere_instance):
        ds, obj = sphere_instance
        idx = build_index(ds, 0.01, 0.9, query_scale="per_query")
        res = frank_wolfe(ds, obj, FwConfig(max_iters=100, c=0.9, index=idx, audit=True))
        tr = res.trace
        assert tr.mode == "lsh"
        assert all(r.exact_gap is not None for r in tr.records[:-1])
        assert all(r.candidates_touched <= ds.n for r in tr.records[:-1])
        c_emp = tr.empirical_c()
        assert c_emp is not None and 0 < c_emp <= 1 + 1e-12

    def test_index_dataset_mismatch(self, sphere_instance):
        ds, obj = sphere_instance
        idx = build_index(Dataset(np.eye(16)), 0.1, 0.9, d_x=1.0)
        with pytest.raises(ValueError, match="different dataset"):
            frank_wolfe(ds, obj, FwConfig(index=idx))

    def test_declare_converged_stops(self):
        ds = Dataset(make_rng(0).standard_normal((50, 4)))
        idx = build_index(ds, 0.99, 0.99, fallback="declare_converged", query_scale="per_query")
        res = frank_wolfe(ds, fw.squared_distance(np.zeros(4)),
                          FwConfig(max_iters=10, c=0.99, index=idx))
        assert res.trace.converged_early

    def test_divergence_reported(self):
        bad = fw.Objective(lambda w: float("nan"), lambda w: w, 1.0)
        with pytest.raises(fw.FwDivergence) as err:
            frank_wolfe(Dataset(np.eye(2)), bad, FwConfig(max_iters=5))
        assert len(err.value.trace.records) == 1

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            frank_wolfe(Dataset(np.empty((0, 2))), fw.squared_distance([0, 0]), FwConfig())

    def test_stop_objective(self, sphere_instance):
        ds, obj = sphere_instance
        full = frank_wolfe(ds, obj, FwConfig(max_iters=200, seed=1)).trace.objectives()
        target = float(full[50])
        res = frank_wolfe(ds, obj, FwConfig(max_iters=200, seed=1, stop_objective=target))
        assert res.trace.records[-1].objective <= target
        assert len(res.trace.records) <= 51

    def test_trace_jsonl_deterministic_and_schema(self, sphere_instance):
        ds, obj = sphere_instance
        outs = []
        for _ in range(2):
            buf = io.StringIO()
            frank_wolfe(ds, obj, FwConfig(max_iters=30, seed=5)).trace.to_jsonl(buf)
            outs.append(buf.getvalue())
        assert outs[0] == outs[1]
        lines = outs[0].splitlines()
        head = json.loads(lines[0])
        assert head["schema"] == "lshfw.trace" and head["version"] == 1
        assert len(lines) == 32
        assert "wall_nanos" not in json.loads(lines[1])

    def test_summary(self, sphere_instance):
        ds, obj = sphere_instance
        s = frank_wolfe(ds, obj, FwConfig(max_iters=20)).trace.summary()
        assert s["iterations"] == 20
        assert s["mean_candidates_touched"] == ds.n
        assert s["fallback_fraction"] == 0.0


class TestHerding:
    def test_two_vertices(self):
        res = herding(Dataset([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5], FwConfig(max_iters=300))
        for r in res.trace.records[1:]:
            assert r.objective <= 2.0 / (r.t + 1) + 1e-12

    def test_vertex_target(self):
        ds = Dataset([[1.0, 0.0], [0.0, 1.0]])
        res = herding(ds, [1.0, 0.0], FwConfig(max_iters=2, w0=[0.3, 0.7]))
        assert res.sample_sequence[0] == 0
        assert res.trace.records[-1].objective == pytest.approx(0.0, abs=1e-15)

    def test_uniform_frequencies(self):
        feats = Dataset(np.eye(4))
        res = herding(feats, np.full(4, 0.25), FwConfig(max_iters=10_000))
        freq = Counter(res.sample_sequence)
        assert max(abs(freq[k] / 10_000 - 0.25) for k in range(4)) <= 0.05

    @pytest.mark.parametrize("seed", range(10))
    def test_same_vertices_as_frank_wolfe(self, seed):
        rng = make_rng(seed)
        feats = Dataset(rng.standard_normal((40, 5)))
        mu = rng.dirichlet(np.ones(40)) @ feats.points
        cfg = FwConfig(max_iters=100, seed=seed)
        h = herding(feats, mu, cfg)
        f = frank_wolfe(feats, fw.squared_distance(mu), cfg)
        assert h.sample_sequence == f.sample_sequence

    def test_argmax_rule_differs(self):
        feats = Dataset(np.eye(3))
        mu = np.array([0.6, 0.3, 0.1])
        a = herding(feats, mu, FwConfig(max_iters=30), rule="argmin")
        b = herding(feats, mu, FwConfig(max_iters=30), rule="argmax")
        assert a.trace.records[-1].objective < b.trace.records[-1].objective

    def test_bad_rule(self):
        with pytest.raises(ValueError):
            herding(Dataset(np.eye(2)), [0.5, 0.5], FwConfig(), rule="median")


class TestCertification:
    def test_bound_values(self):
        assert fw.convergence_bound(1, 1.0, 1.0) == 1.0
        assert fw.convergence_bound(1, 1.0, 1.0, c=0.5) == 4.0
        assert fw.convergence_bound(3, 2.0, 1.0, relaxed=True) == 2.0

    def test_passes_on_exact_run(self):
        ds = Dataset([[1.0, 0.0], [0.0, 1.0]])
        tr = frank_wolfe(ds, fw.squared_distance([0.5, 0.5]), FwConfig(max_iters=200)).trace
        rep = certify_convergence(tr, 1.0, np.sqrt(2), g_star=0.0)
        assert rep.passed and rep.checked == 200
        assert "PASS" in str(rep)

    def test_detects_injected_violation(self):
        ds = Dataset([[1.0, 0.0], [0.0, 1.0]])
        tr = frank_wolfe(ds, fw.squared_distance([0.5, 0.5]), FwConfig(max_iters=20)).trace
        tr.records[5].objective = 10.0
        rep = certify_convergence(tr, 1.0, np.sqrt(2), g_star=0.0)
        assert not rep.passed and rep.first_violation == 5
        assert "t=5" in str(rep)

    def test_needs_reference(self):
        tr = frank_wolfe(Dataset(np.eye(2)), fw.squared_distance([0.5, 0.5]),
                         FwConfig(max_iters=3)).trace
        with pytest.raises(ValueError, match="g\\*"):
            certify_convergence(tr, 1.0, 1.0)

    def test_lsh_runs_certify_with_empirical_c(self):
        passed = 0
        for seed in range(10):
            rng = make_rng(300 + seed)
            ds = Dataset(random_unit_vectors(1500, 16, rng))
            obj = fw.random_convex_quadratic(16, rng)
            g_star = fw.reference_optimum(ds, obj, 2000, seed=seed)
            idx = build_index(ds, 0.01, 0.9, query_scale="per_query",
                              cfg=HashFamilyConfig(bits_per_table=10, num_tables=32, seed=seed))
            tr = frank_wolfe(ds, obj, FwConfig(max_iters=150, c=0.9, index=idx, audit=True,
                                               seed=seed)).trace
            c_emp = min(1.0, tr.empirical_c() or 1.0)
            passed += certify_convergence(tr, obj.beta, ds.max_diameter, c_emp, g_star).passed
        assert passed >= 9

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.integers(1, 6))
    def test_exact_runs_always_certify(self, seed, n, d):
        rng = make_rng(seed)
        ds = Dataset(rng.standard_normal((n, d)))
        obj = fw.random_convex_quadratic(d, rng)
        g_star = fw.reference_optimum(ds, obj, 3000, seed=seed)
        tr = frank_wolfe(ds, obj, FwConfig(max_iters=100, seed=seed)).trace
        rep = certify_convergence(tr, obj.beta, ds.max_diameter, 1.0, g_star)
        assert rep.passed, str(rep)


class TestLshIterationBudget:
    def test_reaches_eps_within_budget(self):
        # n=10^4, d=32, c=0.9: g(w_T) - g* <= eps within ceil(2 beta D^2 / (c^2 eps)) iterations
        eps, c = 0.05, 0.9
        ok = 0
        for seed in range(10):
            rng = make_rng(500 + seed)
            ds = Dataset(random_unit_vectors(10_000, 32, rng))
            obj = fw.random_convex_quadratic(32, rng)
            g_star = fw.reference_optimum(ds, obj, 3000, seed=seed)
            budget = int(np.ceil(2 * obj.beta * ds.max_diameter ** 2 / (c * c * eps)))
            idx = build_index(ds, 0.01, c, query_scale="per_query",
                              cfg=HashFamilyConfig(bits_per_table=12, num_tables=32, seed=seed))
            res = frank_wolfe(ds, obj, FwConfig(max_iters=budget, c=c, index=idx, seed=seed,
                                                stop_objective=g_star + eps))
            ok += res.trace.records[-1].objective - g_star <= eps
        assert ok >= 9
