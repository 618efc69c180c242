"""Frank-Wolfe over the convex hull of a finite point set.

One loop serves the exact baseline (linear scan for the direction), the
LSH-backed variant (direction from a :class:`~lshfw.maxip.MaxIpIndex`) and
Herding, which is Frank-Wolfe on ``g(w) = 0.5 * |w - mu|^2``.

The step is ``eta_t = min(1, 2 / (c * (t + 2)))``; with ``c = 1`` this is the
classical ``2 / (t + 2)`` schedule.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .maxip import MaxIpIndex
from .vecspace import Dataset, as_vector, make_rng, random_simplex_weights

TRACE_SCHEMA_VERSION = 1


class FwDivergence(RuntimeError):
    """Objective or gradient became non-finite; ``trace`` holds the iterations so far."""

    def __init__(self, message: str, trace: "FwTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class Objective:
    """A convex, ``beta``-smooth function given by value and gradient callables."""

    eval: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    beta: float
    name: str = "objective"
    grad_cost_hint: str | None = None


def quadratic(A, b) -> Objective:
    """``g(w) = 0.5 (w - b)^T A (w - b)`` with ``A`` symmetric PSD; ``beta = lambda_max(A)``."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    A = 0.5 * (A + A.T)
    beta = float(np.linalg.eigvalsh(A)[-1])

    def f(w):
        r = w - b
        return 0.5 * float(r @ A @ r)

    def g(w):
        return A @ (w - b)

    return Objective(f, g, beta, name="quadratic", grad_cost_hint="O(d^2)")


def squared_distance(mu) -> Objective:
    """The Herding objective ``0.5 |w - mu|^2`` (1-smooth)."""
    mu = np.asarray(mu, dtype=np.float64)

    def f(w):
        r = w - mu
        return 0.5 * float(r @ r)

    return Objective(f, lambda w: w - mu, 1.0, name="herding", grad_cost_hint="O(d)")


def random_convex_quadratic(dim: int, rng: np.random.Generator, center_scale: float = 1.5,
                            ridge: float = 0.1) -> Objective:
    """``A = M^T M / dim + ridge * I`` with Gaussian ``M``; ``b`` Gaussian scaled by ``center_scale``."""
    m = rng.standard_normal((dim, dim))
    A = m.T @ m / dim + ridge * np.eye(dim)
    b = center_scale * rng.standard_normal(dim) / math.sqrt(dim)
    return quadratic(A, b)


@dataclass
class FwConfig:
    """Solver settings.

    ``index=None`` selects exact search; otherwise directions come from the
    given :class:`MaxIpIndex` (whose fallback policy then applies).
    ``step`` is ``"standard"`` for the ``2 / (c (t + 2))`` schedule or a float
    for a fixed step. ``early_stop`` stops once the exact gap is at most
    ``epsilon`` (exact mode only). ``stop_objective`` stops as soon as
    ``g(w_t)`` drops to that value (used to time-to-target comparisons with a
    known optimum). ``audit`` runs a linear scan next to the
    LSH query to record the empirical approximation ratio.
    """

    epsilon: float = 1e-3
    c: float = 1.0
    max_iters: int = 1000
    step: str | float = "standard"
    index: MaxIpIndex | None = None
    seed: int = 0
    early_stop: bool = False
    audit: bool = False
    stop_objective: float | None = None
    w0: np.ndarray | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.c <= 1.0):
            raise ValueError("c must lie in (0, 1]")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.step != "standard":
            s = float(self.step)
            if not (0.0 < s <= 1.0):
                raise ValueError("fixed step must lie in (0, 1]")

    @property
    def mode(self) -> str:
        return "exact" if self.index is None else "lsh"

    def step_size(self, t: int) -> float:
        if self.step == "standard":
            return min(1.0, 2.0 / (self.c * (t + 2)))
        return float(self.step)


@dataclass
class IterRecord:
    t: int
    objective: float
    h: float | None = None
    index: int | None = None
    gap: float | None = None
    eta: float | None = None
    candidates_touched: int = 0
    fallback_used: bool = False
    exact_gap: float | None = None
    c_ratio: float | None = None
    wall_nanos: int = 0


@dataclass
class FwTrace:
    mode: str
    records: list[IterRecord] = field(default_factory=list)
    n: int = 0
    converged_early: bool = False
    g_star: float | None = None

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    def chosen(self) -> list[int]:
        return [r.index for r in self.records if r.index is not None]

    def set_reference(self, g_star: float) -> None:
        """Attach an estimate of ``min g`` and fill ``h_t = g(w_t) - g*``."""
        self.g_star = float(g_star)
        for r in self.records:
            r.h = r.objective - self.g_star

    def empirical_c(self) -> float | None:
        """Smallest audited ratio ``<s_lsh - w, grad> / <s_exact - w, grad>``."""
        vals = [r.c_ratio for r in self.records if r.c_ratio is not None]
        return min(vals) if vals else None

    def fallback_fraction(self) -> float:
        steps = [r for r in self.records if r.index is not None]
        return sum(r.fallback_used for r in steps) / len(steps) if steps else 0.0

    def mean_candidates(self) -> float:
        steps = [r for r in self.records if r.index is not None or r.fallback_used]
        return float(np.mean([r.candidates_touched for r in steps])) if steps else 0.0

    def first_reaching(self, eps: float) -> int | None:
        """First ``t`` with ``h_t <= eps`` (needs :meth:`set_reference`)."""
        for r in self.records:
            if r.h is not None and r.h <= eps:
                return r.t
        return None

    def to_jsonl(self, fh, timings: bool = False, header: dict | None = None) -> None:
        head = {"schema": "lshfw.trace", "version": TRACE_SCHEMA_VERSION, "mode": self.mode,
                "n": self.n}
        if header:
            head.update(header)
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for r in self.records:
            rec = asdict(r)
            if not timings:
                rec.pop("wall_nanos")
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "mode": self.mode,
            "iterations": max(0, len(self.records) - 1),
            "final_objective": None if last is None else last.objective,
            "final_gap": next((r.gap for r in reversed(self.records) if r.gap is not None), None),
            "total_candidates_touched": int(sum(r.candidates_touched for r in self.records)),
            "mean_candidates_touched": self.mean_candidates(),
            "fallback_fraction": self.fallback_fraction(),
            "converged_early": self.converged_early,
            "empirical_c": self.empirical_c(),
            "wall_nanos": int(sum(r.wall_nanos for r in self.records)),
        }


@dataclass
class FwResult:
    w: np.ndarray
    trace: FwTrace
    weights: dict[int, float]

    @property
    def sample_sequence(self) -> list[int]:
        return self.trace.chosen()


class _HullWeights:
    """Sparse barycentric weights of the iterate, scaled lazily so a step costs O(1)."""

    def __init__(self, weights: dict[int, float]):
        self.stored = dict(weights)
        self.scale = 1.0

    def step(self, idx: int, eta: float) -> None:
        if eta >= 1.0:
            self.stored, self.scale = {idx: 1.0}, 1.0
            return
        self.scale *= 1.0 - eta
        self.stored[idx] = self.stored.get(idx, 0.0) + eta / self.scale
        if self.scale < 1e-150:
            self.stored = {k: v * self.scale for k, v in self.stored.items()}
            self.scale = 1.0

    def as_dict(self) -> dict[int, float]:
        return {k: v * self.scale for k, v in sorted(self.stored.items())}


def _initial_point(ds: Dataset, cfg: FwConfig) -> tuple[np.ndarray, dict[int, float]]:
    if cfg.w0 is not None:
        return as_vector(cfg.w0, ds.dim, "w0").copy(), {}
    wts = random_simplex_weights(ds.n, make_rng(cfg.seed))
    return wts @ ds.points, {i: float(v) for i, v in enumerate(wts)}


def frank_wolfe(ds: Dataset, obj: Objective, cfg: FwConfig, *, _sign: float = 1.0) -> FwResult:
    """Run ``cfg.max_iters`` Frank-Wolfe steps from a random hull point (or ``cfg.w0``).

    The trace holds one record per visited iterate, ``t = 0 .. T``; the last
    record carries only the objective value. ``_sign = -1`` flips the vertex
    rule to ``argmax <s, grad>`` (used for the literal Herding variant).
    """
    if ds.n == 0:
        raise ValueError("empty dataset")
    if cfg.index is not None and cfg.index.n != ds.n:
        raise ValueError("index was built over a different dataset")
    w, init_weights = _initial_point(ds, cfg)
    hull = _HullWeights(init_weights) if init_weights else None
    trace = FwTrace(mode=cfg.mode, n=ds.n)
    pts = ds.points
    index = cfg.index
    if index is not None:
        grad0 = _sign * obj.grad(w)
        index.set_query_bound(w, grad0)

    for t in range(cfg.max_iters + 1):
        start = time.perf_counter_ns()
        val = float(obj.eval(w))
        if not math.isfinite(val):
            trace.records.append(IterRecord(t, val))
            raise FwDivergence(f"non-finite objective at t={t}", trace)
        rec = IterRecord(t, val)
        trace.records.append(rec)
        if t == cfg.max_iters or (cfg.stop_objective is not None and val <= cfg.stop_objective):
            rec.wall_nanos = time.perf_counter_ns() - start
            break
        grad = _sign * np.asarray(obj.grad(w), dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise FwDivergence(f"non-finite gradient at t={t}", trace)
        base = float(w @ grad)
        if index is None:
            scores = pts @ grad
            idx = int(np.argmin(scores))
            rec.gap = float(scores[idx]) - base
            rec.candidates_touched = ds.n
        else:
            ans = index.query_direction(w, grad)
            rec.candidates_touched = ans.candidates_touched
            rec.fallback_used = ans.fallback_used
            if cfg.audit:
                exact = float((pts @ grad).min()) - base
                rec.exact_gap = exact
            if ans.converged:
                trace.converged_early = True
                rec.wall_nanos = time.perf_counter_ns() - start
                break
            idx, rec.gap = ans.index, ans.gap
            if cfg.audit and rec.exact_gap < 0:
                rec.c_ratio = rec.gap / rec.exact_gap
        rec.index = idx
        if cfg.early_stop and index is None and -rec.gap <= cfg.epsilon:
            trace.converged_early = True
            rec.wall_nanos = time.perf_counter_ns() - start
            break
        eta = cfg.step_size(t)
        rec.eta = eta
        w = (1.0 - eta) * w + eta * pts[idx]
        if hull is not None:
            hull.step(idx, eta)
        rec.wall_nanos = time.perf_counter_ns() - start

    return FwResult(w, trace, hull.as_dict() if hull is not None else {})


def herding(features: Dataset, mu, cfg: FwConfig, rule: str = "argmin") -> FwResult:
    """Herding as Frank-Wolfe on ``0.5 |w - mu|^2``.

    ``rule="argmin"`` picks ``argmin_s <s, w - mu>`` (the Frank-Wolfe vertex);
    ``rule="argmax"`` follows the literal ``argmax_s <w - mu, s>`` listing.
    ``result.sample_sequence`` is the chosen vertex sequence.
    """
    if rule not in ("argmin", "argmax"):
        raise ValueError(f"unknown herding rule {rule!r}")
    mu = as_vector(mu, features.dim, "mu")
    return frank_wolfe(features, squared_distance(mu), cfg,
                       _sign=1.0 if rule == "argmin" else -1.0)


def reference_optimum(ds: Dataset, obj: Objective, iters: int, seed: int = 0) -> float:
    """Estimate ``min_B g`` by a long exact run; the estimate is never below the true minimum."""
    res = frank_wolfe(ds, obj, FwConfig(max_iters=iters, seed=seed))
    return float(res.trace.objectives().min())


@dataclass(frozen=True)
class CertReport:
    passed: bool
    first_violation: int | None
    worst_ratio: float
    bound_constant: float
    checked: int

    def __str__(self) -> str:
        if self.passed:
            return f"PASS ({self.checked} iterates, worst h_t/bound = {self.worst_ratio:.3g})"
        return f"FAIL at t={self.first_violation} (worst h_t/bound = {self.worst_ratio:.3g})"


def convergence_bound(t: int, beta: float, D: float, c: float = 1.0,
                      relaxed: bool = False) -> float:
    """``2 beta D^2 / (c^2 (t+1))``, doubled in the quantized-query (relaxed) setting."""
    k = 4.0 if relaxed else 2.0
    return k * beta * D * D / (c * c * (t + 1))


def certify_convergence(trace: FwTrace, beta: float, D: float, c: float = 1.0,
                        g_star: float | None = None, relaxed: bool = False,
                        tol: float = 1e-10) -> CertReport:
    """Check ``h_t <= bound(t)`` for every recorded ``t >= 1``."""
    if g_star is None:
        g_star = trace.g_star
    if g_star is None:
        raise ValueError("certification needs a reference optimum g*")
    if not (c > 0):
        raise ValueError("c must be positive")
    worst, first, checked = 0.0, None, 0
    for r in trace.records:
        if r.t < 1:
            continue
        checked += 1
        bound = convergence_bound(r.t, beta, D, c, relaxed)
        h = r.objective - g_star
        worst = max(worst, h / bound)
        if h > bound + tol and first is None:
            first = r.t
    return CertReport(first is None, first, worst, (4.0 if relaxed else 2.0) * beta * D * D / c ** 2,
                      checked)
