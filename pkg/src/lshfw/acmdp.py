"""Action-constrained MDPs and Frank-Wolfe policy optimization (SFWPO).

Each state ``s`` owns a finite action set ``C(s)`` of vectors in ``R^d``.
A deterministic policy picks ``pi(s)`` in ``conv(C(s))`` and is stored as
barycentric weights over ``C(s)``. Rewards and transitions are given at the
vertices and extended to interpolated actions barycentrically, which makes
``Q(s, a | pi)`` affine in ``a`` and its action gradient well defined. This
requires every ``C(s)`` to be affinely independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lsh as lshmod
from .maxip import MaxIpIndex, build_index
from .vecspace import Dataset, diameter, make_rng

VI_TOL = 1e-10
VI_MAX_SWEEPS = 1_000_000


@dataclass(eq=False)
class Acmdp:
    """Finite ACMDP.

    Attributes:
        actions: per-state arrays of shape ``(n_s, d)``.
        reward: per-state arrays of shape ``(n_s,)`` with values in ``[0, 1]``.
        transition: per-state arrays of shape ``(n_s, S)``, rows summing to one.
        gamma: discount in ``(0, 1)``.
        mu: initial state distribution.
        mu_min: optional fixed lower bound on the discounted state occupancy.
        L_smooth: optional smoothness constant used in the step size.
    """

    actions: list[np.ndarray]
    reward: list[np.ndarray]
    transition: list[np.ndarray]
    gamma: float
    mu: np.ndarray
    mu_min: float | None = None
    L_smooth: float | None = None
    state_names: list[str] | None = None
    _bary: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        S = len(self.actions)
        if S == 0:
            raise ValueError("MDP needs at least one state")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        self.actions = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in self.actions]
        self.reward = [np.asarray(r, dtype=np.float64).reshape(-1) for r in self.reward]
        self.transition = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in self.transition]
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if len(self.reward) != S or len(self.transition) != S or self.mu.shape != (S,):
            raise ValueError("reward, transition and mu must cover every state")
        d = self.actions[0].shape[1]
        for s in range(S):
            a, r, p = self.actions[s], self.reward[s], self.transition[s]
            if a.shape[1] != d:
                raise ValueError(f"state {s}: action dimension {a.shape[1]} != {d}")
            if r.shape != (a.shape[0],) or p.shape != (a.shape[0], S):
                raise ValueError(f"state {s}: reward/transition shapes do not match {a.shape[0]} actions")
            if np.any(r < 0) or np.any(r > 1):
                raise ValueError(f"state {s}: rewards must lie in [0, 1]")
            if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
                raise ValueError(f"state {s}: transition rows must be stochastic")
        if np.any(self.mu < 0) or abs(self.mu.sum() - 1.0) > 1e-12:
            raise ValueError("mu must be a probability vector")
        self._bary = [_barycentric_map(a, s) for s, a in enumerate(self.actions)]

    @property
    def n_states(self) -> int:
        return len(self.actions)

    @property
    def action_dim(self) -> int:
        return self.actions[0].shape[1]

    def state_diameter(self, s: int) -> float:
        return diameter(Dataset(self.actions[s])).value

    @property
    def D_max(self) -> float:
        return max(self.state_diameter(s) for s in range(self.n_states))

    def barycentric(self, s: int, a) -> np.ndarray:
        """Weights ``lambda`` with ``sum_j lambda_j = 1`` and ``lambda @ C(s) = a``."""
        return self._bary[s] @ np.append(np.asarray(a, dtype=np.float64), 1.0)

    # -- json --------------------------------------------------------------

    def to_json(self) -> dict:
        out = {
            "gamma": self.gamma,
            "mu": self.mu.tolist(),
            "states": [
                {"actions": self.actions[s].tolist(), "reward": self.reward[s].tolist(),
                 "transition": self.transition[s].tolist()}
                for s in range(self.n_states)
            ],
        }
        if self.state_names:
            for s, name in enumerate(self.state_names):
                out["states"][s]["name"] = name
        if self.mu_min is not None:
            out["mu_min"] = self.mu_min
        if self.L_smooth is not None:
            out["L_smooth"] = self.L_smooth
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, obj: dict) -> "Acmdp":
        states = obj["states"]
        return cls(
            actions=[st["actions"] for st in states],
            reward=[st["reward"] for st in states],
            transition=[st["transition"] for st in states],
            gamma=float(obj["gamma"]),
            mu=obj["mu"],
            mu_min=obj.get("mu_min"),
            L_smooth=obj.get("L_smooth"),
            state_names=[st.get("name", str(i)) for i, st in enumerate(states)],
        )

    @classmethod
    def load(cls, path) -> "Acmdp":
        return cls.from_json(json.loads(Path(path).read_text()))


def _barycentric_map(vertices: np.ndarray, s: int) -> np.ndarray:
    n, d = vertices.shape
    M = np.vstack([vertices.T, np.ones(n)])  # (d+1, n)
    if np.linalg.matrix_rank(M) < n:
        raise ValueError(f"state {s}: action set is not affinely independent")
    return np.linalg.pinv(M)  # (n, d+1)


@dataclass
class Policy:
    """Per-state convex weights over ``C(s)``."""

    weights: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        for s, w in enumerate(self.weights):
            if np.any(w < -1e-15) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"state {s}: policy weights are not a convex combination")

    def action(self, mdp: Acmdp, s: int) -> np.ndarray:
        return self.weights[s] @ mdp.actions[s]

    def copy(self) -> "Policy":
        return Policy([w.copy() for w in self.weights])

    @classmethod
    def vertices(cls, mdp: Acmdp, choice) -> "Policy":
        ws = []
        for s, j in enumerate(choice):
            w = np.zeros(mdp.actions[s].shape[0])
            w[int(j)] = 1.0
            ws.append(w)
        return cls(ws)

    @classmethod
    def random_vertices(cls, mdp: Acmdp, seed: int) -> "Policy":
        rng = make_rng(seed)
        return cls.vertices(mdp, [rng.integers(a.shape[0]) for a in mdp.actions])


@dataclass
class QResult:
    V: np.ndarray
    Q: list[np.ndarray]
    grad: list[np.ndarray]
    J: float
    sweeps: int


def policy_model(mdp: Acmdp, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """Reward vector and transition matrix of the interpolated policy."""
    r = np.array([policy.weights[s] @ mdp.reward[s] for s in range(mdp.n_states)])
    P = np.vstack([policy.weights[s] @ mdp.transition[s] for s in range(mdp.n_states)])
    return r, P


def value_iteration(mdp: Acmdp, policy: Policy, tol: float = VI_TOL,
                    max_sweeps: int = VI_MAX_SWEEPS, V0=None) -> tuple[np.ndarray, int]:
    """Iterate the policy's Bellman operator until the sup-norm update is ``<= tol``.

    ``V0`` warm-starts the iteration (the fixed point does not depend on it).
    """
    r, P = policy_model(mdp, policy)
    V = np.zeros(mdp.n_states) if V0 is None else np.array(V0, dtype=np.float64)
    for sweep in range(1, max_sweeps + 1):
        nxt = r + mdp.gamma * (P @ V)
        res = float(np.abs(nxt - V).max())
        V = nxt
        if res <= tol:
            return V, sweep
    raise RuntimeError(f"value iteration did not reach residual {tol} in {max_sweeps} sweeps")


def occupancy(mdp: Acmdp, policy: Policy) -> np.ndarray:
    """Normalized discounted state occupancy ``(1 - gamma) mu^T (I - gamma P_pi)^-1``."""
    _, P = policy_model(mdp, policy)
    A = np.eye(mdp.n_states) - mdp.gamma * P
    return (1.0 - mdp.gamma) * np.linalg.solve(A.T, mdp.mu)


def _fd_gradient(f, a: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(a)
    for i in range(a.shape[0]):
        e = np.zeros_like(a)
        e[i] = h
        g[i] = (f(a + e) - f(a - e)) / (2.0 * h)
    return g


def q_exact(mdp: Acmdp, policy: Policy, V0=None, h: float = 1e-5) -> QResult:
    """Q at every vertex action and ``grad_a Q(s, pi(s) | pi)`` by central differences.

    ``V`` comes from value iteration to residual ``1e-10``. The difference
    quotients of the interpolated ``Q(s, . | pi)`` are evaluated for all
    coordinates at once.
    """
    V, sweeps = value_iteration(mdp, policy, V0=V0)
    Q = [mdp.reward[s] + mdp.gamma * (mdp.transition[s] @ V) for s in range(mdp.n_states)]
    grads = []
    for s in range(mdp.n_states):
        a = policy.action(mdp, s)
        d = a.shape[0]
        pts = np.vstack([a + h * np.eye(d), a - h * np.eye(d)])
        vals = np.hstack([pts, np.ones((2 * d, 1))]) @ mdp._bary[s].T @ Q[s]
        grads.append((vals[:d] - vals[d:]) / (2.0 * h))
    return QResult(V, Q, grads, float(mdp.mu @ V), sweeps)


def objective_J(mdp: Acmdp, policy: Policy) -> float:
    return float(mdp.mu @ value_iteration(mdp, policy)[0])


def _substituted_J(mdp: Acmdp, policy: Policy, s: int, a: np.ndarray) -> float:
    # J with the action at state s replaced by a, computed by a direct solve.
    lam = mdp.barycentric(s, a)
    r, P = policy_model(mdp, policy)
    r[s] = lam @ mdp.reward[s]
    P[s] = lam @ mdp.transition[s]
    V = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P, r)
    return float(mdp.mu @ V)


L_FLOOR = 1e-4


def _fd_hessian(f, a0: np.ndarray, h: float) -> np.ndarray:
    d = a0.shape[0]
    H = np.empty((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        H[i] = (_fd_gradient(f, a0 + ei, h) - _fd_gradient(f, a0 - ei, h)) / (2.0 * h)
    return 0.5 * (H + H.T)


def estimate_smoothness(mdp: Acmdp, samples: int = 16, seed: int = 0, h: float = 1e-3,
                        safety: float = 2.0, target: str = "q", floor: float = L_FLOOR) -> float:
    """``safety`` times the largest spectral norm of a finite-difference Hessian, at least ``floor``.

    ``target="q"`` differentiates ``a -> Q(s, a | pi)`` at random interior
    policies and states. Under barycentric interpolation that map is affine,
    so the estimate is rounding noise and ``floor`` takes over; any positive
    constant is a valid smoothness bound then. ``target="j"`` differentiates
    ``a -> J(mu, pi[s <- a])`` instead, which does carry curvature and gives
    far more conservative steps.
    """
    if target not in ("q", "j"):
        raise ValueError(f"unknown smoothness target {target!r}")
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(samples):
        pol = Policy([rng.dirichlet(np.ones(a.shape[0])) for a in mdp.actions])
        s = int(rng.integers(mdp.n_states))
        if target == "q":
            qs = q_exact(mdp, pol).Q[s]
            f = lambda a, s=s, qs=qs: mdp.barycentric(s, a) @ qs
        else:
            f = lambda a, s=s, pol=pol: _substituted_J(mdp, pol, s, a)
        H = _fd_hessian(f, pol.action(mdp, s), h)
        worst = max(worst, float(np.abs(np.linalg.eigvalsh(H)).max()))
    return max(floor, safety * worst)


@dataclass
class SfwpoConfig:
    """Settings for :func:`sfwpo`.

    ``search="lsh"`` builds one :class:`MaxIpIndex` per state over ``C(s)``.
    ``audit`` computes the exact gap next to every LSH answer. ``stop_when_stationary``
    ends the run once every state's gap estimate is at most ``stationary_tol``.
    """

    iters: int = 100
    c: float = 1.0
    tau: float = 0.01
    search: str = "exact"
    seed: int = 0
    hash_config: lshmod.HashFamilyConfig | None = None
    fallback: str = "linear_scan"
    audit: bool = False
    L: float | None = None
    mu_min: float | None = None
    stop_when_stationary: bool = True
    stationary_tol: float = 1e-12

    def __post_init__(self):
        if self.search not in ("exact", "lsh"):
            raise ValueError(f"unknown search mode {self.search!r}")
        if not (0.0 < self.c <= 1.0):
            raise ValueError("c must lie in (0, 1]")


@dataclass
class SfwpoRecord:
    k: int
    J: float
    g_hat: list[float]
    g_exact: list[float | None]
    alpha_raw: list[float]
    alpha: list[float]
    chosen: list[int]
    fallback: list[bool]
    candidates: list[int]
    mu_min: float


@dataclass
class SfwpoResult:
    policy: Policy
    records: list[SfwpoRecord]
    L: float
    stationary: bool

    def J_series(self) -> np.ndarray:
        return np.array([r.J for r in self.records])

    def to_jsonl(self, fh, header: dict | None = None) -> None:
        head = {"schema": "lshfw.sfwpo_trace", "version": 1, "L": self.L}
        if header:
            head.update(header)
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for r in self.records:
            fh.write(json.dumps(r.__dict__, sort_keys=True) + "\n")

    def summary(self) -> dict:
        last = self.records[-1]
        return {"iterations": last.k, "final_J": last.J,
                "final_average_gap": average_gap(self.records, last.k),
                "stationary": self.stationary,
                "fallback_fraction": float(np.mean([f for r in self.records for f in r.fallback]))
                if self.records else 0.0}


def average_gap(trace, k: int) -> float:
    """``sqrt(sum_s g_k(s)^2)``, using exact gaps when they were recorded."""
    records = trace.records if hasattr(trace, "records") else trace
    for r in records:
        if r.k == k:
            gaps = [ge if ge is not None else gh for ge, gh in zip(r.g_exact, r.g_hat)]
            return math.sqrt(sum(max(g, 0.0) ** 2 for g in gaps))
    raise KeyError(f"iteration {k} not in trace")


def predicted_iterations(mdp: Acmdp, L: float, mu_min: float, eps: float, c: float = 1.0) -> int:
    """``ceil(2 L D^2 / (c^2 (1-gamma)^3 mu_min^2 eps^2))``."""
    D = mdp.D_max
    return math.ceil(2.0 * L * D * D / (c * c * (1.0 - mdp.gamma) ** 3 * mu_min ** 2 * eps ** 2))


def build_state_indices(mdp: Acmdp, cfg: SfwpoConfig) -> list[MaxIpIndex]:
    out = []
    for s in range(mdp.n_states):
        hc = cfg.hash_config
        if hc is None:
            hc = lshmod.suggest_params(min(cfg.c, 0.999), cfg.tau, mdp.actions[s].shape[0],
                                       seed=cfg.seed + s)
        else:
            hc = lshmod.HashFamilyConfig(hc.family, hc.bits_per_table, hc.num_tables, hc.seed + s)
        out.append(build_index(Dataset(mdp.actions[s]), cfg.tau, cfg.c, hc,
                               fallback=cfg.fallback, query_scale="per_query"))
    return out


def sfwpo(mdp: Acmdp, cfg: SfwpoConfig, policy0: Policy | None = None) -> SfwpoResult:
    """Frank-Wolfe policy optimization in action space.

    Per iteration: evaluate ``Q`` and ``grad_a Q`` for the current policy, find
    ``a_hat = argmax_{a in C(s)} <a - pi(s), grad_a Q>`` per state (exactly or
    through the state's index), and move
    ``pi(s) <- pi(s) + alpha (a_hat - pi(s))`` with
    ``alpha = clip((1-gamma) mu_min / (L D_s^2) * g_hat, 0, 1)``.
    """
    policy = (policy0 or Policy.random_vertices(mdp, cfg.seed)).copy()
    L = cfg.L if cfg.L is not None else mdp.L_smooth
    if L is None:
        L = estimate_smoothness(mdp, seed=cfg.seed)
    if not L > 0:
        raise ValueError("smoothness constant L must be positive")
    fixed_mu_min = cfg.mu_min if cfg.mu_min is not None else mdp.mu_min
    Ds2 = [mdp.state_diameter(s) ** 2 for s in range(mdp.n_states)]
    indices = build_state_indices(mdp, cfg) if cfg.search == "lsh" else None
    records = []
    stationary = False
    V = None
    for k in range(cfg.iters + 1):
        qr = q_exact(mdp, policy, V0=V)
        V = qr.V
        mu_min = fixed_mu_min if fixed_mu_min is not None else float(occupancy(mdp, policy).min())
        rec = SfwpoRecord(k, qr.J, [], [], [], [], [], [], [], mu_min)
        records.append(rec)
        for s in range(mdp.n_states):
            pi_s = policy.action(mdp, s)
            vals = mdp.actions[s] @ qr.grad[s] - pi_s @ qr.grad[s]
            exact_j = int(np.argmax(vals))
            if indices is None:
                j, g_hat, fb, cand = exact_j, float(vals[exact_j]), False, mdp.actions[s].shape[0]
                g_ex = g_hat
            else:
                ans = indices[s].query_direction(pi_s, -qr.grad[s])
                if ans.converged:
                    j, g_hat = exact_j, 0.0
                else:
                    j, g_hat = ans.index, -ans.gap
                fb, cand = ans.fallback_used, ans.candidates_touched
                g_ex = float(vals[exact_j]) if cfg.audit else None
            a_raw = (1.0 - mdp.gamma) * mu_min / (L * Ds2[s]) * g_hat if Ds2[s] > 0 else 0.0
            rec.g_hat.append(g_hat)
            rec.g_exact.append(g_ex)
            rec.alpha_raw.append(a_raw)
            rec.alpha.append(min(1.0, max(0.0, a_raw)))
            rec.chosen.append(j)
            rec.fallback.append(fb)
            rec.candidates.append(cand)
        if cfg.stop_when_stationary and all(g <= cfg.stationary_tol for g in rec.g_hat):
            stationary = True
            break
        if k == cfg.iters:
            break
        for s in range(mdp.n_states):
            a = rec.alpha[s]
            if a > 0:
                w = policy.weights[s] * (1.0 - a)
                w[rec.chosen[s]] += a
                policy.weights[s] = w
    return SfwpoResult(policy, records, L, stationary)


# -- instances ---------------------------------------------------------------

COMPASS = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def gridworld(rows: int = 4, cols: int = 4, gamma: float = 0.9, slip: float = 0.1,
              goal: tuple[int, int] | None = None) -> Acmdp:
    """Grid with 8 compass moves per cell; reaching the goal cell pays 1 per step there.

    A move succeeds with probability ``1 - slip``; otherwise the agent stays put.
    The goal is absorbing. Each action vector is ``[drow, dcol, onehot(8)]``,
    which keeps ``C(s)`` affinely independent. ``mu`` is uniform.
    """
    goal = goal if goal is not None else (rows - 1, cols - 1)
    S = rows * cols
    gi = goal[0] * cols + goal[1]
    acts = np.array([[dr, dc] + [1.0 if k == j else 0.0 for k in range(8)]
                     for j, (dr, dc) in enumerate(COMPASS)], dtype=np.float64)
    actions, rewards, trans, names = [], [], [], []
    for r in range(rows):
        for c in range(cols):
            s = r * cols + c
            P = np.zeros((8, S))
            for j, (dr, dc) in enumerate(COMPASS):
                if s == gi:
                    P[j, s] = 1.0
                    continue
                nr, nc = min(max(r + dr, 0), rows - 1), min(max(c + dc, 0), cols - 1)
                P[j, nr * cols + nc] += 1.0 - slip
                P[j, s] += slip
            actions.append(acts.copy())
            rewards.append(P[:, gi].copy())
            trans.append(P)
            names.append(f"{r},{c}")
    return Acmdp(actions, rewards, trans, gamma, np.full(S, 1.0 / S), state_names=names)


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator,
               gamma: float = 0.9) -> Acmdp:
    """Dense random MDP with one-hot action vectors."""
    acts = np.eye(n_actions)
    actions = [acts.copy() for _ in range(n_states)]
    rewards = [rng.uniform(0, 1, n_actions) for _ in range(n_states)]
    trans = []
    for _ in range(n_states):
        P = rng.uniform(0, 1, (n_actions, n_states))
        P /= P.sum(axis=1, keepdims=True)
        P[:, -1] += 1.0 - P.sum(axis=1)
        trans.append(P)
    mu = rng.uniform(0.5, 1.5, n_states)
    mu /= mu.sum()
    mu[-1] += 1.0 - mu.sum()
    return Acmdp(actions, rewards, trans, gamma, mu)
