"""Reduction of Frank-Wolfe direction search to maximum inner product search.

The direction search ``argmin_{s in S} <s - w, grad>`` becomes a MaxIP over
unit vectors through two asymmetric transform pairs::

    phi0(w, grad) = [grad, <w, grad>]        psi0(s) = [-s, 1]
    phi1(x, Dx)   = [x / Dx, 0, sqrt(1 - |x/Dx|^2)]
    psi1(y, Dy)   = [y / Dy, sqrt(1 - |y/Dy|^2), 0]

so that ``<s - w, grad> = -Dx * Dy * <phi1(phi0(w, grad)), psi1(psi0(s))>``.
:class:`MaxIpIndex` hashes ``psi(S)`` into an :class:`~lshfw.lsh.LshIndex`
and answers direction queries with exact rescoring of the LSH candidates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from . import lsh as lshmod
from .vecspace import Dataset, as_vector

log = logging.getLogger(__name__)

FALLBACKS = ("declare_converged", "linear_scan", "fail")
QUERY_SCALES = ("fixed", "per_query")
NORM_TOL = 1e-9
MAX_POLY_DEGREE = 8


class MaxIpQueryError(RuntimeError):
    """Raised by the ``fail`` fallback policy or a strict norm-overflow policy."""


# -- transforms ------------------------------------------------------------

def phi0(x, grad) -> np.ndarray:
    """Query side of the direction transform: ``[grad, <x, grad>]``."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if x.shape != grad.shape:
        raise ValueError(f"x has shape {x.shape} but grad has shape {grad.shape}")
    return np.append(grad, x @ grad)


def psi0(y) -> np.ndarray:
    """Data side of the direction transform: ``[-y, 1]``; accepts a vector or rows."""
    y = np.asarray(y, dtype=np.float64)
    ones = np.ones(y.shape[:-1] + (1,))
    return np.concatenate([-y, ones], axis=-1)


def _scale_check(v: np.ndarray, bound: float, on_overflow: str) -> tuple[np.ndarray, bool]:
    if bound <= 0:
        raise ValueError(f"scaling constant must be positive, got {bound}")
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    over = norms > bound * (1.0 + NORM_TOL)
    if not np.any(over):
        return v, False
    if on_overflow == "error":
        raise ValueError(f"vector norm {float(norms.max()):.6g} exceeds scaling constant {bound:.6g}")
    return np.where(over, v * (bound / np.where(over, norms, 1.0)), v), True


def _pole(v: np.ndarray, bound: float) -> np.ndarray:
    r2 = np.einsum("...i,...i->...", v, v) / bound ** 2
    return np.sqrt(np.clip(1.0 - r2, 0.0, None))


def phi1(x, d_x: float, on_overflow: str = "error") -> np.ndarray:
    """Lift ``x`` with ``|x| <= d_x`` onto the unit sphere in dimension ``len(x) + 2``.

    ``on_overflow="clamp"`` rescales an oversized ``x`` to norm ``d_x`` instead of raising.
    """
    x, _ = _scale_check(np.asarray(x, dtype=np.float64), d_x, on_overflow)
    zeros = np.zeros(x.shape[:-1] + (1,))
    return np.concatenate([x / d_x, zeros, _pole(x, d_x)[..., None]], axis=-1)


def psi1(y, d_y: float, on_overflow: str = "error") -> np.ndarray:
    """Data-side lift; the pole coordinate sits one slot before :func:`phi1`'s."""
    y, _ = _scale_check(np.asarray(y, dtype=np.float64), d_y, on_overflow)
    zeros = np.zeros(y.shape[:-1] + (1,))
    return np.concatenate([y / d_y, _pole(y, d_y)[..., None], zeros], axis=-1)


@dataclass(frozen=True)
class MipsUnitTransform:
    """The ``(phi1, psi1)`` pair with fixed scaling constants."""

    d_x: float
    d_y: float

    def query(self, x, on_overflow: str = "error") -> np.ndarray:
        return phi1(x, self.d_x, on_overflow)

    def data(self, y, on_overflow: str = "error") -> np.ndarray:
        return psi1(y, self.d_y, on_overflow)


def data_scale(points: np.ndarray) -> float:
    """``D_y = max_i |psi0(s_i)| = max_i sqrt(|s_i|^2 + 1)``."""
    return float(np.sqrt(np.max(np.einsum("ij,ij->i", points, points)) + 1.0))


def transform_data(points: np.ndarray, d_y: float | None = None) -> tuple[np.ndarray, float]:
    """Return ``(psi(S), D_y)`` for the rows of ``points``."""
    points = np.asarray(points, dtype=np.float64)
    if d_y is None:
        d_y = data_scale(points)
    return psi1(psi0(points), d_y), d_y


# -- polynomial decomposition ---------------------------------------------

def _multinomial(counts) -> int:
    out = math.factorial(sum(counts))
    for c in counts:
        out //= math.factorial(c)
    return out


def polynomial_feature_dim(k2: int, degree: int) -> int:
    """Length of each extra feature block produced by :func:`polynomial_ip_decompose`."""
    return sum(math.comb(k2 + r - 1, r) * (degree - r + 1) for r in range(degree + 1))


def polynomial_ip_decompose(phi1_out, psi1_out, phi2_out, psi2_out, coeffs):
    """Fold ``<phi1_out, psi1_out> + p(|phi2_out - psi2_out|^2)`` into one inner product.

    ``p(z) = sum_i coeffs[i] * z**i``. Writing ``z = |a|^2 + |b|^2 - 2<a, b>`` with
    ``a = phi2_out`` and ``b = psi2_out`` and expanding multinomially,

        z^i = sum_{p+q+r=i} i!/(p! q! r!) |a|^{2p} |b|^{2q} (-2)^r <a, b>^r,

    and ``<a, b>^r = sum_{|alpha|=r} multinom(alpha) a^alpha b^alpha``. Grouping by
    ``(r, alpha, p)`` puts ``|a|^{2p} a^alpha`` on the query side and the remaining
    factors, including the coefficients, on the data side.

    Returns:
        ``(query_vec, data_vec)`` whose inner product equals the left-hand side
        exactly (up to rounding). Both start with the untouched first pair.
    """
    a = as_vector(phi2_out, name="phi2_out")
    b = as_vector(psi2_out, dim=a.shape[0], name="psi2_out")
    x1 = as_vector(phi1_out, name="phi1_out")
    y1 = as_vector(psi1_out, dim=x1.shape[0], name="psi1_out")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    degree = coeffs.shape[0] - 1
    if degree < 0:
        raise ValueError("need at least one coefficient")
    if degree > MAX_POLY_DEGREE:
        raise ValueError(f"polynomial degree {degree} exceeds limit {MAX_POLY_DEGREE}")
    k2 = a.shape[0]
    na, nb = a @ a, b @ b
    qf, df = [], []
    for r in range(degree + 1):
        for combo in combinations_with_replacement(range(k2), r):
            counts = np.bincount(np.asarray(combo, dtype=np.int64), minlength=k2)
            mono_a = float(np.prod(a ** counts))
            mono_b = float(np.prod(b ** counts))
            m_alpha = _multinomial(counts.tolist())
            for p in range(degree - r + 1):
                qf.append(na ** p * mono_a)
                acc = 0.0
                for i in range(p + r, degree + 1):
                    q = i - p - r
                    acc += (coeffs[i] * _multinomial([p, q, r]) * (-2.0) ** r
                            * m_alpha * nb ** q)
                df.append(acc * mono_b)
    return np.concatenate([x1, qf]), np.concatenate([y1, df])


# -- quantizer ---------------------------------------------------------------

@dataclass(frozen=True)
class QuantizerGrid:
    """Axis-aligned cubic lattice with edge ``2*lam/sqrt(dim)`` (half-diagonal ``lam``).

    Cell corners sit on multiples of the edge, so the origin is a corner and
    centers are at ``(k + 1/2) * edge``.
    """

    lam: float
    dim: int

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    @property
    def cell_edge(self) -> float:
        return 2.0 * self.lam / math.sqrt(self.dim)

    @property
    def lambda_effective(self) -> float:
        """Additive inner-product budget after renormalizing centers to unit length."""
        return 2.0 * self.lam

    def center(self, q) -> np.ndarray:
        """Raw cell center (before renormalization); ``|q - center| <= lam``."""
        q = as_vector(q, dim=self.dim, name="query")
        e = self.cell_edge
        # np.round is half-to-even; points on a cell face go to a deterministic side.
        return e * (np.round(q / e - 0.5) + 0.5)


def quantize(grid: QuantizerGrid, q) -> np.ndarray:
    """Cell center of ``q`` rescaled to unit length."""
    c = grid.center(q)
    return c / np.linalg.norm(c)


# -- the index ---------------------------------------------------------------

@dataclass
class MaxIpStats:
    queries: int = 0
    fallbacks: int = 0
    candidates_touched: int = 0
    clamped: int = 0


@dataclass(frozen=True)
class Direction:
    """Answer of :meth:`MaxIpIndex.query_direction`.

    ``gap`` is ``<s - w, grad>`` for the chosen vertex (negative when it is a
    descent direction). ``converged`` is set only by the ``declare_converged``
    fallback, in which case ``index`` is ``-1``.
    """

    index: int
    score: float
    gap: float
    fallback_used: bool
    candidates_touched: int
    converged: bool = False


@dataclass(eq=False)
class MaxIpIndex:
    """LSH index over ``psi(S)`` answering Frank-Wolfe direction queries.

    ``query_scale="fixed"`` uses one query-side constant ``d_x`` for all
    queries; ``"per_query"`` rescales each ``phi0`` to unit length, which keeps
    the score scale-free as the gradient shrinks.
    """

    points: np.ndarray
    lsh: lshmod.LshIndex
    d_y: float
    tau: float
    c: float
    fallback: str = "linear_scan"
    d_x: float | None = None
    query_scale: str = "fixed"
    on_overflow: str = "clamp"
    quantizer: QuantizerGrid | None = None
    stats: MaxIpStats = field(default_factory=MaxIpStats)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def transformed(self) -> np.ndarray:
        return self.lsh.data

    def set_query_bound(self, w, grad, factor: float = 1.5) -> float:
        """Fix ``d_x = factor * |phi0(w, grad)|`` unless it was already configured."""
        if self.d_x is None:
            nrm = float(np.linalg.norm(phi0(w, grad)))
            self.d_x = factor * nrm if nrm > 0 else 1.0
        return self.d_x

    def query_vector(self, w, grad) -> tuple[np.ndarray, float]:
        """``(phi(w), d_x)`` with the effective query constant for this query."""
        f0 = phi0(as_vector(w, self.dim, "w"), as_vector(grad, self.dim, "grad"))
        if self.query_scale == "per_query":
            d_x = float(np.linalg.norm(f0)) or 1.0
            return phi1(f0, d_x, "clamp"), d_x
        if self.d_x is None:
            raise ValueError("query bound d_x is unset; call set_query_bound first")
        if np.linalg.norm(f0) > self.d_x * (1.0 + NORM_TOL):
            if self.on_overflow == "error":
                raise MaxIpQueryError(
                    f"|phi0| = {np.linalg.norm(f0):.6g} exceeds d_x = {self.d_x:.6g}")
            self.stats.clamped += 1
            log.warning("query norm %.6g exceeds d_x %.6g; clamped", np.linalg.norm(f0), self.d_x)
        return phi1(f0, self.d_x, "clamp"), self.d_x

    def query_direction(self, w, grad) -> Direction:
        """Approximate ``argmin_s <s - w, grad>`` through the LSH tables."""
        q, d_x = self.query_vector(w, grad)
        self.stats.queries += 1
        hq = q if self.quantizer is None else quantize(self.quantizer, q)
        w = np.asarray(w, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if self.n == 1:
            # nothing to search: the only vertex is the answer under every policy
            self.stats.candidates_touched += 1
            return Direction(0, float(self.transformed[0] @ q),
                             float((self.points[0] - w) @ grad), False, 1)
        cands = self.lsh._lookup(hq)
        if cands.size:
            scores = self.transformed[cands] @ q
            j = int(np.argmax(scores))
            if scores[j] >= self.c * self.tau:
                self.stats.candidates_touched += int(cands.size)
                best = int(cands[j])
                return Direction(best, float(scores[j]), float((self.points[best] - w) @ grad),
                                 False, int(cands.size))
        self.stats.fallbacks += 1
        if self.fallback == "declare_converged":
            self.stats.candidates_touched += int(cands.size)
            return Direction(-1, float("nan"), 0.0, True, int(cands.size), converged=True)
        if self.fallback == "fail":
            raise MaxIpQueryError(f"no candidate reached score c*tau = {self.c * self.tau:.4g}")
        scores = self.transformed @ q
        best = int(np.argmax(scores))
        self.stats.candidates_touched += self.n
        return Direction(best, float(scores[best]), float((self.points[best] - w) @ grad),
                         True, self.n)

    def exact_direction(self, w, grad) -> Direction:
        """Linear scan in the transformed space, bypassing the tables and stats."""
        q, _ = self.query_vector(w, grad)
        scores = self.transformed @ q
        best = int(np.argmax(scores))
        return Direction(best, float(scores[best]),
                         float((self.points[best] - np.asarray(w)) @ np.asarray(grad)),
                         False, self.n)

    # -- persistence -------------------------------------------------------

    def header(self) -> dict:
        return {"d_x": self.d_x, "d_y": self.d_y, "tau": self.tau, "c": self.c,
                "fallback": self.fallback, "query_scale": self.query_scale,
                "on_overflow": self.on_overflow,
                "lambda": None if self.quantizer is None else self.quantizer.lam,
                "points_dim": self.dim}

    def to_bytes(self) -> bytes:
        return self.lsh.to_bytes(self.header())

    def save(self, path) -> None:
        self.lsh.save(path, self.header())

    @classmethod
    def load(cls, path, expected_dim: int | None = None) -> "MaxIpIndex":
        """Load an index; the original points are recovered as ``-d_y * psi(s)[:d]``."""
        with open(path, "rb") as fh:
            blob = fh.read()
        index, extra = lshmod.LshIndex.from_bytes(
            blob, None if expected_dim is None else expected_dim + 3)
        d = extra["points_dim"]
        if index.dim != d + 3:
            raise ValueError(f"index dimension {index.dim} inconsistent with point dim {d}")
        points = -extra["d_y"] * index.data[:, :d]
        quant = None if extra["lambda"] is None else QuantizerGrid(extra["lambda"], d + 3)
        return cls(points=points, lsh=index, d_y=extra["d_y"], tau=extra["tau"], c=extra["c"],
                   fallback=extra["fallback"], d_x=extra["d_x"],
                   query_scale=extra["query_scale"], on_overflow=extra["on_overflow"],
                   quantizer=quant)


def build_index(ds: Dataset | np.ndarray, tau: float, c: float,
                cfg: lshmod.HashFamilyConfig | None = None, d_x: float | None = None,
                fallback: str = "linear_scan", query_scale: str = "fixed",
                on_overflow: str = "clamp", lam: float | None = None) -> MaxIpIndex:
    """Transform ``S`` to ``psi(S)`` and hash it.

    ``cfg=None`` uses :func:`lshfw.lsh.suggest_params` for ``(c, tau, n)``.
    ``lam`` enables query quantization on a :class:`QuantizerGrid` in dimension ``d + 3``.
    """
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if not (0.0 < c <= 1.0):
        raise ValueError(f"c must lie in (0, 1], got {c}")
    if fallback not in FALLBACKS:
        raise ValueError(f"unknown fallback {fallback!r}")
    if query_scale not in QUERY_SCALES:
        raise ValueError(f"unknown query_scale {query_scale!r}")
    if on_overflow not in ("clamp", "error"):
        raise ValueError(f"unknown overflow policy {on_overflow!r}")
    points = ds.points if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    if points.shape[0] == 0:
        raise ValueError("empty dataset")
    if cfg is None:
        cfg = lshmod.suggest_params(min(c, 0.999), tau, points.shape[0])
    data, d_y = transform_data(points)
    index = lshmod.build(data, cfg)
    quant = QuantizerGrid(lam, points.shape[1] + 3) if lam is not None else None
    return MaxIpIndex(points=np.array(points, copy=True), lsh=index, d_y=d_y, tau=tau, c=c,
                      fallback=fallback, d_x=d_x, query_scale=query_scale,
                      on_overflow=on_overflow, quantizer=quant)
