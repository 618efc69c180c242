"""Vectors, finite point sets and their convex hulls.

Vectors are plain 1-D ``float64`` numpy arrays; a :class:`Dataset` wraps an
``(n, d)`` array of points whose convex hull is the feasible region of every
solver in this package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

# Above this size the exact O(n^2 d) diameter is replaced by 2 * max_norm.
EXACT_DIAMETER_LIMIT = 20_000


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) used everywhere a seed is accepted."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_vector(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Coerce ``x`` to a finite 1-D float64 array, optionally checking its length."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"{name} has dimension {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v


@dataclass(frozen=True)
class Diameter:
    """Result of :func:`diameter`. ``lower == upper`` in exact mode."""

    lower: float
    upper: float
    exact: bool

    @property
    def value(self) -> float:
        # Upper bound keeps convergence predictions valid when only sampled.
        return self.upper


@dataclass(frozen=True, eq=False)
class Dataset:
    """The finite set ``S`` whose convex hull ``B(S)`` is optimized over."""

    points: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1:
            pts = pts.reshape(1, -1) if pts.size else pts.reshape(0, 0)
        if pts.ndim != 2:
            raise ValueError(f"points must be a 2-D array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
            raise ValueError(f"point {bad} contains non-finite values")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.n

    @cached_property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    @property
    def max_norm(self) -> float:
        return float(self.norms.max()) if self.n else 0.0

    @property
    def max_diameter(self) -> float:
        """Exact diameter for ``n <= EXACT_DIAMETER_LIMIT``, else ``2 * max_norm``."""
        if "diam" not in self._cache:
            if self.n <= EXACT_DIAMETER_LIMIT:
                d = diameter(self, mode="exact")
            else:
                d = diameter(self, mode="sampled", k=10_000)
            self._cache["diam"] = d
        return self._cache["diam"].value

    # -- ingestion ---------------------------------------------------------

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """One point per row, comma separated, no header."""
        text = Path(path).read_text()
        rows = [r for r in text.splitlines() if r.strip()]
        if not rows:
            raise ValueError("empty dataset")
        # float() is locale-independent, unlike some numpy loaders.
        data = [[float(tok) for tok in r.split(",")] for r in rows]
        widths = {len(r) for r in data}
        if len(widths) != 1:
            raise ValueError(f"ragged CSV rows: widths {sorted(widths)}")
        return cls(np.array(data, dtype=np.float64))

    def to_csv(self, path) -> None:
        lines = [",".join(repr(float(v)) for v in row) for row in self.points]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_binary(cls, path) -> "Dataset":
        """Little-endian f64 row-major array with a ``<path>.json`` sidecar ``{"n", "d"}``."""
        path = Path(path)
        meta = json.loads(_sidecar(path).read_text())
        n, d = int(meta["n"]), int(meta["d"])
        raw = np.fromfile(path, dtype="<f8")
        if raw.size != n * d:
            raise ValueError(f"binary file holds {raw.size} values, sidecar says {n}x{d}")
        return cls(raw.reshape(n, d))

    def to_binary(self, path) -> None:
        path = Path(path)
        self.points.astype("<f8").tofile(path)
        _sidecar(path).write_text(json.dumps({"n": self.n, "d": self.dim}))


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_dataset(path) -> Dataset:
    """Dispatch on extension: ``.csv`` is text, anything else is raw binary."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return Dataset.from_csv(path)
    return Dataset.from_binary(path)


def diameter(ds: Dataset, mode: str = "exact", k: int = 1000, seed: int = 0) -> Diameter:
    """Maximum pairwise l2 distance of ``ds``.

    ``mode="exact"`` is an O(n^2 d) scan done in row blocks. ``mode="sampled"``
    takes the largest distance over ``k`` random pairs as a lower bound and
    ``2 * max_norm`` as the upper bound.
    """
    if ds.n == 0:
        raise ValueError("empty dataset")
    if ds.n == 1:
        return Diameter(0.0, 0.0, True)
    pts = ds.points
    if mode == "exact":
        sq = np.einsum("ij,ij->i", pts, pts)
        best, pair = -1.0, (0, 0)
        block = max(1, 4_000_000 // max(ds.n, 1))
        for start in range(0, ds.n, block):
            chunk = pts[start:start + block]
            d2 = sq[start:start + block, None] + sq[None, :] - 2.0 * chunk @ pts.T
            flat = int(np.argmax(d2))
            if d2.flat[flat] > best:
                best = float(d2.flat[flat])
                pair = (start + flat // ds.n, flat % ds.n)
        # The Gram expansion loses precision; recompute the winning pair directly.
        val = float(np.linalg.norm(pts[pair[0]] - pts[pair[1]]))
        return Diameter(val, val, True)
    if mode == "sampled":
        rng = make_rng(seed)
        i = rng.integers(0, ds.n, size=k)
        j = rng.integers(0, ds.n, size=k)
        lower = float(np.linalg.norm(pts[i] - pts[j], axis=1).max())
        return Diameter(lower, max(lower, 2.0 * ds.max_norm), False)
    raise ValueError(f"unknown diameter mode {mode!r}")


def convex_combination(points, weights) -> np.ndarray:
    """Return ``sum_i weights[i] * points[i]`` after checking the weights form a simplex point."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != pts.shape[0]:
        raise ValueError(f"{w.shape[0] if w.ndim else 1} weights for {pts.shape[0]} points")
    if np.any(w < 0):
        raise ValueError("not a convex combination: negative weight")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("not a convex combination")
    return w @ pts


def random_simplex_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    """Flat-Dirichlet weights via normalized exponentials."""
    e = rng.standard_exponential(n)
    w = e / e.sum()
    # Push the rounding residue onto the largest weight so the sum is 1 to the ulp.
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


def random_hull_point(ds: Dataset, rng: np.random.Generator) -> np.ndarray:
    """Random point of ``B(S)`` with flat-Dirichlet barycentric weights."""
    if ds.n == 0:
        raise ValueError("empty dataset")
    return convex_combination(ds.points, random_simplex_weights(ds.n, rng))


def random_unit_vectors(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
