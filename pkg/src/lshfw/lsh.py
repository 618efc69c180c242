"""Multi-table locality sensitive hashing for unit vectors.

Two hash families are available:

``signed_random_projection``
    Each table concatenates ``K`` hyperplane signs ``sign(<h, x>)`` with
    Gaussian ``h``. Two unit vectors at angle ``theta`` agree on one bit with
    probability ``1 - theta / pi``.

``random_rotation_bucket``
    Cross-polytope hashing: a random rotation ``R`` followed by
    ``argmax_i |(Rx)_i|`` and its sign. Each sub-hash yields
    ``ceil(log2(2 * dim))`` bits; a table packs ``max(1, K // that)`` sub-hashes.

Tables are stored as a sorted key array plus the permutation of point
indices, so a bucket lookup is a binary search.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .vecspace import make_rng

FAMILIES = ("signed_random_projection", "random_rotation_bucket")
MAX_TOTAL_BITS = 4096
MAX_SUGGESTED_TABLES = 128
UNIT_TOL = 1e-6

MAGIC = b"LSHFWIDX"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class HashFamilyConfig:
    family: str = "signed_random_projection"
    bits_per_table: int = 12
    num_tables: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown hash family {self.family!r}")
        if not 1 <= self.bits_per_table <= 64:
            raise ValueError("bits_per_table must be in [1, 64]")
        if self.num_tables < 1:
            raise ValueError("num_tables must be >= 1")
        if self.bits_per_table * self.num_tables > MAX_TOTAL_BITS:
            raise ValueError(
                f"K*L = {self.bits_per_table * self.num_tables} exceeds {MAX_TOTAL_BITS}"
            )


def theoretical_rho(c: float, tau: float) -> float:
    """Query exponent of the unit-sphere (c, tau)-MaxIP data structure, o(1) term dropped."""
    if not (0.0 < c < 1.0):
        raise ValueError(f"c must lie in (0, 1), got {c}")
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    r = (1.0 - tau) ** 2 / (1.0 - c * tau) ** 2
    return 2.0 * r - r * r


def repetition_factor(iterations: int, delta: float) -> int:
    """``ceil(log2(T / delta))`` independent copies for T adaptive rounds at failure rate delta."""
    if iterations < 1 or not (0.0 < delta < 1.0):
        raise ValueError("need iterations >= 1 and delta in (0, 1)")
    return max(1, math.ceil(math.log2(iterations / delta)))


def suggest_params(c: float, tau: float, n: int, repetitions: int = 1,
                   family: str = "signed_random_projection", seed: int = 0) -> HashFamilyConfig:
    """Heuristic default: ``K = ceil(log2 n)``, ``L = min(ceil(n**rho), 128) * repetitions``.

    ``L`` is trimmed further if needed so that ``K * L`` respects the guardrail.
    """
    rho = theoretical_rho(c, tau)
    k = max(1, min(64, math.ceil(math.log2(max(n, 2)))))
    tables = min(math.ceil(max(n, 1) ** rho), MAX_SUGGESTED_TABLES) * max(1, repetitions)
    tables = max(1, min(tables, MAX_TOTAL_BITS // k))
    return HashFamilyConfig(family=family, bits_per_table=k, num_tables=tables, seed=seed)


def srp_collision_probability(cos_angle) -> np.ndarray:
    """Per-bit collision probability of signed random projections."""
    return 1.0 - np.arccos(np.clip(cos_angle, -1.0, 1.0)) / np.pi


class LshIndex:
    """Immutable multi-table index over unit vectors. Use :func:`build` to create one."""

    def __init__(self, config: HashFamilyConfig, data: np.ndarray, projections: np.ndarray,
                 keys: np.ndarray, order: np.ndarray):
        self.config = config
        self.data = data
        self.dim = data.shape[1]
        # projections: (L, P, dim); keys/order: (L, n) with keys sorted per table
        self.projections = projections
        self.keys = keys
        self.order = order
        for arr in (self.data, self.projections, self.keys, self.order):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def num_tables(self) -> int:
        return self.config.num_tables

    def hash_keys(self, x: np.ndarray) -> np.ndarray:
        """Bucket keys of the rows of ``x`` (shape ``(m, dim)``) in every table, shape ``(L, m)``."""
        return _hash(self.config, self.projections, np.atleast_2d(x))

    def candidates(self, q) -> np.ndarray:
        """Sorted, deduplicated indices of points sharing at least one bucket with ``q``."""
        q = np.asarray(q, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise ValueError(f"query has dimension {q.shape[-1]}, index expects {self.dim}")
        if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
            raise ValueError(f"query is not unit norm (|q| = {np.linalg.norm(q):.6g})")
        return self._lookup(q)

    def _lookup(self, q: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.empty(0, dtype=np.int64)
        qk = self.hash_keys(q)[:, 0]
        parts = []
        for t in range(self.num_tables):
            row = self.keys[t]
            lo = np.searchsorted(row, qk[t], side="left")
            hi = np.searchsorted(row, qk[t], side="right")
            if hi > lo:
                parts.append(self.order[t, lo:hi])
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(parts))

    def bucket_sizes(self) -> list[np.ndarray]:
        return [np.unique(row, return_counts=True)[1] for row in self.keys]

    # -- serialization -----------------------------------------------------

    def to_bytes(self, extra_header: dict | None = None) -> bytes:
        header = {"config": asdict(self.config), "n": self.n, "dim": self.dim,
                  "proj_shape": list(self.projections.shape)}
        if extra_header:
            header["extra"] = extra_header
        hbytes = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        buf.write(hbytes)
        for arr, dt in ((self.data, "<f8"), (self.projections, "<f8"),
                        (self.keys, "<u8"), (self.order, "<i8")):
            buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return buf.getvalue()

    def save(self, path, extra_header: dict | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(extra_header))

    @classmethod
    def from_bytes(cls, blob: bytes, expected_dim: int | None = None) -> tuple["LshIndex", dict]:
        """Inverse of :meth:`to_bytes`; also returns the ``extra`` header dict."""
        if blob[:8] != MAGIC:
            raise ValueError("not an LSH index file (bad magic)")
        version, hlen = struct.unpack("<II", blob[8:16])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported index format version {version}")
        header = json.loads(blob[16:16 + hlen])
        n, dim = header["n"], header["dim"]
        if expected_dim is not None and dim != expected_dim:
            raise ValueError(f"index dimension {dim} does not match expected {expected_dim}")
        cfg = HashFamilyConfig(**header["config"])
        pshape = tuple(header["proj_shape"])
        off = 16 + hlen

        def take(count, dtype, shape):
            nonlocal off
            nbytes = count * 8
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
            off += nbytes
            return arr.astype(dtype.lstrip("<"), copy=True)

        data = take(n * dim, "<f8", (n, dim))
        proj = take(int(np.prod(pshape)), "<f8", pshape)
        keys = take(cfg.num_tables * n, "<u8", (cfg.num_tables, n))
        order = take(cfg.num_tables * n, "<i8", (cfg.num_tables, n))
        if off != len(blob):
            raise ValueError("trailing bytes in index file")
        return cls(cfg, data, proj, keys, order), header.get("extra", {})

    @classmethod
    def load(cls, path, expected_dim: int | None = None) -> tuple["LshIndex", dict]:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), expected_dim)


def _cp_bits(dim: int) -> int:
    return max(1, math.ceil(math.log2(2 * dim)))


def _make_projections(cfg: HashFamilyConfig, dim: int) -> np.ndarray:
    rng = make_rng(cfg.seed)
    L, K = cfg.num_tables, cfg.bits_per_table
    if cfg.family == "signed_random_projection":
        return rng.standard_normal((L, K, dim))
    per = _cp_bits(dim)
    subs = max(1, K // per)
    if subs * per > 64:
        subs = 64 // per
    rots = np.empty((L, subs * dim, dim))
    for t in range(L):
        for s in range(subs):
            g = rng.standard_normal((dim, dim))
            qm, r = np.linalg.qr(g)
            qm = qm * np.sign(np.diag(r))
            rots[t, s * dim:(s + 1) * dim] = qm
    return rots


def _hash(cfg: HashFamilyConfig, proj: np.ndarray, x: np.ndarray) -> np.ndarray:
    L = proj.shape[0]
    m = x.shape[0]
    keys = np.zeros((L, m), dtype=np.uint64)
    if cfg.family == "signed_random_projection":
        K = proj.shape[1]
        bits = (x @ proj.reshape(L * K, -1).T >= 0.0).reshape(m, L, K)
        # bit i carries weight 2**i: little-endian bit packing, zero-padded to 8 bytes
        packed = np.packbits(bits, axis=2, bitorder="little")
        buf = np.zeros((m, L, 8), dtype=np.uint8)
        buf[:, :, :packed.shape[2]] = packed
        return np.ascontiguousarray(buf.view("<u8")[:, :, 0].T).astype(np.uint64)
    dim = proj.shape[2]
    per = _cp_bits(dim)
    subs = proj.shape[1] // dim
    for t in range(L):
        z = (x @ proj[t].T).reshape(m, subs, dim)
        idx = np.argmax(np.abs(z), axis=2)
        neg = np.take_along_axis(z, idx[..., None], axis=2)[..., 0] < 0
        code = (idx + dim * neg).astype(np.uint64)
        shifts = (np.arange(subs, dtype=np.uint64) * np.uint64(per))
        keys[t] = (code << shifts).sum(axis=1, dtype=np.uint64)
    return keys


def build(points, cfg: HashFamilyConfig, dim: int | None = None) -> LshIndex:
    """Hash every unit vector in ``points`` into ``cfg.num_tables`` tables."""
    data = np.array(points, dtype=np.float64, copy=True)
    if data.size == 0:
        data = data.reshape(0, dim if dim is not None else (data.shape[-1] if data.ndim == 2 else 0))
    if data.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {data.shape}")
    norms = np.linalg.norm(data, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        raise ValueError(f"point {int(bad[0])} is not unit norm (|v| = {norms[bad[0]]:.6g})")
    proj = _make_projections(cfg, data.shape[1])
    n = data.shape[0]
    keys = np.empty((cfg.num_tables, n), dtype=np.uint64)
    order = np.empty((cfg.num_tables, n), dtype=np.int64)
    chunk = 50_000
    raw = np.empty((cfg.num_tables, n), dtype=np.uint64)
    for start in range(0, n, chunk):
        raw[:, start:start + chunk] = _hash(cfg, proj, data[start:start + chunk])
    # narrow keys let numpy pick its radix sort; the stable order is unchanged
    narrow = np.uint16 if int(raw.max(initial=0)) < 2**16 else np.uint64
    for t in range(cfg.num_tables):
        o = np.argsort(raw[t].astype(narrow), kind="stable")
        order[t] = o
        keys[t] = raw[t, o]
    return LshIndex(cfg, data, proj, keys, order)
