"""Sketching matrices and sketched data.

Gaussian sketches are generated column-block by column-block from a
Philox counter-based stream keyed by the seed, so any column range
``[start, stop)`` of Phi can be regenerated on its own.  This is what lets a
data center build exactly its own block of Phi without seeing the rest.

Partition sketches (DISK-style baselines) are row selections: subdomain
subsets take every point of one rectangular grid cell, stratified subsets
take a proportional random share of every cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .binio import HEADER_SIZE, FormatError, pack_header, read_matrix, unpack_header, write_matrix
from .data import FunctionalDataset

BLOCK_COLUMNS = 256
SKETCH_MAGIC = b"SKGPSKET"

SketchKind = Literal["gaussian", "subdomain", "stratified", "identity"]


def _block_normals(seed: int, block: int, m: int, stream: int = 0) -> np.ndarray:
    """Standard normals for one column block, shape (m, BLOCK_COLUMNS)."""
    bitgen = np.random.Philox(key=int(seed) & (2**128 - 1), counter=[0, block, stream, 0])
    z = np.random.Generator(bitgen).standard_normal((BLOCK_COLUMNS, m))
    return z.T


@dataclass
class SketchMatrix:
    kind: SketchKind
    m: int
    n: int
    seed: int
    indices: np.ndarray | None = None
    grid: tuple[int, ...] | None = None
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "gaussian":
            if not 1 <= self.m < self.n:
                raise ValueError(f"gaussian sketch needs 1 <= m < n, got m={self.m}, n={self.n}")
            if self.indices is not None:
                raise ValueError("gaussian sketch carries no indices")
        else:
            idx = np.asarray(self.indices, dtype=np.int64)
            if idx.ndim != 1 or len(idx) != self.m:
                raise ValueError("selection sketch needs m row indices")
            if len(idx) and (idx.min() < 0 or idx.max() >= self.n):
                raise ValueError("selection indices outside [0, n)")
            if len(np.unique(idx)) != len(idx):
                raise ValueError("selection indices must be distinct")
            self.indices = idx

    @property
    def is_selection(self) -> bool:
        return self.indices is not None

    def columns(self, start: int, stop: int) -> np.ndarray:
        """Dense Phi[:, start:stop]."""
        if not 0 <= start <= stop <= self.n:
            raise ValueError(f"column range [{start}, {stop}) outside [0, {self.n}]")
        if self.is_selection:
            out = np.zeros((self.m, stop - start))
            hit = (self.indices >= start) & (self.indices < stop)
            out[np.nonzero(hit)[0], self.indices[hit] - start] = 1.0
            return out
        if self._dense is not None:
            return self._dense[:, start:stop]
        out = np.empty((self.m, stop - start))
        scale = 1.0 / math.sqrt(self.n)
        first, last = start // BLOCK_COLUMNS, (stop - 1) // BLOCK_COLUMNS
        for b in range(first, last + 1) if stop > start else ():
            lo = b * BLOCK_COLUMNS
            blk = _block_normals(self.seed, b, self.m) * scale
            a, z = max(start, lo), min(stop, lo + BLOCK_COLUMNS)
            out[:, a - start : z - start] = blk[:, a - lo : z - lo]
        return out

    @property
    def matrix(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.columns(0, self.n)
        return self._dense


def gen_gaussian_sketch(m: int, n: int, seed: int) -> SketchMatrix:
    """m x n sketch with i.i.d. N(0, 1/n) entries, reproducible from ``seed``."""
    return SketchMatrix("gaussian", int(m), int(n), int(seed))


def identity_sketch(n: int) -> SketchMatrix:
    return SketchMatrix("identity", n, n, 0, indices=np.arange(n))


# ------------------------------------------------------------- partitions


def _balanced_grid(count: int, extents: np.ndarray) -> tuple[int, ...]:
    """Cells per axis whose product is ``count``, shaped to the box."""
    d = len(extents)
    if d == 1:
        return (count,)
    best, best_cost = None, math.inf
    # enumerate factorizations of count into d factors
    def factorizations(rem, k):
        if k == 1:
            yield (rem,)
            return
        for f in range(1, rem + 1):
            if rem % f == 0:
                for rest in factorizations(rem // f, k - 1):
                    yield (f,) + rest
    for g in factorizations(count, d):
        widths = extents / np.asarray(g)
        cost = np.max(widths) / max(np.min(widths), 1e-300)
        if cost < best_cost:
            best, best_cost = g, cost
    return best


def _cell_labels(locations: np.ndarray, grid: tuple[int, ...]):
    lo = locations.min(axis=0)
    hi = locations.max(axis=0)
    width = np.where(hi > lo, hi - lo, 1.0)
    g = np.asarray(grid)
    coord = np.minimum(((locations - lo) / width * g).astype(np.int64), g - 1)
    labels = np.ravel_multi_index(coord.T, grid)
    centers = np.array(
        [lo + (np.array(ix) + 0.5) * width / g for ix in np.ndindex(*grid)]
    )
    return labels, centers


def gen_partition_sketch(kind: Literal["subdomain", "stratified"], locations,
                         m_target: int, seed: int = 0) -> list[SketchMatrix]:
    """Partition all rows into ceil(n / m_target) selection sketches.

    The box spanned by ``locations`` is cut into an axis-aligned grid with
    that many cells.  ``subdomain`` returns one subset per cell; ``stratified``
    deals each cell's points at random across all subsets.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    n = locations.shape[0]
    if m_target < 1:
        raise ValueError("m_target must be >= 1")
    count = max(1, math.ceil(n / m_target))
    extents = np.ptp(locations, axis=0)
    extents = np.where(extents > 0, extents, 1.0)
    grid = _balanced_grid(count, extents)
    labels, centers = _cell_labels(locations, grid)
    rng = np.random.default_rng(seed)

    cells = [np.nonzero(labels == c)[0] for c in range(len(centers))]
    if kind == "subdomain":
        # empty cells own no points and are dropped
        subsets = [c for c in cells if len(c)]
    elif kind == "stratified":
        subsets = [[] for _ in range(count)]
        offset = int(rng.integers(count))
        for cell in cells:
            if not len(cell):
                continue
            perm = rng.permutation(cell)
            for j, idx in enumerate(perm):
                subsets[(offset + j) % count].append(idx)
            offset = (offset + len(perm)) % count
        subsets = [np.sort(np.asarray(s, dtype=np.int64)) for s in subsets if len(s)]
    else:
        raise ValueError(f"unknown partition kind {kind!r}")

    return [
        SketchMatrix(kind, len(s), n, seed, indices=np.sort(np.asarray(s, dtype=np.int64)), grid=grid)
        for s in subsets
    ]


# ------------------------------------------------------------ sketched data


@dataclass(frozen=True)
class SketchedData:
    y_sk: np.ndarray
    X_sk: np.ndarray
    ones_sk: np.ndarray
    global_attrs: np.ndarray
    power: float
    sketch_id: int = 0

    def __post_init__(self):
        y = np.array(self.y_sk, dtype=float).reshape(len(self.ones_sk), -1)
        object.__setattr__(self, "y_sk", y)
        object.__setattr__(self, "X_sk", np.array(self.X_sk, dtype=float).reshape(y.shape[0], -1))
        object.__setattr__(self, "ones_sk", np.array(self.ones_sk, dtype=float))
        z = np.array(self.global_attrs, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != y.shape[1]:
            raise ValueError(f"global_attrs has {z.shape[0]} rows for {y.shape[1]} simulations")
        object.__setattr__(self, "global_attrs", z)
        if not self.power >= 1:
            raise ValueError(f"power must be >= 1, got {self.power}")

    @property
    def m(self) -> int:
        return self.y_sk.shape[0]

    @property
    def S(self) -> int:
        return self.y_sk.shape[1]

    @property
    def q(self) -> int:
        return self.X_sk.shape[1]

    @property
    def p(self) -> int:
        return self.global_attrs.shape[1]

    def design(self, s: int) -> np.ndarray:
        """A_s = [X_sk : ones_sk z_s^T]."""
        return np.hstack([self.X_sk, np.outer(self.ones_sk, self.global_attrs[s])])

    def equals(self, other: "SketchedData") -> bool:
        return (
            self.power == other.power
            and all(np.array_equal(getattr(self, f), getattr(other, f))
                    for f in ("y_sk", "X_sk", "ones_sk", "global_attrs"))
        )


def apply_sketch(phi: SketchMatrix, ds: FunctionalDataset, sketch_id: int = 0) -> SketchedData:
    if phi.n != ds.n:
        raise ValueError(f"sketch has n={phi.n} but dataset has n={ds.n}")
    if phi.is_selection:
        idx = phi.indices
        return SketchedData(ds.responses[idx], ds.local_attrs[idx], np.ones(len(idx)),
                            ds.global_attrs, ds.n / len(idx), sketch_id)
    mat = phi.matrix
    return SketchedData(mat @ ds.responses, mat @ ds.local_attrs, mat @ np.ones(ds.n),
                        ds.global_attrs, ds.n / phi.m, sketch_id)


def save_sketched(sk: SketchedData, path) -> None:
    """Header (version, m, S, q, p, sketch_id) + power + y, X, ones, Z."""
    with open(path, "wb") as fh:
        fh.write(pack_header(SKETCH_MAGIC, 1, sk.m, sk.S, sk.q, sk.p, sk.sketch_id))
        write_matrix(fh, np.array([sk.power]))
        for a in (sk.y_sk, sk.X_sk, sk.ones_sk, sk.global_attrs):
            write_matrix(fh, a)


def load_sketched(path) -> SketchedData:
    with open(path, "rb") as fh:
        version, m, S, q, p, sid, _ = unpack_header(fh.read(HEADER_SIZE), SKETCH_MAGIC)
        if version != 1:
            raise FormatError(f"unsupported version {version}")
        power = float(read_matrix(fh, (1,))[0])
        y = read_matrix(fh, (m, S))
        x = read_matrix(fh, (m, q))
        ones = read_matrix(fh, (m,))
        z = read_matrix(fh, (S, p))
    return SketchedData(y, x, ones, z, power, sid)
