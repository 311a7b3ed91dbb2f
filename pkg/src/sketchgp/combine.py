"""Collaborative posterior: one-dimensional Wasserstein barycenter by quantile averaging.

For a scalar functional, the barycenter of H distributions has quantile
function equal to the average of the H quantile functions.  Each sketched
posterior is summarized by its empirical quantiles on a fixed grid of
levels; the combined posterior is the pointwise mean of those vectors and is
sampled by inverting the resulting piecewise-linear quantile function.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .binio import read_labeled_matrix, write_labeled_matrix

COLLAB_MAGIC = b"SKGPCOLL"


@dataclass(frozen=True)
class QuantileGrid:
    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 1 or len(xi) < 1:
            raise ValueError("quantile grid must be a non-empty vector")
        if xi[0] <= 0 or xi[-1] >= 1:
            raise ValueError("quantile levels must lie strictly inside (0, 1)")
        if np.any(np.diff(xi) <= 0):
            raise ValueError("quantile levels must be strictly increasing")
        object.__setattr__(self, "xi", xi)

    @classmethod
    def default(cls, step: float = 0.0005) -> "QuantileGrid":
        count = int(round(1.0 / step)) - 1
        return cls(np.arange(1, count + 1) * step)

    def __len__(self):
        return len(self.xi)

    def nearest(self, level: float) -> int:
        return int(np.argmin(np.abs(self.xi - level)))


def empirical_quantiles(draws, grid: QuantileGrid) -> np.ndarray:
    """Linear-interpolation (type 7) quantiles; works column-wise on 2-D input."""
    draws = np.asarray(draws, dtype=float)
    if draws.shape[0] == 0:
        raise ValueError("no draws")
    if not np.all(np.isfinite(draws)):
        raise ValueError("draws contain non-finite values")
    return np.quantile(draws, grid.xi, axis=0, method="linear")


@dataclass
class CollaborativePosterior:
    grid: QuantileGrid
    quantiles: dict[str, np.ndarray]
    H: int
    provenance: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.quantiles)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.quantiles[name]

    def save_csv(self, path, extra: dict | None = None) -> None:
        extra = extra or {}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["functional", "xi", "value"] + list(extra))
            for name, q in self.quantiles.items():
                for x, v in zip(self.grid.xi, q):
                    w.writerow([name, repr(float(x)), repr(float(v))] + list(extra.values()))

    def density(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Density implied by the quantile function: f(Q(xi)) = 1 / Q'(xi)."""
        q = self.quantiles[name]
        if len(q) < 2:
            return q.copy(), np.full(len(q), np.nan)
        slope = np.gradient(q, self.grid.xi)
        with np.errstate(divide="ignore"):
            dens = np.where(slope > 0, 1.0 / np.where(slope > 0, slope, 1.0), np.inf)
        return q.copy(), dens

    def save(self, path) -> None:
        mat = np.vstack([self.quantiles[k] for k in self.names]) if self.quantiles else np.zeros((0, len(self.grid)))
        meta = {"names": self.names, "xi": self.grid.xi, "H": self.H, "provenance": self.provenance}
        write_labeled_matrix(path, COLLAB_MAGIC, mat, meta)

    @classmethod
    def load(cls, path) -> "CollaborativePosterior":
        mat, meta = read_labeled_matrix(path, COLLAB_MAGIC)
        grid = QuantileGrid(np.asarray(meta["xi"]))
        return cls(grid, {k: mat[i] for i, k in enumerate(meta["names"])}, meta["H"], meta["provenance"])


def average_quantiles(per_sketch: np.ndarray) -> np.ndarray:
    """Mean over the leading (sketch) axis.

    Values are sorted along that axis first so the floating-point sum does
    not depend on the order the sketches were supplied in, and averaged as
    offsets from the smallest so that H identical inputs come back exactly.
    """
    per_sketch = np.sort(np.asarray(per_sketch, dtype=float), axis=0)
    base = per_sketch[0]
    out = base + np.mean(per_sketch - base, axis=0)
    # rounding can leave ulp-sized dips along the level axis
    return np.maximum.accumulate(out, axis=0)


def _draws_of(post, functional: str) -> np.ndarray:
    if hasattr(post, "functional"):
        return post.functional(functional)
    return np.asarray(post[functional])


def combine_quantiles(posteriors: Sequence, functional: str, grid: QuantileGrid | None = None) -> np.ndarray:
    grid = grid or QuantileGrid.default()
    if not posteriors:
        raise ValueError("need at least one posterior")
    per = np.stack([empirical_quantiles(_draws_of(p, functional), grid) for p in posteriors])
    return average_quantiles(per)


def combine_posteriors(posteriors: Sequence, functionals: Iterable[str] | None = None,
                       grid: QuantileGrid | None = None) -> CollaborativePosterior:
    grid = grid or QuantileGrid.default()
    if functionals is None:
        functionals = posteriors[0].names
    functionals = list(functionals)
    out = {name: combine_quantiles(posteriors, name, grid) for name in functionals}
    prov = {
        "sketch_ids": [getattr(p, "sketch_id", None) for p in posteriors],
        "thetas": [getattr(p, "theta", None) for p in posteriors],
    }
    return CollaborativePosterior(grid, out, len(posteriors), prov)


def combine_draw_matrices(matrices: Sequence[np.ndarray], grid: QuantileGrid | None = None) -> np.ndarray:
    """Column-wise combination of H draw matrices (L_h x N); returns len(grid) x N."""
    grid = grid or QuantileGrid.default()
    per = np.stack([empirical_quantiles(m, grid) for m in matrices])
    return average_quantiles(per)


def sample_from_quantiles(xi: np.ndarray, qvals: np.ndarray, count: int, rng) -> np.ndarray:
    """Inverse-CDF sampling; ``qvals`` is len(xi) or len(xi) x N (independent per column)."""
    qvals = np.asarray(qvals, dtype=float)
    if qvals.ndim == 1:
        u = rng.uniform(xi[0], xi[-1], size=count)
        return np.interp(u, xi, qvals)
    n_col = qvals.shape[1]
    u = rng.uniform(xi[0], xi[-1], size=(count, n_col))
    pos = np.interp(u, xi, np.arange(len(xi), dtype=float))
    lo = np.minimum(np.floor(pos).astype(np.int64), len(xi) - 2) if len(xi) > 1 else np.zeros_like(pos, dtype=np.int64)
    frac = pos - lo
    cols = np.arange(n_col)[None, :]
    if len(xi) == 1:
        return np.broadcast_to(qvals[0], (count, n_col)).copy()
    return qvals[lo, cols] * (1.0 - frac) + qvals[lo + 1, cols] * frac


def sample_collaborative(cp: CollaborativePosterior, functional: str, count: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return sample_from_quantiles(cp.grid.xi, cp[functional], count, rng)


def summarize(cp: CollaborativePosterior, functional: str) -> dict[str, float]:
    q = cp[functional]
    return {
        "median": float(q[cp.grid.nearest(0.5)]),
        "ci95_low": float(q[cp.grid.nearest(0.025)]),
        "ci95_high": float(q[cp.grid.nearest(0.975)]),
    }
