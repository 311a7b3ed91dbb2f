"""Exponential covariance and its full, low-rank (MPP) and sparse (NNGP) forms.

All operators work at unit marginal scale; callers multiply by sigma^2.
A sketch argument ``phi`` may be a dense m x n array or any object exposing
either ``indices`` (selection sketch) or ``columns(start, stop)`` (lazily
generated dense sketch); see :mod:`sketchgp.sketch`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular
from scipy.spatial.distance import cdist

JITTER = 1e-8
DEFAULT_DENSE_CAP = 20000
_ROW_BLOCK = 1024


class CovarianceError(RuntimeError):
    """Raised when a covariance factorization fails even after jitter."""


class DenseCapError(MemoryError):
    """Refusal to materialize an n x n covariance above the configured cap."""


def exp_kernel(u, v, theta: float) -> float:
    """exp(-theta * ||u - v||) for two points."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(np.exp(-theta * np.sqrt(np.sum((u - v) ** 2))))


def exp_cov(a: np.ndarray, b: np.ndarray, theta: float) -> np.ndarray:
    """Matrix of exponential correlations between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return np.exp(-theta * cdist(a, b))


def cholesky_jitter(a: np.ndarray, jitter: float = JITTER, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor; on failure retry once with ``jitter`` on the diagonal."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(a + jitter * np.eye(a.shape[0]))
    except np.linalg.LinAlgError:
        raise CovarianceError(
            f"{what} is not positive definite even with {jitter:g} diagonal jitter"
        ) from None


def _sketch_kind(phi):
    if isinstance(phi, np.ndarray):
        return "dense"
    if getattr(phi, "indices", None) is not None:
        return "selection"
    return "lazy"


def _columns(phi, start: int, stop: int) -> np.ndarray:
    if isinstance(phi, np.ndarray):
        return phi[:, start:stop]
    return phi.columns(start, stop)


def _dense_phi(phi, n: int) -> np.ndarray:
    if isinstance(phi, np.ndarray):
        return phi
    if _sketch_kind(phi) == "selection":
        out = np.zeros((len(phi.indices), n))
        out[np.arange(len(phi.indices)), phi.indices] = 1.0
        return out
    return phi.columns(0, n)


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


class CovarianceOperator:
    """Unit-scale covariance K(theta) over fixed training locations."""

    variant = "base"

    def __init__(self, locations, theta: float, dense_cap: int = DEFAULT_DENSE_CAP):
        if not theta > 0:
            raise ValueError(f"theta must be positive, got {theta}")
        self.locations = np.array(np.atleast_2d(locations), dtype=float)
        self.locations.setflags(write=False)
        self.theta = float(theta)
        self.dense_cap = int(dense_cap)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    def _check_cap(self, size: int, what: str) -> None:
        if size > self.dense_cap:
            raise DenseCapError(
                f"refusing to materialize {what} with {size} rows (dense cap {self.dense_cap})"
            )

    # subclasses implement the following
    def apply(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def quad_form(self, phi) -> np.ndarray:
        raise NotImplementedError

    def sketch_cross(self, new_locations, phi) -> np.ndarray:
        """Cov(w*, w) Phi^T, shape n* x m."""
        raise NotImplementedError

    def prior_cov(self, new_locations) -> np.ndarray:
        """Covariance of w at new locations under this variant."""
        raise NotImplementedError

    def dense(self) -> np.ndarray:
        self._check_cap(self.n, "covariance")
        return self.apply(np.eye(self.n))

    def cross(self, new_locations) -> np.ndarray:
        """Cov(w*, w), shape n* x n."""
        return self.sketch_cross(new_locations, np.eye(self.n))


class FullGP(CovarianceOperator):
    variant = "full"

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        squeeze = v.ndim == 1
        v = v.reshape(self.n, -1)
        out = np.empty_like(v)
        for s in range(0, self.n, _ROW_BLOCK):
            blk = exp_cov(self.locations[s : s + _ROW_BLOCK], self.locations, self.theta)
            out[s : s + _ROW_BLOCK] = blk @ v
        return out[:, 0] if squeeze else out

    def dense(self):
        self._check_cap(self.n, "covariance")
        return exp_cov(self.locations, self.locations, self.theta)

    def quad_form(self, phi):
        if _sketch_kind(phi) == "selection":
            pts = self.locations[phi.indices]
            return exp_cov(pts, pts, self.theta)
        # sum over row blocks B of Phi[:, B] K[B, :] Phi^T; never holds n x n
        phi_full = _dense_phi(phi, self.n)
        m = phi_full.shape[0]
        acc = np.zeros((m, m))
        for s in range(0, self.n, _ROW_BLOCK):
            kb = exp_cov(self.locations[s : s + _ROW_BLOCK], self.locations, self.theta)
            acc += phi_full[:, s : s + _ROW_BLOCK] @ (kb @ phi_full.T)
        return _symmetrize(acc)

    def sketch_cross(self, new_locations, phi):
        new_locations = np.atleast_2d(new_locations)
        if _sketch_kind(phi) == "selection":
            return exp_cov(new_locations, self.locations[phi.indices], self.theta)
        phi_full = _dense_phi(phi, self.n)
        out = np.zeros((new_locations.shape[0], phi_full.shape[0]))
        for s in range(0, self.n, _ROW_BLOCK):
            c = exp_cov(new_locations, self.locations[s : s + _ROW_BLOCK], self.theta)
            out += c @ phi_full[:, s : s + _ROW_BLOCK].T
        return out

    def prior_cov(self, new_locations):
        new_locations = np.atleast_2d(new_locations)
        self._check_cap(new_locations.shape[0], "predictive covariance")
        return exp_cov(new_locations, new_locations, self.theta)


class MPP(CovarianceOperator):
    """Modified predictive process: C K_knot^{-1} C^T + D, C = K(U, knots)."""

    variant = "mpp"

    def __init__(self, locations, theta, n_knot: int, knot_seed: int = 0,
                 knot_indices=None, dense_cap: int = DEFAULT_DENSE_CAP):
        super().__init__(locations, theta, dense_cap)
        n = self.n
        if knot_indices is None:
            if not 1 <= n_knot <= n:
                raise ValueError(f"n_knot must lie in [1, {n}], got {n_knot}")
            rng = np.random.default_rng(knot_seed)
            knot_indices = np.sort(rng.choice(n, size=n_knot, replace=False))
        self.knot_indices = np.asarray(knot_indices, dtype=np.int64)
        self.knots = self.locations[self.knot_indices]
        k_knot = exp_cov(self.knots, self.knots, self.theta)
        self._chol = cholesky_jitter(k_knot, what="knot covariance")
        cross = exp_cov(self.locations, self.knots, self.theta)
        # B = C L^{-T}, so C K_knot^{-1} C^T = B B^T
        self._b = sla.solve_triangular(self._chol, cross.T, lower=True).T
        self.diag_correction = np.clip(1.0 - np.sum(self._b**2, axis=1), 0.0, 1.0)

    @property
    def n_knot(self) -> int:
        return len(self.knot_indices)

    def _whiten_new(self, new_locations):
        c = exp_cov(np.atleast_2d(new_locations), self.knots, self.theta)
        return sla.solve_triangular(self._chol, c.T, lower=True).T

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return self._b @ (self._b.T @ v) + self.diag_correction * v
        return self._b @ (self._b.T @ v) + self.diag_correction[:, None] * v

    def quad_form(self, phi):
        if _sketch_kind(phi) == "selection":
            b = self._b[phi.indices]
            return _symmetrize(b @ b.T + np.diag(self.diag_correction[phi.indices]))
        phi_full = _dense_phi(phi, self.n)
        pb = phi_full @ self._b
        return _symmetrize(pb @ pb.T + (phi_full * self.diag_correction) @ phi_full.T)

    def sketch_cross(self, new_locations, phi):
        bn = self._whiten_new(new_locations)
        if _sketch_kind(phi) == "selection":
            return bn @ self._b[phi.indices].T
        return bn @ (_dense_phi(phi, self.n) @ self._b).T

    def prior_cov(self, new_locations):
        new_locations = np.atleast_2d(new_locations)
        self._check_cap(new_locations.shape[0], "predictive covariance")
        bn = self._whiten_new(new_locations)
        d = np.clip(1.0 - np.sum(bn**2, axis=1), 0.0, 1.0)
        return _symmetrize(bn @ bn.T + np.diag(d))


def coordinate_order(locations: np.ndarray) -> np.ndarray:
    """Sort by first coordinate, ties broken by the following ones."""
    return np.lexsort(locations.T[::-1])


def _nn_factor(points: np.ndarray, theta: float, k: int):
    """Vecchia factor over ``points`` in their given order.

    Returns (A, D): A strictly lower triangular in CSR form with at most k
    nonzeros per row, D the conditional variances.  Point i conditions on
    its k nearest among points 0..i-1.
    """
    n = points.shape[0]
    rows, cols, vals = [], [], []
    dvar = np.ones(n)
    for i in range(1, n):
        prev = points[:i]
        if i <= k:
            nb = np.arange(i)
        else:
            dist = np.sum((prev - points[i]) ** 2, axis=1)
            nb = np.sort(np.argpartition(dist, k - 1)[:k])
        c_nn = exp_cov(points[nb], points[nb], theta)
        c_in = exp_cov(points[nb], points[i : i + 1], theta)[:, 0]
        lower = cholesky_jitter(c_nn, what=f"neighbor covariance of point {i}")
        a = sla.cho_solve((lower, True), c_in)
        dvar[i] = 1.0 - c_in @ a
        if dvar[i] <= 0:
            raise CovarianceError(f"non-positive conditional variance at point {i}")
        rows.extend([i] * len(nb))
        cols.extend(nb.tolist())
        vals.extend(a.tolist())
    a_mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return a_mat, dvar


class NNGP(CovarianceOperator):
    """Nearest-neighbor GP: K^{-1} = (I - A)^T D^{-1} (I - A) in a fixed ordering."""

    variant = "nngp"

    def __init__(self, locations, theta, k: int,
                 ordering: Literal["coordinate-sort", "input-order"] = "coordinate-sort",
                 dense_cap: int = DEFAULT_DENSE_CAP):
        super().__init__(locations, theta, dense_cap)
        n = self.n
        if not 1 <= k < max(n, 2):
            raise ValueError(f"k must lie in [1, n-1], got k={k} with n={n}")
        self.k = int(k)
        self.ordering = ordering
        if ordering == "coordinate-sort":
            self.order = coordinate_order(self.locations)
        elif ordering == "input-order":
            self.order = np.arange(n)
        else:
            raise ValueError(f"unknown ordering {ordering!r}")
        # position of training point j in the ordering
        self.rank = np.empty(n, dtype=np.int64)
        self.rank[self.order] = np.arange(n)
        self.A, self.D = _nn_factor(self.locations[self.order], self.theta, self.k)
        self._imA = (sp.identity(n, format="csr") - self.A).tocsr()
        self._imA_t = self._imA.T.tocsr()

    def precision(self) -> sp.csr_matrix:
        """K^{-1} in the original (input) index order."""
        p = self._imA_t @ sp.diags(1.0 / self.D) @ self._imA
        perm = sp.csr_matrix((np.ones(self.n), (self.rank, np.arange(self.n))),
                             shape=(self.n, self.n))
        return (perm.T @ p @ perm).tocsr()

    def _apply_ordered(self, v):
        # K = (I - A)^{-1} D (I - A)^{-T}
        t = spsolve_triangular(self._imA_t, v, lower=False)
        t = self.D.reshape((-1,) + (1,) * (t.ndim - 1)) * t
        return spsolve_triangular(self._imA, t, lower=True)

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        out[self.order] = self._apply_ordered(v[self.order])
        return out

    def quad_form(self, phi):
        if _sketch_kind(phi) == "selection":
            idx = np.asarray(phi.indices)
            e = np.zeros((self.n, len(idx)))
            e[idx, np.arange(len(idx))] = 1.0
            return _symmetrize(self.apply(e)[idx])
        phi_t = _dense_phi(phi, self.n).T[self.order]
        # Phi K Phi^T = M^T D M with (I - A)^T M = Phi^T (ordered)
        mm = spsolve_triangular(self._imA_t, phi_t, lower=False)
        return _symmetrize(mm.T @ (self.D[:, None] * mm))

    def _new_point_factor(self, new_locations):
        """Rows a*_i over training points and conditional variances d*_i."""
        new_locations = np.atleast_2d(new_locations)
        ns = new_locations.shape[0]
        k = min(self.k, self.n)
        dist = cdist(new_locations, self.locations)
        rows, cols, vals = [], [], []
        dstar = np.empty(ns)
        for i in range(ns):
            nb = np.sort(np.argpartition(dist[i], k - 1)[:k]) if k < self.n else np.arange(self.n)
            c_nn = exp_cov(self.locations[nb], self.locations[nb], self.theta)
            c_in = np.exp(-self.theta * dist[i, nb])
            lower = cholesky_jitter(c_nn, what=f"neighbor covariance of new point {i}")
            a = sla.cho_solve((lower, True), c_in)
            dstar[i] = max(1.0 - c_in @ a, 0.0)
            rows.extend([i] * len(nb))
            cols.extend(nb.tolist())
            vals.extend(a.tolist())
        a_star = sp.csr_matrix((vals, (rows, cols)), shape=(ns, self.n))
        return a_star, dstar

    def sketch_cross(self, new_locations, phi):
        a_star, _ = self._new_point_factor(new_locations)
        phi_t = _dense_phi(phi, self.n).T
        return np.asarray(a_star @ self.apply(phi_t))

    def prior_cov(self, new_locations):
        new_locations = np.atleast_2d(new_locations)
        self._check_cap(new_locations.shape[0], "predictive covariance")
        a_star, dstar = self._new_point_factor(new_locations)
        ka = self.apply(a_star.T.toarray())
        return _symmetrize(np.asarray(a_star @ ka) + np.diag(dstar))


@dataclass(frozen=True)
class KernelSpec:
    theta: float
    variant: Literal["full", "mpp", "nngp"] = "full"
    n_knot: int | None = None
    knot_seed: int = 0
    k: int | None = None
    ordering: Literal["coordinate-sort", "input-order"] = "coordinate-sort"

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.variant == "mpp" and (self.n_knot is None or self.n_knot < 1):
            raise ValueError("mpp needs n_knot >= 1")
        if self.variant == "nngp" and (self.k is None or self.k < 1):
            raise ValueError("nngp needs k >= 1")
        if self.variant not in ("full", "mpp", "nngp"):
            raise ValueError(f"unknown covariance variant {self.variant!r}")

    def with_theta(self, theta: float) -> "KernelSpec":
        return KernelSpec(theta, self.variant, self.n_knot, self.knot_seed, self.k, self.ordering)

    def build(self, locations, dense_cap: int = DEFAULT_DENSE_CAP) -> CovarianceOperator:
        if self.variant == "full":
            return build_full_gp(locations, self.theta, dense_cap)
        if self.variant == "mpp":
            n_knot = min(self.n_knot, np.atleast_2d(locations).shape[0])
            return build_mpp(locations, self.theta, n_knot, self.knot_seed, dense_cap)
        k = min(self.k, np.atleast_2d(locations).shape[0] - 1)
        return build_nngp(locations, self.theta, k, self.ordering, dense_cap)


def build_full_gp(locations, theta, dense_cap: int = DEFAULT_DENSE_CAP) -> FullGP:
    return FullGP(locations, theta, dense_cap)


def build_mpp(locations, theta, n_knot, knot_seed=0, dense_cap: int = DEFAULT_DENSE_CAP) -> MPP:
    return MPP(locations, theta, n_knot, knot_seed, dense_cap=dense_cap)


def build_nngp(locations, theta, k, ordering="coordinate-sort",
               dense_cap: int = DEFAULT_DENSE_CAP) -> NNGP:
    return NNGP(locations, theta, k, ordering, dense_cap)
