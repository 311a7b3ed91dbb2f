"""Posterior predictive composition sampling at new index points.

Two modes:

``new``     a fresh simulator run: w* is an independent GP realization, so
            y* ~ N(mu*, sigma2 K** + tau2 I) with mu* = z*^T gamma + X* beta.
``within``  krige against the sketched data of training run s:
            Sigma11 = sigma2 Q + tau2 I, Sigma21 = sigma2 Cov(w*, w) Phi^T,
            mean mu* + Sigma21 Sigma11^{-1} (y_s,sk - Phi mu_s),
            cov  sigma2 K** - Sigma21 Sigma11^{-1} Sigma12 + tau2 I.

Draw columns are ordered run-major: column ``s * n_star + i`` is run s at
location i.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .binio import read_labeled_matrix, write_labeled_matrix
from .data import PredictionRequest
from .kernels import CovarianceOperator, cholesky_jitter
from .sampler import SketchedPosterior
from .sketch import SketchedData

PRED_MAGIC = b"SKGPPRED"


class PredictionError(RuntimeError):
    pass


@dataclass
class PredictiveDraws:
    draws: np.ndarray
    n_star: int
    S_star: int
    sketch_id: int | None = None
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        write_labeled_matrix(path, PRED_MAGIC, self.draws,
                             {"n_star": self.n_star, "S_star": self.S_star,
                              "sketch_id": self.sketch_id, **self.meta})

    @classmethod
    def load(cls, path) -> "PredictiveDraws":
        draws, meta = read_labeled_matrix(path, PRED_MAGIC)
        return cls(draws, meta.pop("n_star"), meta.pop("S_star"), meta.pop("sketch_id"), meta)

    def save_summary_csv(self, path, extra: dict | None = None) -> None:
        mean = self.draws.mean(axis=0)
        lo, hi = np.quantile(self.draws, [0.025, 0.975], axis=0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["coordinate", "run", "location", "mean", "q025", "q975"]
            w.writerow(cols + list(extra or {}))
            for k in range(self.draws.shape[1]):
                w.writerow([k, k // self.n_star, k % self.n_star, repr(float(mean[k])),
                            repr(float(lo[k])), repr(float(hi[k]))] + list((extra or {}).values()))


def _split_params(row: np.ndarray, q: int, p: int):
    return row[:q], row[q : q + p], float(row[q + p]), float(row[q + p + 1])


class PredictiveContext:
    """Parameter-free pieces of the predictive, computed once per sketch."""

    def __init__(self, req: PredictionRequest, cov: CovarianceOperator,
                 sk: SketchedData | None = None, phi=None, quad: np.ndarray | None = None):
        self.req = req
        self.mode = req.mode
        self.n_star = req.n_star
        self.k_star = cov.prior_cov(req.new_locations)
        if self.mode == "new":
            self.l_star = cholesky_jitter(self.k_star, what="new-run predictive covariance")
        else:
            if sk is None or phi is None or quad is None:
                raise PredictionError("within-run prediction needs the sketched data, sketch and Q")
            self.sk = sk
            self.quad = np.asarray(quad)
            self.cross = cov.sketch_cross(req.new_locations, phi)  # Cov(w*, w) Phi^T, unit scale
            self.run = int(req.within_run)


def predictive_draw(params: np.ndarray, req: PredictionRequest, ctx: PredictiveContext,
                    q: int, p: int, rng) -> np.ndarray:
    """One y* sample (length n_star * S_star) for one parameter draw."""
    beta, gamma, sigma2, tau2 = _split_params(np.asarray(params, float), q, p)
    base = req.new_local_attrs @ beta
    out = np.empty((req.S_star, req.n_star))
    if ctx.mode == "new":
        for s in range(req.S_star):
            mu = base + req.new_global_attrs[s] @ gamma
            w = np.sqrt(max(sigma2, 0.0)) * (ctx.l_star @ rng.standard_normal(req.n_star))
            out[s] = mu + w + np.sqrt(max(tau2, 0.0)) * rng.standard_normal(req.n_star)
        return out.ravel()

    sk = ctx.sk
    s11 = sigma2 * ctx.quad
    s11.flat[:: s11.shape[0] + 1] += tau2
    l11 = cholesky_jitter(s11, what="sketched covariance")
    s21 = sigma2 * ctx.cross
    resid = sk.y_sk[:, ctx.run] - sk.X_sk @ beta - sk.ones_sk * (sk.global_attrs[ctx.run] @ gamma)
    gain = cho_solve((l11, True), s21.T).T  # Sigma21 Sigma11^{-1}
    v = solve_triangular(l11, s21.T, lower=True)
    cond = sigma2 * ctx.k_star - v.T @ v
    cond = 0.5 * (cond + cond.T)
    cond.flat[:: req.n_star + 1] += tau2
    try:
        lc = cholesky_jitter(cond, jitter=1e-10, what="conditional predictive covariance")
    except Exception as exc:
        raise PredictionError(str(exc)) from None
    for s in range(req.S_star):
        mu = base + req.new_global_attrs[s] @ gamma
        out[s] = mu + gain @ resid + lc @ rng.standard_normal(req.n_star)
    return out.ravel()


def _new_run_batch(params: np.ndarray, req: PredictionRequest, ctx: PredictiveContext,
                   q: int, p: int, rng) -> np.ndarray:
    """Vectorized new-run draws for a block of parameter rows."""
    count, ns, S = params.shape[0], req.n_star, req.S_star
    beta, gamma = params[:, :q], params[:, q : q + p]
    sigma = np.sqrt(np.clip(params[:, q + p], 0.0, None))
    tau = np.sqrt(np.clip(params[:, q + p + 1], 0.0, None))
    mu = (beta @ req.new_local_attrs.T)[:, None, :] + (gamma @ req.new_global_attrs.T)[:, :, None]
    z = rng.standard_normal((ns, count * S))
    w = (ctx.l_star @ z).T.reshape(count, S, ns)
    eps = rng.standard_normal((count, S, ns))
    out = mu + sigma[:, None, None] * w + tau[:, None, None] * eps
    return out.reshape(count, S * ns)


def predictive_moments(params, req: PredictionRequest, ctx: PredictiveContext, q: int, p: int):
    """Mean and covariance of y* for one run (the first requested) given parameters."""
    beta, gamma, sigma2, tau2 = _split_params(np.asarray(params, float), q, p)
    mu = req.new_local_attrs @ beta + req.new_global_attrs[0] @ gamma
    if ctx.mode == "new":
        cov = sigma2 * ctx.k_star
        cov.flat[:: req.n_star + 1] += tau2
        return mu, cov
    sk = ctx.sk
    s11 = sigma2 * ctx.quad
    s11.flat[:: s11.shape[0] + 1] += tau2
    l11 = cholesky_jitter(s11, what="sketched covariance")
    s21 = sigma2 * ctx.cross
    resid = sk.y_sk[:, ctx.run] - sk.X_sk @ beta - sk.ones_sk * (sk.global_attrs[ctx.run] @ gamma)
    mean = mu + s21 @ cho_solve((l11, True), resid)
    v = solve_triangular(l11, s21.T, lower=True)
    cov = sigma2 * ctx.k_star - v.T @ v
    cov.flat[:: req.n_star + 1] += tau2
    return mean, cov


def composition_sample(posterior: SketchedPosterior, req: PredictionRequest, cov: CovarianceOperator,
                       sk: SketchedData | None = None, count: int | None = None, seed: int = 0,
                       phi=None, quad=None) -> PredictiveDraws:
    """One predictive draw per retained parameter draw, evenly subsampled to ``count``."""
    L = posterior.L
    count = L if count is None else int(count)
    if not 1 <= count <= L:
        raise ValueError(f"count must lie in [1, {L}], got {count}")
    q = sum(1 for nm in posterior.names if nm.startswith("beta"))
    p = sum(1 for nm in posterior.names if nm.startswith("gamma"))
    if req.new_local_attrs.shape[1] != q or req.new_global_attrs.shape[1] != p:
        raise PredictionError("request attribute dimensions do not match the posterior")
    ctx = PredictiveContext(req, cov, sk, phi, quad)
    rows = np.linspace(0, L - 1, count).round().astype(np.int64) if count < L else np.arange(L)
    rng = np.random.default_rng(seed)
    if req.mode == "new":
        out = _new_run_batch(posterior.draws[rows], req, ctx, q, p, rng)
    else:
        out = np.empty((count, req.n_star * req.S_star))
        for i, r in enumerate(rows):
            out[i] = predictive_draw(posterior.draws[r], req, ctx, q, p, rng)
    if not np.all(np.isfinite(out)):
        raise PredictionError("non-finite predictive draws")
    return PredictiveDraws(out, req.n_star, req.S_star, posterior.sketch_id,
                           {"mode": req.mode, "theta": posterior.theta})
