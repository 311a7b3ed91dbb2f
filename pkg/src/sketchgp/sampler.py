"""MCMC for one sketched posterior.

The target for sketch h with fixed length-scale theta_h is

    p(beta, gamma, sigma2, tau2) * prod_s N(y_s,sk | A_s lambda, sigma2 Q + tau2 I_m) ** power

with Q = Phi K(theta_h) Phi^T computed once per chain, A_s = [X_sk : ones_sk z_s^T]
and lambda = (beta, gamma).  Coefficients get an exact Gaussian Gibbs draw;
sigma2 and tau2 get sequential random-walk Metropolis-Hastings steps on the
log scale.  Priors: N(0, I) on lambda, inverse-gamma on both variances.
Only the likelihood is raised to ``power``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.linalg import solve_triangular

from .binio import read_labeled_matrix, write_labeled_matrix
from .sketch import SketchedData

POSTERIOR_MAGIC = b"SKGPPOST"
LIK_JITTER = 1e-10
_LOG_2PI = math.log(2.0 * math.pi)


class ChainError(RuntimeError):
    pass


@dataclass(frozen=True)
class Priors:
    a_tau: float = 2.0
    b_tau: float = 1.0
    a_sigma: float = 2.0
    b_sigma: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"prior hyperparameter {k} must be positive, got {v}")


@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 5000
    n_burn: int = 1000
    thin: int = 4
    proposal_sd_log_sigma2: float = 0.15
    proposal_sd_log_tau2: float = 0.15
    init_sigma2: float | None = None
    init_tau2: float | None = None
    chain_seed: int = 0
    adapt: bool = True
    target_accept: float = 0.35
    # sigma2 inside the Gibbs covariance; False reproduces the display that omits it
    sigma_in_gibbs: bool = True
    # "power" weights the coefficient data term by n/m like the tempered
    # likelihood; "inverse" uses m/n
    coef_weight: Literal["power", "inverse"] = "power"

    def __post_init__(self):
        if not 0 <= self.n_burn < self.n_iter:
            raise ValueError(f"need 0 <= n_burn < n_iter, got {self.n_burn}, {self.n_iter}")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not (self.proposal_sd_log_sigma2 >= 0 and self.proposal_sd_log_tau2 >= 0):
            raise ValueError("proposal sds must be non-negative")
        if self.coef_weight not in ("power", "inverse"):
            raise ValueError(f"unknown coef_weight {self.coef_weight!r}")

    @property
    def n_keep(self) -> int:
        return (self.n_iter - self.n_burn) // self.thin


def parameter_names(q: int, p: int) -> list[str]:
    return [f"beta{i + 1}" for i in range(q)] + [f"gamma{i + 1}" for i in range(p)] + ["sigma2", "tau2"]


@dataclass
class SketchedPosterior:
    draws: np.ndarray
    names: list[str]
    theta: float
    sketch_id: int
    power: float
    accept_rates: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def L(self) -> int:
        return self.draws.shape[0]

    def functional(self, name: str) -> np.ndarray:
        try:
            return self.draws[:, self.names.index(name)]
        except ValueError:
            raise KeyError(f"functional {name!r} not in posterior (have {self.names})") from None

    def save(self, path) -> None:
        meta = {
            "names": self.names, "theta": self.theta, "sketch_id": self.sketch_id,
            "power": self.power, "accept_rates": self.accept_rates, **self.meta,
        }
        write_labeled_matrix(path, POSTERIOR_MAGIC, self.draws, meta)

    @classmethod
    def load(cls, path) -> "SketchedPosterior":
        draws, meta = read_labeled_matrix(path, POSTERIOR_MAGIC)
        names = meta.pop("names")
        return cls(draws, names, meta.pop("theta"), meta.pop("sketch_id"), meta.pop("power"),
                   meta.pop("accept_rates"), meta)


# ---------------------------------------------------------------- helpers


def _chol(cov: np.ndarray, sigma2: float, tau2: float) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(cov + LIK_JITTER * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        raise ChainError(
            f"sketched covariance not positive definite at sigma2={sigma2:g}, tau2={tau2:g}"
        ) from None


def _marginal_cov(quad: np.ndarray, sigma2: float, tau2: float) -> np.ndarray:
    cov = sigma2 * quad
    cov.flat[:: cov.shape[0] + 1] += tau2
    return cov


def _mean_matrix(sk: SketchedData, beta, gamma) -> np.ndarray:
    """Column s is X_sk beta + ones_sk (z_s^T gamma)."""
    return (sk.X_sk @ beta)[:, None] + np.outer(sk.ones_sk, sk.global_attrs @ gamma)


def log_ig(x: float, a: float, b: float) -> float:
    return a * math.log(b) - math.lgamma(a) - (a + 1.0) * math.log(x) - b / x


def log_sketched_likelihood(sk: SketchedData, quad: np.ndarray, sigma2: float, tau2: float,
                            beta, gamma) -> float:
    """power * sum_s log N(y_s,sk | A_s lambda, sigma2 Q + tau2 I)."""
    if not (sigma2 > 0 and tau2 > 0):
        raise ValueError("variances must be positive")
    lower = _chol(_marginal_cov(quad, sigma2, tau2), sigma2, tau2)
    resid = sk.y_sk - _mean_matrix(sk, np.asarray(beta, float), np.asarray(gamma, float))
    white = solve_triangular(lower, resid, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(lower)))
    per_run = -0.5 * (sk.m * _LOG_2PI + logdet) * sk.S - 0.5 * np.sum(white**2)
    return sk.power * float(per_run)


class _Whitened:
    """Cholesky of sigma2 Q + tau2 I and the whitened data block."""

    __slots__ = ("sigma2", "tau2", "lower", "w", "logdet")

    def __init__(self, block: np.ndarray, quad: np.ndarray, sigma2: float, tau2: float):
        self.sigma2, self.tau2 = sigma2, tau2
        self.lower = _chol(_marginal_cov(quad, sigma2, tau2), sigma2, tau2)
        self.w = solve_triangular(self.lower, block, lower=True, check_finite=False)
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.lower))))


class _Problem:
    """Per-chain constants: data block [X_sk, ones_sk, Y_sk] and Q."""

    def __init__(self, sk: SketchedData, quad: np.ndarray):
        quad = np.asarray(quad, dtype=float)
        if quad.shape != (sk.m, sk.m):
            raise ValueError(f"quad_form must be {sk.m}x{sk.m}, got {quad.shape}")
        self.sk = sk
        self.quad = quad
        self.block = np.hstack([sk.X_sk, sk.ones_sk[:, None], sk.y_sk])
        self.q, self.p, self.S, self.m = sk.q, sk.p, sk.S, sk.m
        self.zsum = sk.global_attrs.sum(axis=0)
        self.ztz = sk.global_attrs.T @ sk.global_attrs

    def whiten(self, sigma2, tau2) -> _Whitened:
        return _Whitened(self.block, self.quad, sigma2, tau2)

    def loglik(self, wh: _Whitened, beta, gamma) -> float:
        if self.S == 0:
            return 0.0
        q = self.q
        wx, wo, wy = wh.w[:, :q], wh.w[:, q], wh.w[:, q + 1 :]
        resid = wy - (wx @ beta)[:, None] - np.outer(wo, self.sk.global_attrs @ gamma)
        per = -0.5 * (self.m * _LOG_2PI + wh.logdet) * self.S - 0.5 * float(np.sum(resid * resid))
        return self.sk.power * per


@dataclass
class ChainState:
    beta: np.ndarray
    gamma: np.ndarray
    sigma2: float
    tau2: float


def _coef_weight(sk: SketchedData, config: ChainConfig) -> float:
    return sk.power if config.coef_weight == "power" else 1.0 / sk.power


def coefficient_conditional(problem: _Problem, wh: _Whitened, weight: float):
    """Mean and lower Cholesky factor of the conditional precision of (beta, gamma)."""
    q, p = problem.q, problem.p
    dim = q + p
    prec = np.eye(dim)
    rhs = np.zeros(dim)
    if problem.S > 0:
        g = wh.w.T @ wh.w
        xtx, xo, oo = g[:q, :q], g[:q, q], g[q, q]
        xy, oy = g[:q, q + 1 :], g[q, q + 1 :]
        z = problem.sk.global_attrs
        data_prec = np.empty((dim, dim))
        data_prec[:q, :q] = problem.S * xtx
        data_prec[:q, q:] = np.outer(xo, problem.zsum)
        data_prec[q:, :q] = data_prec[:q, q:].T
        data_prec[q:, q:] = oo * problem.ztz
        prec += weight * data_prec
        rhs[:q] = weight * xy.sum(axis=1)
        rhs[q:] = weight * (z.T @ oy)
    try:
        lp = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        try:
            lp = np.linalg.cholesky(prec + 1e-8 * np.eye(dim))
        except np.linalg.LinAlgError:
            raise ChainError("coefficient conditional precision is not positive definite") from None
    mean = solve_triangular(lp.T, solve_triangular(lp, rhs, lower=True), lower=False)
    return mean, lp


def gibbs_coefficients(state: ChainState, sk: SketchedData, quad: np.ndarray, rng,
                       config: ChainConfig = ChainConfig(), _problem=None, _wh=None):
    """Exact draw of (beta, gamma) from their Gaussian full conditional."""
    problem = _problem or _Problem(sk, quad)
    sig = state.sigma2 if config.sigma_in_gibbs else 1.0
    wh = _wh if (_wh is not None and config.sigma_in_gibbs) else problem.whiten(sig, state.tau2)
    mean, lp = coefficient_conditional(problem, wh, _coef_weight(sk, config))
    draw = mean + solve_triangular(lp.T, rng.standard_normal(len(mean)), lower=False)
    return draw[: problem.q], draw[problem.q :]


def _log_var_target(loglik: float, x: float, a: float, b: float) -> float:
    # inverse-gamma prior in log x, including the Jacobian x
    return loglik - a * math.log(x) - b / x


def mh_variances(state: ChainState, sk: SketchedData, quad: np.ndarray, config: ChainConfig,
                 rng, priors: Priors = Priors(), sds=None,
                 loglik_fn: Callable | None = None, _problem=None, _wh=None):
    """One sigma2 step then one tau2 step; returns (sigma2, tau2, (acc_s, acc_t), whitened).

    ``loglik_fn(sigma2, tau2)`` replaces the sketched likelihood when given.
    """
    problem = _problem or _Problem(sk, quad)
    sd_s, sd_t = sds if sds is not None else (config.proposal_sd_log_sigma2, config.proposal_sd_log_tau2)
    sigma2, tau2 = state.sigma2, state.tau2

    def evaluate(s2, t2):
        if loglik_fn is not None:
            return loglik_fn(s2, t2), None
        wh = problem.whiten(s2, t2)
        return problem.loglik(wh, state.beta, state.gamma), wh

    if _wh is not None and loglik_fn is None and (_wh.sigma2, _wh.tau2) == (sigma2, tau2):
        cur_ll, cur_wh = problem.loglik(_wh, state.beta, state.gamma), _wh
    else:
        cur_ll, cur_wh = evaluate(sigma2, tau2)

    accepted = []
    for which, sd in (("sigma", sd_s), ("tau", sd_t)):
        cur = sigma2 if which == "sigma" else tau2
        a, b = (priors.a_sigma, priors.b_sigma) if which == "sigma" else (priors.a_tau, priors.b_tau)
        prop = cur * math.exp(sd * rng.standard_normal())
        s2, t2 = (prop, tau2) if which == "sigma" else (sigma2, prop)
        try:
            prop_ll, prop_wh = evaluate(s2, t2)
        except ChainError:
            prop_ll, prop_wh = -math.inf, None
        log_ratio = _log_var_target(prop_ll, prop, a, b) - _log_var_target(cur_ll, cur, a, b)
        ok = math.log(rng.uniform()) < log_ratio
        if ok:
            sigma2, tau2 = s2, t2
            cur_ll, cur_wh = prop_ll, prop_wh
        accepted.append(ok)
    return sigma2, tau2, tuple(accepted), cur_wh


def initial_state(sk: SketchedData, config: ChainConfig) -> ChainState:
    v = float(np.var(sk.y_sk)) / 2.0 if sk.y_sk.size > 1 else 0.5
    v = v if v > 0 else 0.5
    return ChainState(
        np.zeros(sk.q), np.zeros(sk.p),
        config.init_sigma2 if config.init_sigma2 is not None else v,
        config.init_tau2 if config.init_tau2 is not None else v,
    )


def run_chain(sk: SketchedData, quad: np.ndarray, priors: Priors = Priors(),
              config: ChainConfig = ChainConfig(), theta: float = float("nan"),
              fix_variances: bool = False, meta: dict | None = None) -> SketchedPosterior:
    """Alternate the Gibbs and MH blocks; keep every ``thin``th draw after burn-in.

    ``fix_variances`` holds sigma2 and tau2 at their initial values (the
    conjugate sub-case).
    """
    rng = np.random.default_rng(config.chain_seed)
    problem = _Problem(sk, quad)
    state = initial_state(sk, config)
    names = parameter_names(sk.q, sk.p)
    out = np.empty((config.n_keep, len(names)))
    log_sds = [math.log(max(config.proposal_sd_log_sigma2, 1e-300)),
               math.log(max(config.proposal_sd_log_tau2, 1e-300))]
    zero_sd = [config.proposal_sd_log_sigma2 == 0, config.proposal_sd_log_tau2 == 0]
    acc_count = np.zeros(2)
    kept = 0
    wh = None
    for t in range(config.n_iter):
        try:
            if wh is None or (wh.sigma2, wh.tau2) != (state.sigma2, state.tau2):
                wh = problem.whiten(state.sigma2, state.tau2)
            state.beta, state.gamma = gibbs_coefficients(state, sk, quad, rng, config, problem, wh)
            if not fix_variances:
                sds = [0.0 if z else math.exp(s) for s, z in zip(log_sds, zero_sd)]
                s2, t2, acc, new_wh = mh_variances(state, sk, quad, config, rng, priors, sds,
                                                   _problem=problem, _wh=wh)
                state.sigma2, state.tau2 = s2, t2
                if new_wh is not None:
                    wh = new_wh
                if t < config.n_burn:
                    if config.adapt:
                        step = 1.0 / (t + 1) ** 0.6
                        for i in range(2):
                            log_sds[i] += step * (float(acc[i]) - config.target_accept)
                else:
                    acc_count += acc
        except ChainError as exc:
            raise ChainError(f"chain aborted at iteration {t}: {exc}") from exc
        if t >= config.n_burn and (t - config.n_burn + 1) % config.thin == 0 and kept < config.n_keep:
            out[kept, : sk.q] = state.beta
            out[kept, sk.q : sk.q + sk.p] = state.gamma
            out[kept, -2] = state.sigma2
            out[kept, -1] = state.tau2
            kept += 1
    n_post = config.n_iter - config.n_burn
    rates = {} if fix_variances else {
        "sigma2": float(acc_count[0] / n_post), "tau2": float(acc_count[1] / n_post),
    }
    final_sds = {"sigma2": math.exp(log_sds[0]), "tau2": math.exp(log_sds[1])}
    info = {"chain_seed": config.chain_seed, "priors": asdict(priors), "config": asdict(config),
            "final_proposal_sds": final_sds}
    info.update(meta or {})
    return SketchedPosterior(out, names, float(theta), sk.sketch_id, sk.power, rates, info)
