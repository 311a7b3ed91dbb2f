"""In-memory orchestration: sketch, fit H chains, combine, predict, evaluate.

The CLI wraps these functions with file IO; tests call them directly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .binio import encode_meta
from .combine import (CollaborativePosterior, QuantileGrid, combine_draw_matrices, combine_posteriors)
from .data import FunctionalDataset, PredictionRequest
from .federation import aggregate_partials, center_compute_partial, split_dataset
from .kernels import KernelSpec
from .metrics import FOUR_FEET_M, EvalReport, evaluate
from .predict import PredictiveDraws, composition_sample
from .sampler import ChainConfig, Priors, SketchedPosterior, run_chain
from .sketch import SketchedData, SketchMatrix, apply_sketch, gen_gaussian_sketch, gen_partition_sketch

WORKERS_ENV = "SKETCHGP_WORKERS"


class ConfigError(ValueError):
    """A run configuration that cannot be resolved."""


@dataclass
class RunConfig:
    H: int = 5
    m: int | str = "1%"
    m_min: int = 1
    sketch: str = "gaussian"
    theta: float | list | dict = 3.0
    variant: str = "full"
    n_knot: int | None = None
    knot_seed: int = 0
    k: int | None = None
    ordering: str = "coordinate-sort"
    priors: dict = field(default_factory=dict)
    chain: dict = field(default_factory=dict)
    seed: int = 0
    workers: int | None = None
    mode: str = "new"
    within_run: int | None = None
    pred_count: int | None = None
    pred_seed: int = 0
    threshold: float = FOUR_FEET_M
    threshold_rule: str = "mean"
    standardize_global: bool = False
    label: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown run config field(s): {bad}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if int(self.H) < 1:
            raise ConfigError(f"H must be >= 1, got {self.H}")
        if self.sketch not in ("gaussian", "subdomain", "stratified"):
            raise ConfigError(f"sketch must be gaussian, subdomain or stratified, got {self.sketch!r}")
        if self.mode not in ("new", "within"):
            raise ConfigError(f"mode must be 'new' or 'within', got {self.mode!r}")
        if self.threshold_rule not in ("mean", "probability"):
            raise ConfigError(f"threshold_rule must be 'mean' or 'probability', got {self.threshold_rule!r}")
        try:
            Priors(**self.priors)
            ChainConfig(**self.chain)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def priors_obj(self) -> Priors:
        return Priors(**self.priors)

    def chain_obj(self, chain_seed: int) -> ChainConfig:
        return ChainConfig(**{**self.chain, "chain_seed": chain_seed})

    def kernel(self, theta: float) -> KernelSpec:
        try:
            return KernelSpec(float(theta), self.variant, self.n_knot, self.knot_seed, self.k, self.ordering)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def config_hash(d: dict) -> str:
    """Short digest of a config, stable under key order."""
    blob = json.dumps(json.loads(encode_meta(d)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resolve_workers(requested: int | None) -> int:
    if requested is None:
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                requested = int(env)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    if requested is None:
        requested = os.cpu_count() or 1
    if requested < 1:
        raise ConfigError(f"worker count must be >= 1, got {requested}")
    return int(requested)


def resolve_m(m, n: int, m_min: int = 1) -> int:
    """An int, or a percent string like ``"1%"`` resolving to round(pct * n)."""
    if isinstance(m, str):
        text = m.strip()
        if not text.endswith("%"):
            raise ConfigError(f"m must be an integer or a percent like '1%', got {m!r}")
        try:
            pct = float(text[:-1]) / 100.0
        except ValueError:
            raise ConfigError(f"bad percent m {m!r}") from None
        value = int(round(pct * n))
    else:
        value = int(m)
        if value < 1:
            raise ConfigError(f"m must be >= 1, got {m}")
    value = max(value, int(m_min))
    if not 1 <= value < n:
        raise ConfigError(f"m resolves to {value}, need 1 <= m < n={n}")
    return value


def resolve_thetas(theta, H: int) -> list[float]:
    """A scalar (shared), a list of length 1 or H, or {"range": [lo, hi]} spaced over H."""
    if isinstance(theta, dict):
        if set(theta) != {"range"} or len(theta["range"]) != 2:
            raise ConfigError("theta range must look like {'range': [lo, hi]}")
        lo, hi = (float(v) for v in theta["range"])
        out = list(np.linspace(lo, hi, H)) if H > 1 else [(lo + hi) / 2.0]
    elif isinstance(theta, (list, tuple)):
        if len(theta) not in (1, H):
            raise ConfigError(f"theta list has length {len(theta)}, need 1 or H={H}")
        out = [float(v) for v in theta] * (H if len(theta) == 1 else 1)
    else:
        out = [float(theta)] * H
    if any(not t > 0 for t in out):
        raise ConfigError(f"theta values must be positive, got {out}")
    return [float(t) for t in out]


def standardize_globals(train: FunctionalDataset, *others: FunctionalDataset | None):
    """Center and scale global attributes by the training runs' mean and sd."""
    z = train.global_attrs
    mu = z.mean(axis=0)
    sd = z.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)

    def tf(ds):
        if ds is None:
            return None
        return FunctionalDataset(ds.locations, ds.local_attrs, (ds.global_attrs - mu) / sd, ds.responses)

    return (tf(train), *(tf(o) for o in others)), {"mean": mu, "sd": sd}


# ------------------------------------------------------------------ fitting


def make_sketches(cfg: RunConfig, ds: FunctionalDataset) -> list[SketchMatrix]:
    m = resolve_m(cfg.m, ds.n, cfg.m_min)
    if cfg.sketch == "gaussian":
        return [gen_gaussian_sketch(m, ds.n, cfg.seed + h) for h in range(int(cfg.H))]
    return gen_partition_sketch(cfg.sketch, ds.locations, m, cfg.seed)


@dataclass
class FitTask:
    sketch_id: int
    sk: SketchedData
    phi: SketchMatrix
    locations: np.ndarray
    kernel: KernelSpec
    priors: Priors
    chain: ChainConfig
    meta: dict


@dataclass
class FitResult:
    posteriors: list[SketchedPosterior]
    failures: dict[int, str]
    sketches: list[SketchMatrix]
    sketched: list[SketchedData]


def _run_task(task: FitTask) -> SketchedPosterior:
    cov = task.kernel.build(task.locations)
    quad = cov.quad_form(task.phi)
    return run_chain(task.sk, quad, task.priors, task.chain, task.kernel.theta, meta=task.meta)


def _safe_run(task: FitTask):
    try:
        return task.sketch_id, _run_task(task), None
    except Exception as exc:  # a failed chain must not take the others down
        return task.sketch_id, None, f"{type(exc).__name__}: {exc}"


def run_tasks(tasks: list[FitTask], workers: int = 1) -> tuple[list[SketchedPosterior], dict[int, str]]:
    """Run chains on a bounded process pool; results come back in task order."""
    if workers <= 1 or len(tasks) <= 1:
        results = [_safe_run(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            results = list(pool.map(_safe_run, tasks))
    posts = [p for _, p, err in results if err is None]
    failures = {h: err for h, _, err in results if err is not None}
    return posts, failures


def build_tasks(cfg: RunConfig, locations: np.ndarray, sketches: list[SketchMatrix],
                sketched: list[SketchedData], meta: dict | None = None) -> list[FitTask]:
    thetas = resolve_thetas(cfg.theta, len(sketches))
    priors = cfg.priors_obj()
    tasks = []
    for h, (phi, sk) in enumerate(zip(sketches, sketched)):
        info = {"sketch_kind": phi.kind, "sketch_seed": phi.seed, "m": phi.m, **(meta or {})}
        tasks.append(FitTask(h, sk, phi, locations, cfg.kernel(thetas[h]), priors,
                             cfg.chain_obj(cfg.seed + h), info))
    return tasks


def fit(cfg: RunConfig, ds: FunctionalDataset, workers: int = 1, meta: dict | None = None) -> FitResult:
    sketches = make_sketches(cfg, ds)
    sketched = [apply_sketch(phi, ds, h) for h, phi in enumerate(sketches)]
    posts, failures = run_tasks(build_tasks(cfg, ds.locations, sketches, sketched, meta), workers)
    return FitResult(posts, failures, sketches, sketched)


def federated_sketches(cfg: RunConfig, ds: FunctionalDataset, sizes) -> list[SketchedData]:
    """Gaussian sketches computed center by center and summed, as a coordinator would."""
    if cfg.sketch != "gaussian":
        raise ConfigError("federation needs a gaussian sketch")
    m = resolve_m(cfg.m, ds.n, cfg.m_min)
    shards = split_dataset(ds, sizes)
    out = []
    for h in range(int(cfg.H)):
        msgs = [center_compute_partial(s, m, ds.n, cfg.seed + h, h) for s in shards]
        out.append(aggregate_partials(msgs, ds.global_attrs, range(len(shards)), ds.n))
    return out


def fit_federated(cfg: RunConfig, ds: FunctionalDataset, sizes, workers: int = 1,
                  meta: dict | None = None) -> FitResult:
    m = resolve_m(cfg.m, ds.n, cfg.m_min)
    sketches = [gen_gaussian_sketch(m, ds.n, cfg.seed + h) for h in range(int(cfg.H))]
    sketched = federated_sketches(cfg, ds, sizes)
    posts, failures = run_tasks(build_tasks(cfg, ds.locations, sketches, sketched, meta), workers)
    return FitResult(posts, failures, sketches, sketched)


# ----------------------------------------------------------- combine/predict


def combine(posteriors: list[SketchedPosterior], grid: QuantileGrid | None = None) -> CollaborativePosterior:
    return combine_posteriors(posteriors, grid=grid)


def predict_per_sketch(cfg: RunConfig, posteriors: list[SketchedPosterior], req: PredictionRequest,
                       locations: np.ndarray, sketches: list[SketchMatrix] | None = None,
                       sketched: list[SketchedData] | None = None) -> list[PredictiveDraws]:
    out = []
    for post in posteriors:
        h = int(post.sketch_id)
        cov = cfg.kernel(post.theta).build(locations)
        sk = phi = quad = None
        if req.mode == "within":
            if sketches is None or sketched is None:
                raise ConfigError("within-run prediction needs the sketches and sketched data")
            phi, sk = sketches[h], sketched[h]
            quad = cov.quad_form(phi)
        out.append(composition_sample(post, req, cov, sk, cfg.pred_count, cfg.pred_seed + h, phi, quad))
    return out


def collaborative_predictive(per_sketch: list[PredictiveDraws], grid: QuantileGrid | None = None) -> PredictiveDraws:
    """Combine predictive draws coordinate-wise and restore a joint sample.

    Each coordinate's combined distribution is the quantile average across
    sketches.  To keep the cross-coordinate dependence, the combined
    marginals are laid onto the rank pattern of the first sketch's draws:
    the draw with rank r in column j gets the combined quantile at level
    (r + 0.5) / L.
    """
    grid = grid or QuantileGrid.default()
    qbar = combine_draw_matrices([p.draws for p in per_sketch], grid)
    ref = per_sketch[0].draws
    L = ref.shape[0]
    ranks = np.argsort(np.argsort(ref, axis=0, kind="stable"), axis=0, kind="stable")
    levels = (ranks + 0.5) / L
    pos = np.interp(levels, grid.xi, np.arange(len(grid), dtype=float))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, max(len(grid) - 2, 0))
    frac = pos - lo
    cols = np.arange(ref.shape[1])[None, :]
    if len(grid) == 1:
        draws = np.broadcast_to(qbar[0], ref.shape).copy()
    else:
        draws = qbar[lo, cols] * (1.0 - frac) + qbar[lo + 1, cols] * frac
    first = per_sketch[0]
    return PredictiveDraws(draws, first.n_star, first.S_star, None,
                           {"H": len(per_sketch), "mode": first.meta.get("mode")})


def eval_draws(cfg: RunConfig, pred: PredictiveDraws, test: FunctionalDataset, label: str = "") -> EvalReport:
    # draws are run-major; responses are n0 x S0
    truth = test.responses.T.ravel()
    return evaluate(pred.draws, truth, test.n, test.S, cfg.threshold, cfg.threshold_rule,
                    label or cfg.label)


def parameter_coverage(cp: CollaborativePosterior, truth: dict[str, float], level: float = 0.95) -> dict[str, dict]:
    """Per-parameter collaborative credible interval and whether it covers the truth."""
    alpha = 1.0 - level
    out = {}
    for name, value in truth.items():
        if name not in cp.quantiles:
            continue
        q = cp[name]
        lo = float(q[cp.grid.nearest(alpha / 2)])
        hi = float(q[cp.grid.nearest(1 - alpha / 2)])
        out[name] = {"truth": float(value), "median": float(q[cp.grid.nearest(0.5)]),
                     "low": lo, "high": hi, "covered": bool(lo <= value <= hi)}
    return out


@dataclass
class PipelineResult:
    fit: FitResult
    collaborative: CollaborativePosterior
    per_sketch_pred: list[PredictiveDraws]
    pred: PredictiveDraws
    report: EvalReport
    config_hash: str


def run_pipeline(cfg: RunConfig, train: FunctionalDataset, test: FunctionalDataset,
                 workers: int = 1) -> PipelineResult:
    """Fit, combine, predict the held-out runs and score them."""
    chash = config_hash(asdict(cfg))
    if cfg.standardize_global:
        (train, test), _ = standardize_globals(train, test)
    res = fit(cfg, train, workers, {"config_hash": chash})
    if res.failures:
        raise RuntimeError(f"chains failed: {res.failures}")
    cp = combine(res.posteriors)
    req = PredictionRequest.from_dataset(test, cfg.mode, cfg.within_run)
    req.check_against(train)
    per = predict_per_sketch(cfg, res.posteriors, req, train.locations, res.sketches, res.sketched)
    pred = collaborative_predictive(per)
    return PipelineResult(res, cp, per, pred, eval_draws(cfg, pred, test), chash)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    out = replace(cfg, **kw)
    out.validate()
    return out


def ceil_percent(pct: float, n: int, floor: int) -> int:
    """ceil(pct * n) but at least ``floor``."""
    return max(int(math.ceil(pct * n)), int(floor))
