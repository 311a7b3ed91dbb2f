"""Distributed Bayesian GP functional regression with random sketches.

Typical in-memory use::

    from sketchgp import RunConfig, SimConfig, generate, run_pipeline
    train, test, truth = generate(SimConfig(seed=1))
    result = run_pipeline(RunConfig(H=5, m=100, theta=3.0), train, test)
    print(result.report.table())
"""

from .combine import CollaborativePosterior, QuantileGrid, combine_posteriors, combine_quantiles
from .data import FunctionalDataset, PredictionRequest, load_dataset, save_dataset
from .kernels import MPP, NNGP, FullGP, KernelSpec
from .metrics import EvalReport, coverage_and_interval_score, energy_score, mspe, threshold_error_pct
from .pipeline import RunConfig, run_pipeline
from .predict import PredictiveDraws, composition_sample
from .sampler import ChainConfig, Priors, SketchedPosterior, run_chain
from .simgen import SimConfig, SloshConfig, generate, generate_slosh_like
from .sketch import SketchedData, SketchMatrix, apply_sketch, gen_gaussian_sketch, gen_partition_sketch

__version__ = "0.1.0"

__all__ = [
    "ChainConfig", "CollaborativePosterior", "EvalReport", "FullGP", "FunctionalDataset", "KernelSpec",
    "MPP", "NNGP", "PredictionRequest", "PredictiveDraws", "Priors", "QuantileGrid", "RunConfig",
    "SimConfig", "SketchMatrix", "SketchedData", "SketchedPosterior", "SloshConfig", "apply_sketch",
    "combine_posteriors", "combine_quantiles", "composition_sample", "coverage_and_interval_score",
    "energy_score", "gen_gaussian_sketch", "gen_partition_sketch", "generate", "generate_slosh_like",
    "load_dataset", "mspe", "run_chain", "run_pipeline", "save_dataset", "threshold_error_pct",
]
