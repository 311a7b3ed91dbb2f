"""Predictive diagnostics computed from L x N predictive draws and an N-vector truth."""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import pdist

FOUR_FEET_M = 4 * 0.3048
ENERGY_EXACT_MAX = 2000


def _check(draws, truth):
    draws = np.asarray(draws, dtype=float)
    truth = np.asarray(truth, dtype=float).ravel()
    if draws.ndim == 1:
        draws = draws[:, None]
    if draws.shape[1] != truth.shape[0]:
        raise ValueError(f"draws have {draws.shape[1]} coordinates, truth has {truth.shape[0]}")
    return draws, truth


def mspe(draws, truth) -> float:
    """||mean(draws) - truth||^2 / N."""
    draws, truth = _check(draws, truth)
    diff = draws.mean(axis=0) - truth
    return float(diff @ diff / truth.shape[0])


def predictive_interval(draws, level: float = 0.95):
    alpha = 1.0 - level
    lo, hi = np.quantile(draws, [alpha / 2, 1 - alpha / 2], axis=0)
    return lo, hi


def coverage_and_interval_score(draws, truth, level: float = 0.95) -> tuple[float, float]:
    """Empirical coverage of the central interval and its mean interval score.

    Interval score for [l, u] at level 1 - alpha:
    (u - l) + (2 / alpha)(l - y)+ + (2 / alpha)(y - u)+.
    """
    draws, truth = _check(draws, truth)
    if draws.shape[0] < 40:
        warnings.warn(f"only {draws.shape[0]} draws; 95% interval endpoints are unstable", stacklevel=2)
    alpha = 1.0 - level
    lo, hi = predictive_interval(draws, level)
    inside = (truth >= lo) & (truth <= hi)
    score = (hi - lo) + (2 / alpha) * np.maximum(lo - truth, 0) + (2 / alpha) * np.maximum(truth - hi, 0)
    return float(inside.mean()), float(score.mean())


def energy_score(draws, truth, max_exact: int = ENERGY_EXACT_MAX, seed: int = 0) -> float:
    """mean_l ||Y_l - y|| - (1 / 2L^2) sum_{l,l'} ||Y_l - Y_l'||.

    Exact for L <= ``max_exact``.  Above that the first term still uses all
    draws while the double sum is taken over a fixed-seed random subset of
    ``max_exact`` draws.
    """
    draws, truth = _check(draws, truth)
    L = draws.shape[0]
    first = float(np.mean(np.linalg.norm(draws - truth, axis=1)))
    sub = draws
    if L > max_exact:
        sub = draws[np.random.default_rng(seed).choice(L, size=max_exact, replace=False)]
    k = sub.shape[0]
    # pdist gives each unordered pair once
    second = 2.0 * float(np.sum(pdist(sub))) / (2.0 * k * k) if k > 1 else 0.0
    return first - second


def threshold_error_pct(draws, truth, threshold: float = FOUR_FEET_M, rule: str = "mean") -> float:
    """Percent of coordinates whose predicted side of ``threshold`` differs from the truth's.

    ``rule="mean"`` classifies by the predictive mean, ``rule="probability"``
    by whether the predictive exceedance probability is above one half.
    """
    draws, truth = _check(draws, truth)
    if rule == "mean":
        pred = draws.mean(axis=0) > threshold
    elif rule == "probability":
        pred = (draws > threshold).mean(axis=0) > 0.5
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return float(100.0 * np.mean(pred != (truth > threshold)))


@dataclass
class EvalReport:
    mspe: float
    coverage: float
    interval_score: float
    energy_score: float
    error_pct: float
    n0: int
    S0: int
    L: int
    label: str = ""

    FIELDS = ("label", "mspe", "coverage", "interval_score", "energy_score", "error_pct", "n0", "S0", "L")

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.FIELDS}

    def table(self) -> str:
        lines = [f"{'metric':<16}{'value':>14}"]
        for k in ("mspe", "coverage", "interval_score", "energy_score", "error_pct"):
            lines.append(f"{k:<16}{getattr(self, k):>14.6f}")
        lines.append(f"{'n0, S0, L':<16}{f'{self.n0}, {self.S0}, {self.L}':>14}")
        return "\n".join(lines)


def evaluate(draws, truth, n0: int, S0: int, threshold: float = FOUR_FEET_M,
             rule: str = "mean", label: str = "") -> EvalReport:
    cov, score = coverage_and_interval_score(draws, truth)
    return EvalReport(mspe(draws, truth), cov, score, energy_score(draws, truth),
                      threshold_error_pct(draws, truth, threshold, rule), n0, S0,
                      int(np.asarray(draws).shape[0]), label)


def write_reports(reports, path, extra: dict | None = None) -> None:
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(EvalReport.FIELDS) + list(extra))
        for r in reports:
            row = r.row()
            w.writerow([row[k] if isinstance(row[k], str) else repr(row[k]) for k in EvalReport.FIELDS]
                       + list(extra.values()))
