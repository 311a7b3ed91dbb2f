"""Synthetic functional data for tests and acceptance runs.

``generate`` follows the standard simulation design: uniform locations on a
box, one or more N(0, 1) global attributes per run, N(0, I) local
attributes per location, independent GP realizations per run and i.i.d.
Gaussian noise.  The first ``S`` runs observed at the first ``n`` locations
train; the last ``S0`` runs at the remaining ``n0`` locations test.

``generate_slosh_like`` builds a storm-surge shaped dataset: lon/lat
locations, an elevation field, five storm attributes drawn inside the
SLOSH ensemble ranges, and a four-foot threshold that is crossed over a
sizable part of the domain.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import FunctionalDataset
from .kernels import exp_cov

DENSE_SIM_CAP = 5000

# Storm attribute ranges: (name, lower, upper, units)
SLOSH_RANGES = (
    ("heading", 204.0349, 384.0244, "degrees"),
    ("velocity", 0.0, 40.0, "knots"),
    ("latitude", 38.32527, 39.26811, "degrees"),
    ("pressure", 930.0, 980.0, "millibars"),
    ("sea_level_rise", -20.0, 350.0, "cm"),
)


@dataclass(frozen=True)
class SimConfig:
    n: int = 2000
    n0: int = 500
    S: int = 10
    S0: int = 5
    d: int = 2
    gamma0: tuple[float, ...] = (5.0,)
    beta0: tuple[float, ...] = (2.0, -1.0)
    sigma2_0: float = 2.0
    tau2_0: float = 0.2
    theta0: float = 3.0
    domain: tuple[tuple[float, float], ...] = ((0.0, 10.0), (0.0, 10.0))
    seed: int = 0
    lowrank_fallback: bool = False
    n_knot_fallback: int = 1000

    @property
    def p(self) -> int:
        return len(self.gamma0)

    @property
    def q(self) -> int:
        return len(self.beta0)

    def __post_init__(self):
        if self.sigma2_0 < 0 or self.tau2_0 < 0:
            raise ValueError("variances must be non-negative")
        if not self.theta0 > 0:
            raise ValueError("theta0 must be positive")
        if len(self.domain) != self.d:
            raise ValueError(f"domain has {len(self.domain)} axes but d={self.d}")
        for lo, hi in self.domain:
            if not hi > lo:
                raise ValueError(f"degenerate domain axis ({lo}, {hi})")
        if min(self.n, self.S) < 1 or min(self.n0, self.S0) < 0:
            raise ValueError("need n, S >= 1 and n0, S0 >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown simulation config field(s): {bad}")
        kw = dict(d)
        for key in ("gamma0", "beta0"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        if "domain" in kw:
            kw["domain"] = tuple(tuple(float(v) for v in ax) for ax in kw["domain"])
        return cls(**kw)


@dataclass
class Truth:
    gamma0: np.ndarray
    beta0: np.ndarray
    sigma2_0: float
    tau2_0: float
    theta0: float
    extra: dict = field(default_factory=dict)

    def as_rows(self) -> list[tuple[str, float]]:
        rows = [(f"beta{i + 1}", float(v)) for i, v in enumerate(self.beta0)]
        rows += [(f"gamma{i + 1}", float(v)) for i, v in enumerate(self.gamma0)]
        rows += [("sigma2", self.sigma2_0), ("tau2", self.tau2_0), ("theta", self.theta0)]
        return rows

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "value"])
            for name, v in self.as_rows():
                w.writerow([name, repr(v)])


def load_truth_csv(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {name: float(v) for name, v in rows[1:]}


def simulate_gp(locations: np.ndarray, theta: float, sigma2: float, count: int, rng,
                lowrank_fallback: bool = False, n_knot: int = 1000) -> np.ndarray:
    """``count`` independent draws of w ~ N(0, sigma2 K(theta)); shape (n, count).

    Dense Cholesky up to DENSE_SIM_CAP points.  Above it, and only when
    ``lowrank_fallback`` is set, draws from the modified predictive process
    on ``n_knot`` random knots instead.
    """
    n = locations.shape[0]
    if sigma2 == 0:
        return np.zeros((n, count))
    if n <= DENSE_SIM_CAP:
        k = exp_cov(locations, locations, theta)
        k.flat[:: n + 1] += 1e-10
        lower = np.linalg.cholesky(k)
        return np.sqrt(sigma2) * lower @ rng.standard_normal((n, count))
    if not lowrank_fallback:
        raise ValueError(
            f"{n} locations exceed the dense simulation cap {DENSE_SIM_CAP}; "
            "set lowrank_fallback to use a knot-based approximation"
        )
    knots = locations[rng.choice(n, size=min(n_knot, n), replace=False)]
    kk = exp_cov(knots, knots, theta)
    kk.flat[:: len(knots) + 1] += 1e-10
    lk = np.linalg.cholesky(kk)
    b = np.linalg.solve(lk, exp_cov(knots, locations, theta)).T
    d = np.clip(1.0 - np.sum(b**2, axis=1), 0.0, None)
    w = b @ rng.standard_normal((len(knots), count)) + np.sqrt(d)[:, None] * rng.standard_normal((n, count))
    return np.sqrt(sigma2) * w


def _split(loc, x, z, y, n, S):
    train = FunctionalDataset(loc[:n], x[:n], z[:S], y[:n, :S])
    test = FunctionalDataset(loc[n:], x[n:], z[S:], y[n:, S:]) if loc.shape[0] > n and z.shape[0] > S else None
    return train, test


def generate(cfg: SimConfig):
    """Return (train, test, truth)."""
    rng = np.random.default_rng(cfg.seed)
    n_all, s_all = cfg.n + cfg.n0, cfg.S + cfg.S0
    lo = np.array([a for a, _ in cfg.domain])
    hi = np.array([b for _, b in cfg.domain])
    loc = lo + (hi - lo) * rng.uniform(size=(n_all, cfg.d))
    z = rng.standard_normal((s_all, cfg.p))
    x = rng.standard_normal((n_all, cfg.q))
    w = simulate_gp(loc, cfg.theta0, cfg.sigma2_0, s_all, rng, cfg.lowrank_fallback, cfg.n_knot_fallback)
    mean = (x @ np.asarray(cfg.beta0))[:, None] + (z @ np.asarray(cfg.gamma0))[None, :]
    y = mean + w + np.sqrt(cfg.tau2_0) * rng.standard_normal((n_all, s_all))
    train, test = _split(loc, x, z, y, cfg.n, cfg.S)
    truth = Truth(np.asarray(cfg.gamma0), np.asarray(cfg.beta0), cfg.sigma2_0, cfg.tau2_0,
                  cfg.theta0, {"config": asdict(cfg)})
    return train, test, truth


@dataclass(frozen=True)
class SloshConfig:
    n: int = 4500
    n0: int = 500
    S: int = 10
    S0: int = 5
    # effect of each storm attribute, per ensemble-range standard deviation
    storm_effects: tuple[float, ...] = (-0.4, 0.5, 0.3, -0.6, 0.7)
    intercept: float = 2.5
    elevation_effect: float = -0.9
    sigma2_0: float = 0.08
    tau2_0: float = 0.02
    theta0: float = 40.0
    lon_range: tuple[float, float] = (-75.05, -74.75)
    lat_range: tuple[float, float] = (38.90, 39.30)
    seed: int = 0


def elevation_field(lon, lat, lon_range, lat_range) -> np.ndarray:
    """Smooth terrain that rises inland (west) with a few low basins; meters."""
    a = (lon - lon_range[0]) / (lon_range[1] - lon_range[0])
    b = (lat - lat_range[0]) / (lat_range[1] - lat_range[0])
    ridge = 5.5 * (1.0 - a) ** 1.5
    basins = (1.5 * np.exp(-((a - 0.7) ** 2 + (b - 0.3) ** 2) / 0.02)
              + 1.2 * np.exp(-((a - 0.4) ** 2 + (b - 0.75) ** 2) / 0.03))
    swell = 0.6 * np.sin(3.0 * np.pi * b) * np.cos(2.0 * np.pi * a)
    return np.clip(ridge - basins + swell + 1.0, 0.0, None)


def generate_slosh_like(cfg: SloshConfig = SloshConfig()):
    """Return (train, test, truth).

    Local attributes are (1, elevation): the constant column carries the
    intercept, since the model has none of its own.  Global attributes are
    raw storm parameters inside the ensemble ranges.  ``truth.extra`` holds
    the signs used in construction and the range-based standardization.
    """
    rng = np.random.default_rng(cfg.seed)
    n_all, s_all = cfg.n + cfg.n0, cfg.S + cfg.S0
    loc = np.column_stack([
        rng.uniform(*cfg.lon_range, size=n_all),
        rng.uniform(*cfg.lat_range, size=n_all),
    ])
    elev = elevation_field(loc[:, 0], loc[:, 1], cfg.lon_range, cfg.lat_range)
    x = np.column_stack([np.ones(n_all), elev])
    lows = np.array([r[1] for r in SLOSH_RANGES])
    highs = np.array([r[2] for r in SLOSH_RANGES])
    z = lows + (highs - lows) * rng.uniform(size=(s_all, len(SLOSH_RANGES)))
    center = (lows + highs) / 2.0
    scale = (highs - lows) / np.sqrt(12.0)
    storm = ((z - center) / scale) @ np.asarray(cfg.storm_effects)
    w = simulate_gp(loc, cfg.theta0, cfg.sigma2_0, s_all, rng)
    mean = (cfg.intercept + cfg.elevation_effect * elev)[:, None] + storm[None, :]
    y = mean + w + np.sqrt(cfg.tau2_0) * rng.standard_normal((n_all, s_all))
    train, test = _split(loc, x, z, y, cfg.n, cfg.S)
    truth = Truth(
        np.asarray(cfg.storm_effects) / scale,
        np.array([cfg.intercept, cfg.elevation_effect]),
        cfg.sigma2_0, cfg.tau2_0, cfg.theta0,
        {
            "attribute_names": [r[0] for r in SLOSH_RANGES],
            "storm_signs": np.sign(cfg.storm_effects).tolist(),
            "elevation_sign": float(np.sign(cfg.elevation_effect)),
            "config": asdict(cfg),
        },
    )
    return train, test, truth


def write_outputs(train, test, truth: Truth, outdir, fmt: str = "bin") -> dict[str, Path]:
    from .data import save_dataset

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ext = "csv" if fmt == "csv" else "bin"
    paths = {"train": outdir / f"train.{ext}", "truth": outdir / "truth.csv"}
    save_dataset(train, paths["train"], fmt)
    if test is not None:
        paths["test"] = outdir / f"test.{ext}"
        save_dataset(test, paths["test"], fmt)
    truth.save_csv(paths["truth"])
    return paths
