from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sketchgp.combine import (CollaborativePosterior, QuantileGrid, combine_draw_matrices, combine_posteriors,
                              combine_quantiles, empirical_quantiles, sample_collaborative,
                              sample_from_quantiles, summarize)
from sketchgp.sampler import SketchedPosterior

GRID = QuantileGrid.default()

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def post(draws, h=0):
    draws = np.asarray(draws, float).reshape(-1, 1)
    return SketchedPosterior(draws, ["gamma1"], 3.0, h, 20.0, {}, {})


def test_default_grid():
    assert len(GRID) == 1999
    assert GRID.xi[0] == pytest.approx(0.0005) and GRID.xi[-1] == pytest.approx(0.9995)
    assert GRID.xi[GRID.nearest(0.5)] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        QuantileGrid([0.0, 0.5])


def test_two_point_and_constant():
    assert empirical_quantiles([0.0, 1.0], QuantileGrid([0.5]))[0] == 0.5
    np.testing.assert_array_equal(empirical_quantiles(np.full(30, 2.5), GRID), 2.5)


def sort_index_oracle(x, levels):
    x = sorted(x)
    out = []
    for xi in levels:
        h = (len(x) - 1) * xi
        lo = int(np.floor(h))
        hi = min(lo + 1, len(x) - 1)
        out.append(x[lo] + (h - lo) * (x[hi] - x[lo]))
    return np.array(out)


def test_quantiles_match_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=257)
    np.testing.assert_allclose(empirical_quantiles(x, GRID), sort_index_oracle(x.tolist(), GRID.xi), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(float, st.integers(1, 60), elements=finite))
def test_identity_h1(draws):
    np.testing.assert_array_equal(combine_quantiles([post(draws)], "gamma1", GRID), empirical_quantiles(draws, GRID))


@settings(max_examples=40, deadline=None)
@given(arrays(float, st.integers(1, 60), elements=finite), st.integers(2, 6))
def test_identical_posteriors(draws, H):
    out = combine_quantiles([post(draws, h) for h in range(H)], "gamma1", GRID)
    np.testing.assert_array_equal(out, empirical_quantiles(draws, GRID))


@settings(max_examples=40, deadline=None)
@given(st.lists(arrays(float, st.integers(1, 40), elements=finite), min_size=2, max_size=6),
       st.randoms(use_true_random=False))
def test_permutation_invariance(mats, rnd):
    posts = [post(m, h) for h, m in enumerate(mats)]
    shuffled = posts[:]
    rnd.shuffle(shuffled)
    np.testing.assert_array_equal(combine_quantiles(posts, "gamma1", GRID),
                                  combine_quantiles(shuffled, "gamma1", GRID))


@settings(max_examples=40, deadline=None)
@given(st.integers(-1000, 1000), st.integers(-1000, 1000))
def test_point_masses_average(a, b):
    out = combine_quantiles([post(np.full(10, a)), post(np.full(7, b))], "gamma1", GRID)
    np.testing.assert_array_equal(out, (a + b) / 2)


@settings(max_examples=40, deadline=None)
@given(st.lists(arrays(float, st.integers(2, 40), elements=finite), min_size=1, max_size=5),
       st.floats(-1e3, 1e3))
def test_location_equivariance(mats, c):
    base = combine_quantiles([post(m) for m in mats], "gamma1", GRID)
    shifted = combine_quantiles([post(m + c) for m in mats], "gamma1", GRID)
    # equal up to rounding of the shifted draws themselves
    scale = max(1.0, abs(c), max(np.abs(m).max() for m in mats))
    np.testing.assert_allclose(shifted, base + c, rtol=0, atol=8 * np.finfo(float).eps * scale)


@settings(max_examples=40, deadline=None)
@given(st.lists(arrays(float, st.integers(1, 40), elements=finite), min_size=1, max_size=6))
def test_monotone_output(mats):
    out = combine_quantiles([post(m) for m in mats], "gamma1", GRID)
    assert np.all(np.diff(out) >= 0)


def test_wasserstein_barycenter_of_gaussians():
    # the barycenter of N(mu_h, s_h^2) is N(mean mu, (mean s)^2)
    rng = np.random.default_rng(1)
    mus, sds = [0.0, 1.0, 3.0], [1.0, 2.0, 0.5]
    posts = [post(rng.normal(mu, sd, 200000)) for mu, sd in zip(mus, sds)]
    cp = combine_posteriors(posts)
    s = summarize(cp, "gamma1")
    assert s["median"] == pytest.approx(np.mean(mus), abs=0.02)
    assert s["ci95_high"] - s["ci95_low"] == pytest.approx(2 * 1.959964 * np.mean(sds), rel=0.01)


def test_sampling():
    xi = GRID.xi
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(sample_from_quantiles(xi, np.full(len(xi), 4.0), 100, rng), 4.0)
    q = empirical_quantiles(np.random.default_rng(2).normal(size=4000), GRID)
    cp = CollaborativePosterior(GRID, {"g": q}, 1)
    draws = sample_collaborative(cp, "g", 100000, seed=3)
    step = np.max(np.diff(q[GRID.nearest(0.49): GRID.nearest(0.51)]))
    assert abs(np.median(draws) - q[GRID.nearest(0.5)]) <= 2 * max(step, 1e-3)
    np.testing.assert_array_equal(draws, sample_collaborative(cp, "g", 100000, seed=3))
    cols = sample_from_quantiles(xi, np.column_stack([q, q + 10]), 5000, rng)
    assert cols.shape == (5000, 2) and abs(np.median(cols[:, 1]) - np.median(cols[:, 0]) - 10) < 0.2


def test_summarize_symmetric():
    q = np.linspace(-3, 3, len(GRID))
    cp = CollaborativePosterior(GRID, {"g": q}, 1)
    assert summarize(cp, "g")["median"] == pytest.approx(0.0, abs=1e-12)


def test_roundtrip_and_draw_matrices(tmp_path):
    rng = np.random.default_rng(4)
    posts = [SketchedPosterior(rng.normal(size=(50, 2)), ["a", "b"], 1.0, h, 2.0, {}, {}) for h in range(3)]
    cp = combine_posteriors(posts)
    cp.save(tmp_path / "c.bin")
    back = CollaborativePosterior.load(tmp_path / "c.bin")
    assert back.names == ["a", "b"] and back.H == 3
    np.testing.assert_array_equal(back["a"], cp["a"])
    cp.save_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "functional,xi,value"
    mat = combine_draw_matrices([p.draws for p in posts])
    np.testing.assert_array_equal(mat[:, 1], cp["b"])
    values, dens = cp.density("a")
    assert np.all(dens[np.isfinite(dens)] >= 0)
