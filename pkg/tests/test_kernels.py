from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchgp.kernels import (MPP, NNGP, DenseCapError, FullGP, KernelSpec, _nn_factor, exp_cov,
                              exp_kernel)
from sketchgp.sketch import gen_gaussian_sketch, gen_partition_sketch


def loop_cov(a, b, theta):
    out = np.empty((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = math.exp(-theta * math.sqrt(sum((a[i][k] - b[j][k]) ** 2 for k in range(len(a[i])))))
    return out


def test_kernel_values():
    assert exp_kernel([1.0, 2.0], [1.0, 2.0], 7.0) == 1.0
    assert exp_kernel([0.0, 0.0], [0.6, 0.8], 3.0) == pytest.approx(math.exp(-3.0), abs=1e-15)
    assert round(math.exp(-3.0), 6) == 0.049787


def test_exp_cov_matches_scalar_loop():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0, 5, (17, 2)), rng.uniform(0, 5, (11, 2))
    np.testing.assert_allclose(exp_cov(a, b, 1.3), loop_cov(a.tolist(), b.tolist(), 1.3), rtol=0, atol=1e-14)


def test_full_gp_small_cases():
    np.testing.assert_array_equal(FullGP([[0.3, 0.1]], 2.0).dense(), [[1.0]])
    grid = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    e1, e2 = math.exp(-1), math.exp(-2)
    hand = np.array([[1, e1, e2], [e1, 1, e1], [e2, e1, 1]])
    np.testing.assert_allclose(FullGP(grid, 1.0).dense(), hand, atol=1e-15)


def test_quad_form_symmetric_and_blockwise():
    rng = np.random.default_rng(1)
    locs = rng.uniform(0, 10, (1500, 2))
    phi = gen_gaussian_sketch(30, 1500, 5)
    cov = FullGP(locs, 3.0)
    q = cov.quad_form(phi)
    assert np.max(np.abs(q - q.T)) <= 1e-10
    dense = phi.matrix @ exp_cov(locs, locs, 3.0) @ phi.matrix.T
    np.testing.assert_allclose(q, dense, atol=1e-10)


def test_quad_form_selection_is_submatrix():
    rng = np.random.default_rng(2)
    locs = rng.uniform(0, 10, (80, 2))
    subsets = gen_partition_sketch("stratified", locs, 20, 0)
    k = exp_cov(locs, locs, 2.0)
    for phi in subsets:
        np.testing.assert_allclose(FullGP(locs, 2.0).quad_form(phi), k[np.ix_(phi.indices, phi.indices)], atol=1e-15)


def test_mpp_knot_interpolation_and_diagonal():
    rng = np.random.default_rng(3)
    locs = rng.uniform(0, 10, (60, 2))
    cov = MPP(locs, 1.0, n_knot=15, knot_seed=2)
    knots = cov.knot_indices
    assert np.all(np.abs(cov.diag_correction[knots]) <= 1e-10)
    full = cov.dense()
    np.testing.assert_allclose(np.diag(full), 1.0, atol=1e-10)


def test_mpp_large_theta_diag_to_one():
    locs = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0], [2.5, 2.5]])
    cov = MPP(locs, 1e3, n_knot=2, knot_seed=0, knot_indices=[0, 1])
    others = [2, 3, 4]
    np.testing.assert_allclose(cov.diag_correction[others], 1.0, atol=1e-6)


def test_nngp_two_points():
    locs = np.array([[0.0, 0.0], [0.5, 0.0]])
    a, d = _nn_factor(locs, 2.0, 1)
    kappa = math.exp(-1.0)
    assert a.nnz == 1 and a[1, 0] == pytest.approx(kappa, abs=1e-15)
    np.testing.assert_allclose(d, [1.0, 1.0 - kappa**2], atol=1e-15)


def test_nngp_row_sparsity_and_pd():
    rng = np.random.default_rng(4)
    locs = rng.uniform(0, 10, (200, 2))
    cov = NNGP(locs, 3.0, k=5)
    a, d = _nn_factor(locs[cov.order], 3.0, 5)
    assert np.all(np.diff(a.indptr) <= 5)
    assert np.all(d > 0)
    np.linalg.cholesky(cov.precision().toarray())


@pytest.mark.parametrize("variant", ["mpp", "nngp"])
def test_exact_limits_match_full(variant):
    rng = np.random.default_rng(5)
    for trial in range(5):
        n = int(rng.integers(5, 51))
        locs = rng.uniform(0, 10, (n, 2))
        theta = float(rng.uniform(0.3, 3))
        m = max(1, n // 3)
        phi = gen_gaussian_sketch(m, n, trial)
        full = FullGP(locs, theta).quad_form(phi)
        other = MPP(locs, theta, n, knot_indices=np.arange(n)) if variant == "mpp" else NNGP(locs, theta, n - 1)
        np.testing.assert_allclose(other.quad_form(phi), full, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 120), seed=st.integers(0, 10**6), variant=st.sampled_from(["full", "mpp", "nngp"]))
def test_quad_form_equals_dense_operator(n, seed, variant):
    rng = np.random.default_rng(seed)
    locs = rng.uniform(0, 10, (n, 2))
    spec = KernelSpec(1.5, variant, n_knot=max(1, n // 4), k=4)
    cov = spec.build(locs)
    phi = gen_gaussian_sketch(max(1, n // 5), n, seed)
    dense = phi.matrix @ cov.dense() @ phi.matrix.T
    np.testing.assert_allclose(cov.quad_form(phi), dense, atol=1e-8)


@pytest.mark.parametrize("variant", ["full", "mpp"])
def test_cross_covariances_exact_limits(variant):
    rng = np.random.default_rng(6)
    locs = rng.uniform(0, 10, (40, 2))
    new = rng.uniform(0, 10, (7, 2))
    allp = np.vstack([locs, new])
    cov = FullGP(locs, 3.0) if variant == "full" else MPP(locs, 3.0, 40, knot_indices=np.arange(40))
    phi = gen_gaussian_sketch(9, 40, 1)
    ref = exp_cov(allp, allp, 3.0)
    np.testing.assert_allclose(cov.sketch_cross(new, phi), ref[40:, :40] @ phi.matrix.T, atol=1e-8)
    pc = cov.prior_cov(new)
    if variant == "full":
        np.testing.assert_allclose(pc, ref[40:, 40:], atol=1e-8)
    else:
        # low rank through the knots off the diagonal, unit marginal variance on it
        low = ref[40:, :40] @ np.linalg.solve(ref[:40, :40], ref[:40, 40:])
        np.testing.assert_allclose(pc - np.diag(np.diag(pc)), low - np.diag(np.diag(low)), atol=1e-8)
        np.testing.assert_allclose(np.diag(pc), 1.0, atol=1e-10)


def test_nngp_cross_is_neighbor_conditioning():
    rng = np.random.default_rng(7)
    locs = rng.uniform(0, 10, (60, 2))
    new = rng.uniform(0, 10, (5, 2))
    cov = NNGP(locs, 1.0, k=6)
    phi = gen_gaussian_sketch(8, 60, 2)
    a_star, d_star = cov._new_point_factor(new)
    assert np.all(np.diff(a_star.indptr) == 6)
    kt = cov.dense()
    np.testing.assert_allclose(cov.sketch_cross(new, phi), a_star @ kt @ phi.matrix.T, atol=1e-10)
    np.testing.assert_allclose(cov.prior_cov(new), a_star @ kt @ a_star.T + np.diag(d_star), atol=1e-10)


def test_dense_cap():
    locs = np.random.default_rng(0).uniform(size=(30, 2))
    with pytest.raises(DenseCapError):
        FullGP(locs, 1.0, dense_cap=10).dense()


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec(-1.0)
    with pytest.raises(ValueError):
        KernelSpec(1.0, "mpp")
    with pytest.raises(ValueError):
        KernelSpec(1.0, "nngp", k=0)
