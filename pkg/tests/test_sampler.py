from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from sketchgp.kernels import FullGP, exp_cov
from sketchgp.sampler import (ChainConfig, ChainState, Priors, SketchedPosterior, _Problem,
                              coefficient_conditional, gibbs_coefficients, log_sketched_likelihood,
                              mh_variances, run_chain)
from sketchgp.simgen import SimConfig, generate
from sketchgp.sketch import SketchedData, apply_sketch, gen_gaussian_sketch, identity_sketch


def small_problem(n=40, S=2, seed=0, theta=1.0):
    train, _, _ = generate(SimConfig(n=n, n0=0, S=S, S0=0, seed=seed, theta0=theta))
    sk = apply_sketch(identity_sketch(n), train)
    return train, sk, exp_cov(train.locations, train.locations, theta)


def design(sk, s):
    return np.hstack([sk.X_sk, np.outer(sk.ones_sk, sk.global_attrs[s])])


def test_scalar_loglik_closed_form():
    sk = SketchedData(np.array([[1.7]]), np.array([[0.5]]), np.array([2.0]), np.array([[0.3]]), 3.0, 0)
    s2, t2, beta, gamma = 0.8, 0.4, np.array([1.1]), np.array([-0.7])
    mu = 0.5 * 1.1 + 2.0 * 0.3 * -0.7
    var = s2 + t2
    expected = 3.0 * (-0.5 * math.log(2 * math.pi * var) - (1.7 - mu) ** 2 / (2 * var))
    assert log_sketched_likelihood(sk, np.array([[1.0]]), s2, t2, beta, gamma) == pytest.approx(expected, abs=1e-12)


def test_identity_loglik_matches_dense_gaussian():
    _, sk, k = small_problem(n=60, S=3)
    beta, gamma, s2, t2 = np.array([1.5, -0.5]), np.array([4.0]), 1.7, 0.3
    cov = s2 * k + t2 * np.eye(sk.m)
    ref = sum(multivariate_normal(design(sk, s) @ np.r_[beta, gamma], cov).logpdf(sk.y_sk[:, s]) for s in range(sk.S))
    assert log_sketched_likelihood(sk, k, s2, t2, beta, gamma) == pytest.approx(ref, abs=1e-8)


def test_power_scales_loglik():
    _, sk, k = small_problem()
    sk2 = SketchedData(sk.y_sk, sk.X_sk, sk.ones_sk, sk.global_attrs, 2 * sk.power, 0)
    a = log_sketched_likelihood(sk, k, 1.0, 0.5, np.zeros(2), np.zeros(1))
    b = log_sketched_likelihood(sk2, k, 1.0, 0.5, np.zeros(2), np.zeros(1))
    assert b == pytest.approx(2 * a, rel=1e-14)


def analytic_coef_posterior(sk, k, s2, t2, weight=1.0):
    cinv = np.linalg.inv(s2 * k + t2 * np.eye(sk.m))
    prec = np.eye(sk.q + sk.p)
    rhs = np.zeros(sk.q + sk.p)
    for s in range(sk.S):
        a = design(sk, s)
        prec += weight * a.T @ cinv @ a
        rhs += weight * a.T @ cinv @ sk.y_sk[:, s]
    cov = np.linalg.inv(prec)
    return cov @ rhs, cov


def test_conditional_matches_analytic():
    _, sk, k = small_problem(n=50, S=3, seed=2)
    prob = _Problem(sk, k)
    mean, lp = coefficient_conditional(prob, prob.whiten(2.0, 0.2), 1.0)
    ref_mean, ref_cov = analytic_coef_posterior(sk, k, 2.0, 0.2)
    np.testing.assert_allclose(mean, ref_mean, atol=1e-10)
    np.testing.assert_allclose(np.linalg.inv(lp @ lp.T), ref_cov, atol=1e-10)


def test_huge_power_gives_gls():
    train, _, _ = generate(SimConfig(n=300, n0=0, S=4, S0=0, seed=3))
    phi = gen_gaussian_sketch(30, 300, 1)
    base = apply_sketch(phi, train)
    sk = SketchedData(base.y_sk, base.X_sk, base.ones_sk, base.global_attrs, 1e12, 0)
    quad = FullGP(train.locations, 3.0).quad_form(phi)
    prob = _Problem(sk, quad)
    mean, _ = coefficient_conditional(prob, prob.whiten(2.0, 0.2), sk.power)
    cinv = np.linalg.inv(2.0 * quad + 0.2 * np.eye(30))
    lhs = sum(design(sk, s).T @ cinv @ design(sk, s) for s in range(sk.S))
    rhs = sum(design(sk, s).T @ cinv @ sk.y_sk[:, s] for s in range(sk.S))
    np.testing.assert_allclose(mean, np.linalg.solve(lhs, rhs), atol=1e-8)


def test_no_runs_draws_from_prior():
    sk = SketchedData(np.zeros((5, 0)), np.ones((5, 2)), np.ones(5), np.zeros((0, 1)), 2.0, 0)
    rng = np.random.default_rng(0)
    state = ChainState(np.zeros(2), np.zeros(1), 1.0, 1.0)
    draws = np.array([np.r_[gibbs_coefficients(state, sk, np.eye(5), rng)] for _ in range(20000)])
    np.testing.assert_allclose(draws.mean(axis=0), 0.0, atol=0.03)
    np.testing.assert_allclose(np.cov(draws.T), np.eye(3), atol=0.04)


def test_gibbs_seeded():
    _, sk, k = small_problem()
    state = ChainState(np.zeros(2), np.zeros(1), 1.0, 1.0)
    a = gibbs_coefficients(state, sk, k, np.random.default_rng(4))
    b = gibbs_coefficients(state, sk, k, np.random.default_rng(4))
    np.testing.assert_array_equal(np.r_[a], np.r_[b])


def test_zero_proposal_sd_always_accepts():
    _, sk, k = small_problem()
    state = ChainState(np.zeros(2), np.zeros(1), 1.0, 0.5)
    rng = np.random.default_rng(0)
    for _ in range(50):
        s2, t2, acc, _ = mh_variances(state, sk, k, ChainConfig(), rng, sds=(0.0, 0.0))
        assert acc == (True, True) and (s2, t2) == (1.0, 0.5)


def test_constant_likelihood_samples_ig_prior():
    sk = SketchedData(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), 1.0, 0)
    priors = Priors(a_sigma=2.0, b_sigma=1.0, a_tau=3.0, b_tau=2.0)
    state = ChainState(np.zeros(1), np.zeros(1), 1.0, 1.0)
    rng = np.random.default_rng(1)
    inv_s, inv_t = [], []
    for _ in range(60000):
        state.sigma2, state.tau2, _, _ = mh_variances(state, sk, np.eye(1), ChainConfig(), rng, priors,
                                                      sds=(1.0, 1.0), loglik_fn=lambda s2, t2: 0.0)
        inv_s.append(1 / state.sigma2)
        inv_t.append(1 / state.tau2)
    inv_s, inv_t = np.array(inv_s[10000:]), np.array(inv_t[10000:])
    assert abs(inv_s.mean() / 2.0 - 1) < 0.05
    assert abs(inv_t.mean() / 1.5 - 1) < 0.05


def test_one_datum_marginal_matches_grid():
    # y = 1.3 at one sketched coordinate, Q = [0.7], tau2 held fixed, sigma2 sampled
    y, q, tau2, power = 1.3, 0.7, 0.25, 4.0
    sk = SketchedData(np.array([[y]]), np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), power, 0)
    priors = Priors()
    state = ChainState(np.zeros(1), np.zeros(1), 1.0, tau2)
    rng = np.random.default_rng(2)
    xs = []
    for t in range(80000):
        state.sigma2, state.tau2, _, _ = mh_variances(state, sk, np.array([[q]]), ChainConfig(), rng, priors,
                                                      sds=(0.9, 0.0))
        if t >= 5000:
            xs.append(math.log(state.sigma2))
    edges = np.linspace(-6, 4, 26)
    fine = np.linspace(-6, 4, 40001)
    s2 = np.exp(fine)
    var = s2 * q + tau2
    logpost = power * (-0.5 * np.log(var) - y * y / (2 * var)) - 2.0 * fine - 1.0 / s2
    dens = np.exp(logpost - logpost.max())
    mass = np.array([dens[(fine >= a) & (fine < b)].sum() for a, b in zip(edges[:-1], edges[1:])])
    mass /= mass.sum()
    hist, _ = np.histogram(xs, bins=edges)
    hist = hist / hist.sum()
    assert 0.5 * np.abs(hist - mass).sum() < 0.02


def fixed_config(**kw):
    base = dict(n_iter=5000, n_burn=0, thin=1, init_sigma2=2.0, init_tau2=0.2, chain_seed=7)
    base.update(kw)
    return ChainConfig(**base)


def test_conjugate_chain_matches_analytic_posterior():
    _, sk, k = small_problem(n=80, S=3, seed=5, theta=3.0)
    post = run_chain(sk, k, config=fixed_config(), theta=3.0, fix_variances=True)
    coef = post.draws[:, :3]
    ref_mean, ref_cov = analytic_coef_posterior(sk, k, 2.0, 0.2)
    L = coef.shape[0]
    se_mean = np.sqrt(np.diag(ref_cov) / L)
    assert np.all(np.abs(coef.mean(axis=0) - ref_mean) <= 3 * se_mean)
    d = np.diag(ref_cov)
    se_cov = np.sqrt((np.outer(d, d) + ref_cov**2) / L)
    assert np.all(np.abs(np.cov(coef.T) - ref_cov) <= 3 * se_cov)
    np.testing.assert_array_equal(post.draws[:, 3], 2.0)


def test_run_chain_deterministic_positive_and_roundtrip(tmp_path):
    train, _, _ = generate(SimConfig(n=300, n0=0, S=3, S0=0, seed=1))
    phi = gen_gaussian_sketch(30, 300, 0)
    sk = apply_sketch(phi, train)
    quad = FullGP(train.locations, 3.0).quad_form(phi)
    cfg = ChainConfig(n_iter=1200, n_burn=200, thin=2, chain_seed=3)
    a = run_chain(sk, quad, config=cfg, theta=3.0)
    b = run_chain(sk, quad, config=cfg, theta=3.0)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.L == 500
    assert np.all(a.draws[:, -2:] > 0)
    assert all(0 < r < 1 for r in a.accept_rates.values())
    a.save(tmp_path / "p.post")
    back = SketchedPosterior.load(tmp_path / "p.post")
    np.testing.assert_array_equal(back.draws, a.draws)
    assert back.names == a.names and back.theta == 3.0 and back.power == a.power
    with pytest.raises(KeyError):
        a.functional("nope")


def test_desk_single_sketch_covers_gamma():
    train, _, _ = generate(SimConfig(seed=0))
    phi = gen_gaussian_sketch(100, train.n, 0)
    sk = apply_sketch(phi, train)
    post = run_chain(sk, FullGP(train.locations, 3.0).quad_form(phi), theta=3.0)
    lo, hi = np.quantile(post.functional("gamma1"), [0.025, 0.975])
    assert lo <= 5.0 <= hi


def test_chain_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(n_iter=10, n_burn=10)
    with pytest.raises(ValueError):
        ChainConfig(thin=0)
    with pytest.raises(ValueError):
        Priors(a_sigma=0)
