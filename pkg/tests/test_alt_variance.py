"""Rival variance estimators against literal double-loop references."""

import math

import numpy as np
import pytest

import loiv
from loiv import (
    cms_plugin_variance,
    constructed_ar_test,
    constructed_t_test,
    ek_plugin_test,
    ek_plugin_variance,
    ms_crossfit_variance,
    mo_quadratic,
    population_ar_variance,
    population_lm_variance,
)

from conftest import labeled_weights


def _dense_m(weights):
    if weights.blocks is None:
        return weights.hat.m
    n = weights.n
    m = np.zeros((n, n))
    for bi, idx in enumerate(weights.blocks.indices):
        m[np.ix_(idx, idx)] = weights.m_block(bi)
    return m


def test_mo_variance_matches_loop(rng):
    ds, w = labeled_weights(rng, 20, 3)
    y, x = ds.y, ds.x
    beta0 = 0.3
    e = y - beta0 * x
    g = w.g
    n = 20
    gx = np.array([sum(g[i, j] * x[j] for j in range(n) if j != i) for i in range(n)])
    want = float(np.sum(gx ** 2 * e ** 2))
    for i in range(n):
        for j in range(n):
            if i != j:
                want += g[i, j] ** 2 * (x[i] * e[i]) * (x[j] * e[j])
    quad = mo_quadratic(w, y, x)
    assert quad.value(beta0) == pytest.approx(want, rel=1e-10)


def test_ms_crossfit_matches_loop(rng):
    ds, w = labeled_weights(rng, 18, 3)
    y, x = ds.y, ds.x
    beta0 = -0.5
    e = y - beta0 * x
    m = _dense_m(w)
    me = m @ e
    prod = e * me
    g = w.g
    want = 0.0
    for i in range(18):
        for j in range(18):
            if i != j:
                want += g[i, j] ** 2 / (m[i, i] * m[j, j] + m[i, j] ** 2) * prod[i] * prod[j]
    want *= 2.0
    assert ms_crossfit_variance(w, y, x, beta0) == pytest.approx(want, rel=1e-10)


def test_cms_plugin_matches_loop(rng):
    ds, w = labeled_weights(rng, 18, 3)
    y, x = ds.y, ds.x
    beta0 = 0.2
    e2 = (y - beta0 * x) ** 2
    g = w.g
    want = 2.0 * sum(
        g[i, j] ** 2 * e2[i] * e2[j]
        for i in range(18) for j in range(18) if i != j
    )
    got = cms_plugin_variance(w, y, x, beta0)
    assert got == pytest.approx(want, rel=1e-10)
    assert got >= 0.0


def test_constructed_t_point_estimate_is_ratio_estimator(rng):
    ds, w = labeled_weights(rng, 24, 4)
    t, beta, se = constructed_t_test(w, ds.y, ds.x, 0.0)
    est = loiv.jive_estimate(w, ds.y, ds.x)
    assert beta == pytest.approx(est.beta, rel=1e-12)
    assert t == pytest.approx(beta / se, rel=1e-12)
    assert se > 0.0


def test_constructed_ar_matches_literal(rng):
    ds, w = labeled_weights(rng, 22, 3)
    beta0 = 0.15
    e = ds.y - beta0 * ds.x
    xt = loiv.leave_out_predictor(w, ds.x)
    delta = float(e @ xt) / float(xt @ xt)
    eps = e - delta * xt
    want = float(e @ xt) / math.sqrt(float(np.sum(xt ** 2 * eps ** 2)))
    assert constructed_ar_test(w, ds.y, ds.x, beta0) == pytest.approx(want, rel=1e-12)


def test_population_lm_variance_matches_loop(rng):
    ds, w = labeled_weights(rng, 16, 3)
    n = 16
    g = w.g
    r = rng.standard_normal(n)
    rd = rng.standard_normal(n)
    nu2 = rng.random(n) + 0.2
    eta2 = rng.random(n) + 0.2
    nueta = 0.3 * np.sqrt(nu2 * eta2)

    row = np.array([sum(g[i, j] * r[j] for j in range(n) if j != i) for i in range(n)])
    col = np.array([sum(g[j, i] * rd[j] for j in range(n) if j != i) for i in range(n)])
    t1 = float(np.sum(nu2 * row ** 2))
    t2 = sum(g[i, j] ** 2 * nu2[i] * eta2[j] for i in range(n) for j in range(n) if i != j)
    t3 = sum(g[i, j] * g[j, i] * nueta[i] * nueta[j] for i in range(n) for j in range(n) if i != j)
    t4 = 2.0 * float(np.sum(nueta * row * col))
    t5 = float(np.sum(eta2 * col ** 2))
    want = t1 + t2 + t3 + t4 + t5
    got = population_lm_variance(w, r, rd, nu2, eta2, nueta)
    assert got == pytest.approx(want, rel=1e-10)


def test_population_ar_variance_matches_loop(rng):
    ds, w = labeled_weights(rng, 16, 3)
    n = 16
    g = w.g
    rd = rng.standard_normal(n)
    nu2 = rng.random(n) + 0.2
    both = np.array([
        sum((g[i, j] + g[j, i]) * rd[j] for j in range(n) if j != i) for i in range(n)
    ])
    lin = float(np.sum(nu2 * both ** 2))
    quad = 0.5 * sum(
        (g[i, j] + g[j, i]) ** 2 * nu2[i] * nu2[j]
        for i in range(n) for j in range(n) if i != j
    )
    got = population_ar_variance(w, rd, nu2)
    assert got == pytest.approx(lin + quad, rel=1e-10)


def test_ek_plugin_consistent_with_population_decomposition(rng):
    # the plug-in is the population decomposition with fitted projections
    # and annihilated residual products substituted in
    ds, w = labeled_weights(rng, 20, 3)
    y, x = ds.y, ds.x
    est = loiv.jive_estimate(w, y, x)
    e = y - est.beta * x
    m = _dense_m(w)
    nu = m @ e
    eta = m @ x
    want = population_lm_variance(w, x - eta, e - nu, nu * nu, eta * eta, nu * eta)
    assert ek_plugin_variance(w, y, x, est.beta) == pytest.approx(want, rel=1e-10)


def test_ek_plugin_test_shape(rng):
    d = loiv.make_design("binary_judge", 16, 6, e_tfs=8.0, e_tar=0.0, beta=0.4, seed=2)
    w = loiv.design_weights(d)
    y, x = loiv.draw(d, 1)
    t, beta, se = ek_plugin_test(w, y, x, 0.4)
    assert se is None or se > 0.0
    if t is not None:
        _, _, _, s_xx = loiv.raw_moments(w, y, x)
        v = ek_plugin_variance(w, y, x, beta)
        assert t == pytest.approx((beta - 0.4) / (math.sqrt(v) / abs(s_xx)), rel=1e-10)


def test_oracle_variances_deterministic_and_near_analytic():
    d = loiv.make_design("binary_judge", 8, 5, e_tfs=2.0, e_tar=1.0, beta=0.0, seed=4)
    a = loiv.oracle_variances(d, beta0=0.0, n_draws=40000, seed=11)
    b = loiv.oracle_variances(d, beta0=0.0, n_draws=40000, seed=11)
    assert a.v_lm == b.v_lm and a.v_ar == b.v_ar
    assert a.v_lm_analytic is not None
    assert abs(a.v_lm - a.v_lm_analytic) < 4.0 * a.mc_se_lm
    assert abs(a.v_ar - a.v_ar_analytic) < 4.0 * a.mc_se_ar
