"""Raw off-diagonal moments, normalized statistics, and point estimates."""

import math

import numpy as np
import pytest

import loiv
from loiv import Dataset, build_weights

from conftest import labeled_weights


def _offdiag_sums(g, y, x):
    """Reference double loop for the four raw moments."""
    n = len(y)
    s_yy = s_yx = s_xy = s_xx = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            s_yy += g[i, j] * y[i] * y[j]
            s_yx += g[i, j] * y[i] * x[j]
            s_xy += g[i, j] * x[i] * y[j]
            s_xx += g[i, j] * x[i] * x[j]
    return s_yy, s_yx, s_xy, s_xx


def test_raw_moments_match_reference_loop(rng):
    ds, w = labeled_weights(rng, 22, 4)
    got = loiv.raw_moments(w, ds.y, ds.x)
    want = _offdiag_sums(w.g, ds.y, ds.x)
    np.testing.assert_allclose(got, want, rtol=1e-11)


def test_raw_moments_with_covariates(rng):
    ds, w = labeled_weights(rng, 26, 3, with_w=True)
    got = loiv.raw_moments(w, ds.y, ds.x)
    want = _offdiag_sums(w.g, ds.y, ds.x)
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_k_statistics_scale_and_identities(rng):
    ds, w = labeled_weights(rng, 24, 4)
    beta0 = 0.4
    s_yy, s_yx, s_xy, s_xx = loiv.raw_moments(w, ds.y, ds.x)
    ks = loiv.k_statistics(w, ds.y, ds.x, beta0)
    scale = 1.0 / math.sqrt(w.k_eff)
    assert ks.k == w.k_eff
    assert ks.t_yy == pytest.approx(scale * s_yy, rel=1e-12)
    assert ks.t_fs == pytest.approx(scale * s_xx, rel=1e-12)
    # the test statistics are linear and quadratic polynomials in beta0
    assert ks.t_lm == pytest.approx(scale * (s_yx - beta0 * s_xx), rel=1e-12)
    assert ks.t_ar == pytest.approx(
        scale * (s_yy - beta0 * (s_yx + s_xy) + beta0 ** 2 * s_xx), rel=1e-12
    )


def test_jive_estimate_is_moment_ratio(rng):
    ds, w = labeled_weights(rng, 24, 4)
    _, s_yx, _, s_xx = loiv.raw_moments(w, ds.y, ds.x)
    est = loiv.jive_estimate(w, ds.y, ds.x)
    assert est.method == "jive"
    assert est.beta == pytest.approx(s_yx / s_xx, rel=1e-12)


def test_jive_estimate_degenerate_first_stage(rng):
    ds, w = labeled_weights(rng, 20, 3)
    with pytest.raises(loiv.DegenerateFirstStage):
        loiv.jive_estimate(w, ds.y, np.zeros(20))


def test_tsls_matches_direct_projection(rng):
    # reference: project x and y on the full design, 2SLS slope from scratch
    n = 30
    labels = np.repeat(np.arange(5), 6)
    y = rng.standard_normal(n)
    x = rng.standard_normal(n)
    ds = Dataset(y=y, x=x, z=labels)
    zind = (labels[:, None] == np.arange(5)[None, :]).astype(float)
    hz = zind @ np.linalg.solve(zind.T @ zind, zind.T)
    xhat = hz @ x
    beta_ref = float(xhat @ y) / float(xhat @ x)
    est = loiv.tsls_estimate(ds)
    assert est.method == "tsls"
    assert est.beta == pytest.approx(beta_ref, rel=1e-10)
    assert est.se is not None and est.se > 0


def test_tsls_with_covariates_partials_them_out(rng):
    n = 36
    labels = np.repeat(np.arange(6), 6)
    wmat = rng.standard_normal((n, 2))
    y = rng.standard_normal(n)
    x = rng.standard_normal(n)
    ds = Dataset(y=y, x=x, z=labels, w=wmat)
    # reference via residualizing everything on the supplied covariates
    # (used exactly as given; no intercept is injected)
    mw = np.eye(n) - wmat @ np.linalg.solve(wmat.T @ wmat, wmat.T)
    zind = (labels[:, None] == np.arange(6)[None, :]).astype(float)
    zt = mw @ zind
    zt = zt[:, np.abs(zt).sum(axis=0) > 1e-12]
    hz = zt @ np.linalg.pinv(zt)
    xr, yr = mw @ x, mw @ y
    beta_ref = float((hz @ xr) @ yr) / float((hz @ xr) @ xr)
    est = loiv.tsls_estimate(ds)
    assert est.beta == pytest.approx(beta_ref, rel=1e-8)


def test_moments_detect_signal(rng):
    # a real first stage makes s_xx large and positive
    labels = np.repeat(np.arange(4), 8)
    effects = np.array([2.0, -2.0, 1.5, -1.5])
    x = effects[labels] + 0.1 * rng.standard_normal(32)
    y = 0.5 * x + 0.1 * rng.standard_normal(32)
    w = build_weights(Dataset(y=y, x=x, z=labels), kind="jive")
    _, s_yx, _, s_xx = loiv.raw_moments(w, y, x)
    assert s_xx > 10.0
    assert s_yx / s_xx == pytest.approx(0.5, abs=0.1)
