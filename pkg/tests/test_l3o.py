"""Leave-three-out variance: fast route against the literal reference."""

import sys

import numpy as np
import pytest

import loiv
from loiv import Dataset, build_weights
from loiv.l3o_variance import l3o_variance, l3o_variance_naive

from conftest import labeled_weights


@pytest.mark.parametrize("seed,with_w", [(1, False), (2, True), (3, False), (4, True), (5, False)])
def test_fast_equals_naive(seed, with_w):
    rng = np.random.default_rng(seed)
    ds, w = labeled_weights(rng, int(rng.integers(20, 45)), int(rng.integers(2, 5)), with_w=with_w)
    for beta0 in (0.0, 0.6, -1.1):
        v_fast = l3o_variance(w, ds.y, ds.x, beta0)
        v_naive = l3o_variance_naive(w, ds.y, ds.x, beta0)
        assert v_fast == pytest.approx(v_naive, rel=1e-9)


def test_quadratic_reproduces_pointwise_values(rng):
    ds, w = labeled_weights(rng, 28, 4)
    quad = loiv.l3o_quadratic(w, ds.y, ds.x)
    for beta0 in np.linspace(-2.0, 2.0, 9):
        direct = l3o_variance(w, ds.y, ds.x, beta0)
        poly = quad.b0 + quad.b1 * beta0 + quad.b2 * beta0 ** 2
        assert poly == pytest.approx(direct, rel=1e-11)


def test_quadratic_value_helper(rng):
    ds, w = labeled_weights(rng, 24, 3)
    quad = loiv.l3o_quadratic(w, ds.y, ds.x)
    assert quad.value(0.37) == pytest.approx(quad.b0 + 0.37 * quad.b1 + 0.37 ** 2 * quad.b2)


def test_three_row_cell_is_singular(rng):
    # removing three rows empties the cell, so every triple there has a
    # zero minor: hard error by default, drop-and-flag in conservative mode
    labels = np.array([0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2])
    y = rng.standard_normal(12)
    x = rng.standard_normal(12)
    w = build_weights(Dataset(y=y, x=x, z=labels), kind="jive")
    with pytest.raises(loiv.NearSingularTriple):
        loiv.l3o_quadratic(w, y, x)
    quad = loiv.l3o_quadratic(w, y, x, conservative=True)
    assert quad.conservative_applied
    assert quad.dropped_triples > 0


def test_feasibility_report(rng):
    labels = np.array([0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2])
    y = rng.standard_normal(12)
    x = rng.standard_normal(12)
    w = build_weights(Dataset(y=y, x=x, z=labels), kind="jive")
    report = loiv.l3o_feasible(w, y, x)
    assert not report.feasible
    assert report.n_singular_triples > 0
    assert report.first_offender is not None

    ds, w_ok = labeled_weights(rng, 20, 3)
    assert loiv.l3o_feasible(w_ok, ds.y, ds.x).feasible


def test_naive_size_guard(rng):
    ds, w = labeled_weights(rng, 24, 3)
    lv = sys.modules["loiv.l3o_variance"]
    big = lv._NAIVE_MAX_N
    assert big < 200  # the guard exists and is small
    with pytest.raises(ValueError):
        d = loiv.make_design("binary_judge", 4, 60, e_tfs=2.0, e_tar=0.0, seed=1)
        wd = loiv.design_weights(d)
        yy, xx = loiv.draw(d, 0)
        l3o_variance_naive(wd, yy, xx, 0.0)


def test_variance_positive_under_null_signal(rng):
    # strong design, correct null: variance should be positive and stable
    d = loiv.make_design("binary_judge", 16, 6, e_tfs=8.0, e_tar=0.0, beta=0.2, seed=9)
    w = loiv.design_weights(d)
    y, x = loiv.draw(d, 0)
    v = l3o_variance(w, y, x, 0.2)
    assert v > 0.0


def test_block_and_dense_paths_agree(rng):
    # same dataset, block-aware weights vs dense indicator encoding
    labels = np.repeat(np.arange(4), 6)
    y = rng.standard_normal(24)
    x = rng.standard_normal(24)
    w_block = build_weights(Dataset(y=y, x=x, z=labels), kind="jive")
    zind = (labels[:, None] == np.arange(4)[None, :]).astype(float)
    w_dense = build_weights(Dataset(y=y, x=x, z=zind), kind="jive")
    qa = loiv.l3o_quadratic(w_block, y, x)
    qb = loiv.l3o_quadratic(w_dense, y, x)
    assert qa.b0 == pytest.approx(qb.b0, rel=1e-10)
    assert qa.b1 == pytest.approx(qb.b1, rel=1e-10)
    assert qa.b2 == pytest.approx(qb.b2, rel=1e-10)
