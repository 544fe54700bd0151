"""End-to-end accuracy gates.

One test per numbered gate so a verbose run prints one pass/fail line
each. The nine-design size table is computed once and shared by the two
gates that read it. Runtime budgets are stated against an 8-core target
and scaled by the cores actually present.
"""

import math
import os
import time

import numpy as np
import pytest

import loiv
from conftest import labeled_weights
from loiv._normal import norm_cdf
from loiv.alt_variance import oracle_variances
from loiv.inference import invert_lm_cs, invert_quadratic, lm_test
from loiv.l3o_variance import l3o_variance, l3o_variance_naive
from loiv.simulate import make_design, run_monte_carlo, table1_designs

_CPU = os.cpu_count() or 1
_JOBS = min(8, _CPU)

# reference rejection rates for the nine null designs of the size table
_L3O_TARGETS = (0.060, 0.052, 0.047, 0.044, 0.048, 0.060, 0.059, 0.049, 0.048)


@pytest.fixture(scope="module")
def table1_runs():
    designs = table1_designs(seed=1)
    start = time.perf_counter()
    results = [
        run_monte_carlo(d, ("l3o", "lmorc", "ms"), n_reps=1000, n_jobs=_JOBS)
        for d in designs
    ]
    wall = time.perf_counter() - start
    return results, wall


def test_criterion_1_size_table(table1_runs):
    results, wall = table1_runs
    rates = [res.rate("l3o") for res in results]
    for got, want in zip(rates, _L3O_TARGETS):
        assert got == pytest.approx(want, abs=0.025), (rates, _L3O_TARGETS)
    for res in results:
        assert res.rate("lmorc") == pytest.approx(0.05, abs=0.02), res.design_label
    # strong-heterogeneity block: the cross-fit variance is negative in
    # essentially every replication, so the column reads as undefined
    for res in results[:3]:
        cell = res.cells["ms"]
        assert cell.n_undefined / cell.n_reps > 0.99, res.design_label
    for res in results[3:6]:
        assert res.rate("ms") > 0.99, res.design_label
    budget = 900.0 * max(1.0, 8.0 / _CPU)
    assert wall <= budget, f"size table took {wall:.0f}s, budget {budget:.0f}s"


def test_criterion_2_size_with_few_strong_instruments():
    design = make_design("binary_judge", 4, 200, e_tfs=100.0, e_tar=100.0,
                         beta=0.0, seed=2026)
    res = run_monte_carlo(design, ("l3o",), n_reps=1000, n_jobs=_JOBS)
    assert res.rate("l3o") == pytest.approx(0.048, abs=0.025)


def test_criterion_3a_power_at_strong_signal():
    design = make_design("binary_judge", 100, 5, e_tfs=2.0, e_tar=0.0,
                         beta=0.1, seed=31)
    res = run_monte_carlo(design, ("l3o",), n_reps=1000, beta0=0.0, n_jobs=_JOBS)
    rate = res.rate("l3o")
    assert rate == pytest.approx(0.936, abs=0.03), (
        f"rejection rate at beta0=0 is {rate:.3f} against a documented target of "
        f"0.936 +- 0.03; the closed-form LM variance at this design is ~10.3, which "
        f"puts the studentized shift near 1.2 and the attainable asymptotic power "
        f"near 0.15, so the target is unattainable at these design parameters; "
        f"see the acceptance notes in README.md"
    )


def test_criterion_3b_size_without_first_stage():
    design = make_design("binary_judge", 100, 5, e_tfs=0.0, e_tar=0.0,
                         beta=0.1, seed=32)
    res = run_monte_carlo(design, ("l3o",), n_reps=1000, beta0=0.0, n_jobs=_JOBS)
    assert res.rate("l3o") == pytest.approx(0.05, abs=0.025)


def test_criterion_4_variance_unbiasedness():
    design = make_design("binary_judge", 20, 5, e_tfs=2.0, e_tar=2.0,
                         beta=0.1, seed=4)
    weights = loiv.design_weights(design)
    n_reps = 20_000
    values = np.empty(n_reps)
    for rep in range(n_reps):
        y, x = loiv.draw(design, rep)
        values[rep] = loiv.l3o_quadratic(weights, y, x).value(0.1)
    mean = float(np.mean(values))
    se_mean = float(np.std(values, ddof=1) / math.sqrt(n_reps))
    oracle = oracle_variances(design, 0.1, n_draws=10**6, seed=design.seed)
    se = math.hypot(se_mean, oracle.mc_se_lm)
    assert abs(mean - oracle.v_lm) <= 3.0 * se, (mean, oracle.v_lm, se)
    ratio = mean / oracle.v_lm
    assert 0.98 <= ratio <= 1.02, f"mean/oracle ratio {ratio:.4f}"


def test_criterion_5_fast_path_equals_naive():
    rng = np.random.default_rng(55)
    for i in range(100):
        with_w = bool(i % 2)
        n = int(rng.integers(24, 61))
        cells = int(rng.integers(3, min(7, n // 4) + 1))
        ds, w = labeled_weights(rng, n, cells, with_w=with_w)
        beta0 = float(rng.normal())
        v_fast = l3o_variance(w, ds.y, ds.x, beta0)
        v_naive = l3o_variance_naive(w, ds.y, ds.x, beta0)
        assert v_fast == pytest.approx(v_naive, rel=1e-8), (i, n, cells, with_w)


def _duality_cases():
    cases = []
    for i in range(10):
        cases.append(make_design(
            "binary_judge", 16, 6, e_tfs=6.0 + 0.5 * i, e_tar=float(i % 3),
            beta=0.4 if i % 2 else 0.0, seed=30 + i,
        ))
    for i in range(10):
        cases.append(make_design(
            "binary_covariates", 32, 5, e_tfs=12.0 + 0.4 * i, e_tar=0.0,
            beta=0.4 if i % 2 else 0.0, seed=60 + i,
        ))
    return cases


def test_criterion_6_test_inversion_duality():
    mismatches = 0
    checked = 0
    for idx, design in enumerate(_duality_cases()):
        ds = loiv.draw_dataset(design, 0)
        kind = "ujive" if ds.w_labels is not None else "jive"
        weights = loiv.build_weights(ds, kind)
        cs = invert_lm_cs(weights, ds.y, ds.x)
        assert cs.discriminant > 0.0, (idx, cs.shape)
        est = loiv.jive_estimate(weights, ds.y, ds.x).beta
        for beta0 in est + np.linspace(-4.0, 4.0, 50):
            rep = lm_test(weights, ds.y, ds.x, float(beta0))
            if rep.status != "ok":
                continue
            s_lm = rep.detail["s_lm"]
            f = s_lm * s_lm - rep.critical_value * rep.variance
            scale = max(s_lm * s_lm, rep.critical_value * abs(rep.variance), 1.0)
            if abs(f) <= 1e-7 * scale:
                continue
            checked += 1
            if cs.contains(float(beta0)) == rep.reject:
                mismatches += 1
    assert checked >= 900
    assert mismatches == 0


def test_criterion_7_cs_shape_table():
    cases = (
        (2.0, 0.0, -8.0, "interval"),
        (-2.0, 0.0, 8.0, "two_rays"),
        (-1.0, 0.0, -4.0, "empty"),
        (1.0, 0.0, 4.0, "whole_line"),
    )
    for a, b, c, want in cases:
        cs = invert_quadratic(a, b, c, 0.05)
        assert cs.shape == want, (a, b, c, cs.shape)
    interval = invert_quadratic(2.0, 0.0, -8.0, 0.05)
    assert interval.lower == pytest.approx(-2.0)
    assert interval.upper == pytest.approx(2.0)
    rays = invert_quadratic(-2.0, 0.0, 8.0, 0.05)
    assert rays.lower == pytest.approx(-2.0)
    assert rays.upper == pytest.approx(2.0)


def test_criterion_8_null_normality():
    design = make_design("binary_judge", 100, 5, e_tfs=8.0, e_tar=2.0,
                         beta=0.3, seed=8)
    weights = loiv.design_weights(design)
    v_lm, _ = loiv.simulate.analytic_oracle(design, design.beta)
    n_reps = 5000
    stats = np.empty(n_reps)
    root = math.sqrt(v_lm)
    for rep in range(n_reps):
        y, x = loiv.draw(design, rep)
        _, s_yx, _, s_xx = loiv.raw_moments(weights, y, x)
        stats[rep] = (s_yx - design.beta * s_xx) / root
    stats.sort()
    cdf = np.array([norm_cdf(v) for v in stats])
    hi = np.arange(1, n_reps + 1) / n_reps
    lo = np.arange(0, n_reps) / n_reps
    d_stat = max(float(np.max(hi - cdf)), float(np.max(cdf - lo)))
    assert d_stat < 1.6276 / math.sqrt(n_reps), f"KS statistic {d_stat:.5f}"


def test_criterion_9_crossfit_negativity_fraction(table1_runs):
    results, _ = table1_runs
    for res in results[:3]:
        codes = res.extras["codes"][2]
        fraction = float(np.mean(codes < 0))
        assert fraction > 0.99, (res.design_label, fraction)
