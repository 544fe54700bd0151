"""Hypothesis tests, confidence sets, and first-stage diagnostics."""

from __future__ import annotations

import math

import numpy as np

from ._normal import chi2_1_critical, norm_cdf, two_sided_p
from .alt_variance import (
    cms_fs_scale,
    cms_plugin_variance,
    constructed_ar_test,
    constructed_t_test,
    ek_plugin_test,
    mo_quadratic,
    ms_crossfit_variance,
    ms_fs_scale,
)
from .design import WeightScheme
from .errors import DegenerateFirstStage, GridTooCoarse, LoivError
from .l3o_variance import l3o_quadratic
from .results import ConfidenceSet, QuadraticVariance, TestReport
from .statistics import jive_estimate, k_statistics, raw_moments


def lm_test(weights: WeightScheme, y, x, beta0: float, alpha: float = 0.05,
            conservative: bool = False) -> TestReport:
    """Quadratic-form LM test of beta = beta0 with the leave-three-out variance.

    Rejects when S_LM^2 / V >= Phi^{-1}(1 - alpha/2)^2 with
    S_LM = sum_{i != j} G_ij e_i X_j. When the variance estimate is not
    positive the report carries status='negative_variance' and no
    rejection decision.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    stats = k_statistics(weights, y, x, beta0)
    s_lm = stats.t_lm * math.sqrt(stats.k)
    quad = l3o_quadratic(weights, y, x, conservative=conservative)
    v = quad.value(float(beta0))
    q = chi2_1_critical(alpha)
    detail = {
        "s_lm": s_lm,
        "variance_coefficients": (quad.b0, quad.b1, quad.b2),
        "conservative_applied": quad.conservative_applied,
        "dropped_triples": quad.dropped_triples,
    }
    if v <= 0.0:
        return TestReport(
            procedure="lm_l3o", beta0=float(beta0), statistic=None, variance=v,
            critical_value=q, alpha=alpha, status="negative_variance", reject=None,
            detail=detail,
        )
    stat = s_lm * s_lm / v
    return TestReport(
        procedure="lm_l3o", beta0=float(beta0), statistic=stat, variance=v,
        critical_value=q, alpha=alpha, status="ok", reject=bool(stat >= q),
        p_value=two_sided_p(math.sqrt(stat)), detail=detail,
    )


def invert_quadratic(a: float, b: float, c: float, alpha: float,
                     estimate: float | None = None) -> ConfidenceSet:
    """Classify and solve {beta0 : a beta0^2 - b beta0 + c <= 0}.

    The shape label is fixed by the leading coefficient and discriminant:
    interval when a > 0 and the discriminant is nonnegative, empty when
    both are negative, two rays when a < 0 with nonnegative discriminant,
    and the whole line when a > 0 with negative discriminant. A exactly
    zero leading coefficient degenerates to a half line, reported as
    two rays with one infinite endpoint.
    """
    disc = b * b - 4.0 * a * c
    detail = {"a": a, "b": b, "c": c}
    if a == 0.0:
        if b == 0.0:
            shape = "whole_line" if c <= 0.0 else "empty"
            return ConfidenceSet(shape=shape, alpha=alpha, leading_coeff=a,
                                 discriminant=disc, estimate=estimate, detail=detail)
        root = c / b
        if b > 0.0:
            return ConfidenceSet(shape="two_rays", alpha=alpha, lower=-math.inf, upper=root,
                                 leading_coeff=a, discriminant=disc, estimate=estimate,
                                 detail=detail)
        return ConfidenceSet(shape="two_rays", alpha=alpha, lower=root, upper=math.inf,
                             leading_coeff=a, discriminant=disc, estimate=estimate,
                             detail=detail)
    if a > 0.0:
        if disc >= 0.0:
            r_lo, r_hi = _stable_roots(a, b, c, disc)
            return ConfidenceSet(
                shape="interval", alpha=alpha, lower=r_lo, upper=r_hi,
                leading_coeff=a, discriminant=disc, estimate=estimate, detail=detail,
            )
        return ConfidenceSet(shape="whole_line", alpha=alpha, leading_coeff=a,
                             discriminant=disc, estimate=estimate, detail=detail)
    if disc >= 0.0:
        r_lo, r_hi = _stable_roots(a, b, c, disc)
        return ConfidenceSet(shape="two_rays", alpha=alpha, lower=r_lo, upper=r_hi,
                             leading_coeff=a, discriminant=disc, estimate=estimate,
                             detail=detail)
    return ConfidenceSet(shape="empty", alpha=alpha, leading_coeff=a, discriminant=disc,
                         estimate=estimate, detail=detail)


def _stable_roots(a: float, b: float, c: float, disc: float) -> tuple:
    """Ordered roots of a t^2 - b t + c without cancellation.

    Subtracting nearly equal b and sqrt(disc) loses every digit of the
    smaller root when |4ac| << b^2, so take the additive pairing for one
    root and recover the other from the product c/a.
    """
    q = (b + math.copysign(math.sqrt(disc), b)) / 2.0
    if q == 0.0:
        return 0.0, 0.0
    r1 = q / a
    r2 = c / q
    return min(r1, r2), max(r1, r2)


def invert_lm_cs(weights: WeightScheme, y, x, alpha: float = 0.05,
                 conservative: bool = False) -> ConfidenceSet:
    """Closed-form confidence set for the LM test with leave-three-out variance.

    Because the variance estimate is exactly quadratic in beta0, the
    no-rejection region is a quadratic inequality and the set solves in
    closed form; no grid is involved.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    _, s_yx, _, s_xx = raw_moments(weights, y, x)
    quad = l3o_quadratic(weights, y, x, conservative=conservative)
    q = chi2_1_critical(alpha)
    a = s_xx * s_xx - q * quad.b2
    b = 2.0 * s_yx * s_xx + q * quad.b1
    c = s_yx * s_yx - q * quad.b0
    estimate = s_yx / s_xx if s_xx != 0.0 else None
    cs = invert_quadratic(a, b, c, alpha, estimate=estimate)
    cs.detail["conservative_applied"] = quad.conservative_applied
    cs.detail["dropped_triples"] = quad.dropped_triples
    return cs


def _grid_reject_function(weights: WeightScheme, y, x, alpha: float, procedure: str,
                          conservative: bool):
    """Build beta0 -> bool-or-None (None meaning no decision) for grid inversion."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    q = chi2_1_critical(alpha)
    stats0 = k_statistics(weights, y, x, 0.0)
    sqrt_k = math.sqrt(stats0.k)

    if procedure == "lm_l3o":
        quad = l3o_quadratic(weights, y, x, conservative=conservative)

        def decide(b0: float):
            s_lm = (stats0.t_yx - b0 * stats0.t_xx) * sqrt_k
            v = quad.value(b0)
            if v <= 0.0:
                return None
            return s_lm * s_lm / v >= q

        return decide
    if procedure == "ar_cms":

        def decide(b0: float):
            s = stats0.at(b0)
            s_ar = s.t_ar * sqrt_k
            v = cms_plugin_variance(weights, y, x, b0)
            if v <= 0.0:
                return None
            return s_ar * s_ar / v >= q

        return decide
    if procedure == "ar_ms":

        def decide(b0: float):
            s = stats0.at(b0)
            s_ar = s.t_ar * sqrt_k
            v = ms_crossfit_variance(weights, y, x, b0)
            if v <= 0.0:
                return None
            return s_ar * s_ar / v >= q

        return decide
    raise LoivError(f"unknown grid procedure '{procedure}'")


def invert_grid_cs(weights: WeightScheme, y, x, alpha: float = 0.05,
                   procedure: str = "lm_l3o", n_points: int = 401,
                   expand_limit: float = 10.0, tol: float = 1e-6,
                   conservative: bool = False) -> ConfidenceSet:
    """Grid-based confidence set by test inversion.

    Scans a symmetric grid around the point estimate, widening it up to
    expand_limit times the initial half-width while acceptance reaches the
    edges, then refines interval endpoints by bisection to tol. Points
    where the test has no decision count as not rejected. A grid whose
    acceptance region is disconnected in the interior raises
    ``GridTooCoarse``; use the closed-form inversion for the LM test when
    exact shapes matter.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    decide = _grid_reject_function(weights, y, x, alpha, procedure, conservative)
    est = jive_estimate(weights, y, x)
    center = est.beta
    quad = l3o_quadratic(weights, y, x, conservative=True)
    _, s_yx, _, s_xx = raw_moments(weights, y, x)
    v_at = quad.value(center)
    if v_at > 0.0 and s_xx != 0.0:
        rough = math.sqrt(v_at) / abs(s_xx)
    else:
        rough = abs(center) + 1.0
    half = 10.0 * rough

    def rejected(b0: float) -> bool:
        d = decide(b0)
        return bool(d) if d is not None else False

    width = half
    while True:
        grid = np.linspace(center - width, center + width, n_points)
        rej = np.array([rejected(b) for b in grid], dtype=bool)
        if rej[0] and rej[-1]:
            break
        if width >= expand_limit * half:
            break
        width = min(expand_limit * half, width * 2.0)

    accept = ~rej
    if accept.all():
        return ConfidenceSet(shape="whole_line", alpha=alpha, estimate=center,
                             detail={"grid_width": width, "procedure": procedure})
    if rej.all():
        return ConfidenceSet(shape="empty", alpha=alpha, estimate=center,
                             detail={"grid_width": width, "procedure": procedure})

    def refine(lo: float, hi: float) -> float:
        # invariant: decision flips between lo and hi
        flag_lo = rejected(lo)
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if rejected(mid) == flag_lo:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    runs = []
    start = None
    for idx, acc in enumerate(accept):
        if acc and start is None:
            start = idx
        elif not acc and start is not None:
            runs.append((start, idx - 1))
            start = None
    if start is not None:
        runs.append((start, len(accept) - 1))

    interior = [r for r in runs if r[0] > 0 and r[1] < len(accept) - 1]
    edge_left = any(r[0] == 0 for r in runs)
    edge_right = any(r[1] == len(accept) - 1 for r in runs)

    if edge_left and edge_right:
        left_run = next(r for r in runs if r[0] == 0)
        right_run = next(r for r in runs if r[1] == len(accept) - 1)
        middle = [r for r in runs if r is not left_run and r is not right_run]
        if middle:
            raise GridTooCoarse(
                "acceptance region has disconnected pieces; refine the grid"
            )
        lower = refine(grid[left_run[1]], grid[left_run[1] + 1])
        upper = refine(grid[right_run[0] - 1], grid[right_run[0]])
        return ConfidenceSet(shape="two_rays", alpha=alpha, lower=lower, upper=upper,
                             estimate=center,
                             detail={"grid_width": width, "procedure": procedure})
    if edge_left or edge_right:
        raise GridTooCoarse(
            "acceptance region touches one grid edge after expansion; "
            "widen the grid or use the closed-form inversion"
        )
    if len(interior) != 1:
        raise GridTooCoarse("acceptance region has disconnected pieces; refine the grid")
    run = interior[0]
    lower = refine(grid[run[0] - 1], grid[run[0]])
    upper = refine(grid[run[1]], grid[run[1] + 1])
    return ConfidenceSet(shape="interval", alpha=alpha, lower=lower, upper=upper,
                         estimate=center, detail={"grid_width": width, "procedure": procedure})


def first_stage_diagnostics(weights: WeightScheme, y, x) -> dict:
    """Effective first-stage strength measures, all on the same q scale.

    Each entry divides S_FS^2 by the leading (beta0^2) coefficient of the
    corresponding variance estimator, so every value is comparable to the
    same chi-square critical value used by the tests. fs_l3o above the
    critical value indicates the closed-form LM confidence set is bounded.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    _, _, _, s_xx = raw_moments(weights, y, x)
    s2 = s_xx * s_xx
    quad = l3o_quadratic(weights, y, x, conservative=True)
    mo = mo_quadratic(weights, y, x)
    cms_scale = cms_fs_scale(weights, x)
    ms_scale = ms_fs_scale(weights, x)
    return {
        "s_fs": s_xx,
        "fs_l3o": s2 / quad.b2 if quad.b2 > 0 else math.inf,
        "fs_mo": s2 / mo.b2 if mo.b2 > 0 else math.inf,
        "fs_cms": s2 / cms_scale if cms_scale > 0 else math.inf,
        "fs_ms": s2 / ms_scale if ms_scale > 0 else math.inf,
    }


# ---------------------------------------------------------------------------
# asymptotic power utilities


def asymptotic_sigma(omega) -> np.ndarray:
    """Covariance of the three limiting quadratic forms from a 2x2 error covariance.

    omega = [[w_ee, w_ex], [w_ex, w_xx]] is the limit covariance of the
    reduced-form pair; the returned 3x3 matrix orders the components as
    (AR, LM, FS).
    """
    om = np.asarray(omega, dtype=float)
    if om.shape != (2, 2) or abs(om[0, 1] - om[1, 0]) > 1e-12:
        raise LoivError("omega must be a symmetric 2x2 matrix")
    evals = np.linalg.eigvalsh(om)
    if evals[0] < -1e-12:
        raise LoivError("omega must be positive semidefinite")
    wee, wex, wxx = om[0, 0], om[0, 1], om[1, 1]
    return np.array([
        [2.0 * wee * wee, 2.0 * wex * wee, 2.0 * wex * wex],
        [2.0 * wex * wee, wee * wxx + wex * wex, 2.0 * wex * wxx],
        [2.0 * wex * wex, 2.0 * wex * wxx, 2.0 * wxx * wxx],
    ])


def mu_restrictions(mu1: float, mu2: float, mu3: float, tol: float = 1e-10) -> bool:
    """Feasibility of limit first and second moments for the quadratic forms.

    The limits of (T_AR, T_LM, T_FS) means must satisfy mu1 >= 0,
    mu3 >= 0, and mu2^2 <= mu1 mu3, up to tolerance.
    """
    return mu1 >= -tol and mu3 >= -tol and mu2 * mu2 <= mu1 * mu3 + tol


def lm_asymptotic_power(delta: float, alpha: float = 0.05) -> float:
    """Limit rejection probability of the LM test at local shift delta.

    delta is the mean shift of the studentized statistic; the test rejects
    when its square exceeds the chi-square critical value, so power is
    Phi(delta - z) + Phi(-delta - z) with z the two-sided normal cutoff.
    """
    from ._normal import norm_quantile

    z = norm_quantile(1.0 - alpha / 2.0)
    return norm_cdf(delta - z) + norm_cdf(-delta - z)


def run_test(weights: WeightScheme, y, x, beta0: float, procedure: str,
             alpha: float = 0.05, conservative: bool = False,
             oracle_variances=None) -> TestReport:
    """Uniform entry point for every implemented test at a single beta0.

    oracle_variances, when given, is a pair (v_lm, v_ar) on the
    unnormalized scale used by the oracle procedures.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    q = chi2_1_critical(alpha)
    z = math.sqrt(q)
    if procedure == "lm_l3o":
        return lm_test(weights, y, x, beta0, alpha=alpha, conservative=conservative)

    stats = k_statistics(weights, y, x, beta0)
    sqrt_k = math.sqrt(stats.k)

    def chi_report(name: str, s_value: float, v: float | None, extra=None) -> TestReport:
        detail = extra or {}
        if v is None or v <= 0.0 or not math.isfinite(v):
            return TestReport(procedure=name, beta0=float(beta0), statistic=None,
                              variance=v, critical_value=q, alpha=alpha,
                              status="negative_variance", reject=None, detail=detail)
        stat = s_value * s_value / v
        return TestReport(procedure=name, beta0=float(beta0), statistic=stat, variance=v,
                          critical_value=q, alpha=alpha, status="ok",
                          reject=bool(stat >= q), p_value=two_sided_p(math.sqrt(stat)),
                          detail=detail)

    def t_report(name: str, t: float | None, extra=None) -> TestReport:
        detail = extra or {}
        if t is None or not math.isfinite(t):
            return TestReport(procedure=name, beta0=float(beta0), statistic=None,
                              variance=None, critical_value=z, alpha=alpha,
                              status="undefined", reject=None, detail=detail)
        return TestReport(procedure=name, beta0=float(beta0), statistic=t, variance=None,
                          critical_value=z, alpha=alpha, status="ok",
                          reject=bool(abs(t) >= z), p_value=two_sided_p(t), detail=detail)

    if procedure == "lm_oracle":
        if oracle_variances is None:
            raise LoivError("lm_oracle requires oracle variances")
        return chi_report("lm_oracle", stats.t_lm * sqrt_k, oracle_variances[0])
    if procedure == "ar_oracle":
        if oracle_variances is None:
            raise LoivError("ar_oracle requires oracle variances")
        return chi_report("ar_oracle", stats.t_ar * sqrt_k, oracle_variances[1])
    if procedure == "lm_mo":
        v = mo_quadratic(weights, y, x).value(float(beta0))
        return chi_report("lm_mo", stats.t_lm * sqrt_k, v)
    if procedure == "ar_ms":
        v = ms_crossfit_variance(weights, y, x, beta0)
        return chi_report("ar_ms", stats.t_ar * sqrt_k, v)
    if procedure == "ar_cms":
        v = cms_plugin_variance(weights, y, x, beta0)
        return chi_report("ar_cms", stats.t_ar * sqrt_k, v)
    if procedure == "ek":
        try:
            t, beta_hat, se = ek_plugin_test(weights, y, x, beta0)
        except DegenerateFirstStage:
            return t_report("ek", None)
        return t_report("ek", t, {"beta_hat": beta_hat, "se": se})
    if procedure == "xt_ar":
        try:
            t = constructed_ar_test(weights, y, x, beta0)
        except DegenerateFirstStage:
            return t_report("xt_ar", None)
        return t_report("xt_ar", t)
    if procedure == "xt_t":
        try:
            t, beta_hat, se = constructed_t_test(weights, y, x, beta0)
        except DegenerateFirstStage:
            return t_report("xt_t", None)
        return t_report("xt_t", t, {"beta_hat": beta_hat, "se": se})
    raise LoivError(f"unknown procedure '{procedure}'")
