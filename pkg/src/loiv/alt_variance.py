"""Rival variance estimators and the simulation oracle.

Every routine here returns variances on the unnormalized scale: an estimate
of Var(S) where S is the raw off-diagonal double sum (no 1 / sqrt(K)
factor). Decision rules then read S^2 / V >= q uniformly, with
q = Phi^{-1}(1 - alpha / 2)^2, and the K normalizations in the published
displays cancel.
"""

from __future__ import annotations

import math

import numpy as np

from .design import WeightScheme, leave_out_predictor, offdiag_bilinear
from .errors import DegenerateFirstStage
from .results import Estimate, OracleMoments, QuadraticVariance
from .statistics import jive_estimate, raw_moments
from ._normal import norm_quantile


def _squared_weight_bilinear(weights: WeightScheme, a: np.ndarray, b: np.ndarray) -> float:
    """sum_{i != j} G_ij^2 a_i b_j."""
    if weights.blocks is None:
        g2 = weights.g ** 2
        return float(a @ g2 @ b - np.sum(np.diag(g2) * a * b))
    total = 0.0
    for bi, idx in enumerate(weights.blocks.indices):
        g2 = weights.g_block(bi) ** 2
        ab, bb = a[idx], b[idx]
        total += float(ab @ g2 @ bb - np.sum(np.diag(g2) * ab * bb))
    return total


def _hadamard_pair_bilinear(weights: WeightScheme, a: np.ndarray, b: np.ndarray) -> float:
    """sum_{i != j} G_ij G_ji a_i b_j."""
    if weights.blocks is None:
        gg = weights.g * weights.g.T
        return float(a @ gg @ b - np.sum(np.diag(gg) * a * b))
    total = 0.0
    for bi, idx in enumerate(weights.blocks.indices):
        gb = weights.g_block(bi)
        gg = gb * gb.T
        ab, bb = a[idx], b[idx]
        total += float(ab @ gg @ bb - np.sum(np.diag(gg) * ab * bb))
    return total


def mo_quadratic(weights: WeightScheme, y: np.ndarray, x: np.ndarray) -> QuadraticVariance:
    """Plug-in variance built from own-residual products, as a quadratic.

    Unnormalized form of
        sum_i (sum_{j != i} G_ij X_j)^2 e_i^2
        + sum_{i != j} G_ij^2 (X e)_i (X e)_j
    with e = y - beta0 x expanded symbolically in beta0. Valid under
    homogeneous effects; its first-stage leading coefficient is the
    denominator of the fs_mo diagnostic.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    gx = leave_out_predictor(weights, x)
    gx2 = gx * gx
    u = x * y
    v = x * x
    b0 = float(np.sum(gx2 * y * y)) + _squared_weight_bilinear(weights, u, u)
    b1 = (-2.0 * float(np.sum(gx2 * x * y))
          - _squared_weight_bilinear(weights, u, v)
          - _squared_weight_bilinear(weights, v, u))
    b2 = float(np.sum(gx2 * v)) + _squared_weight_bilinear(weights, v, v)
    return QuadraticVariance(b0=b0, b1=b1, b2=b2)


def _ms_kernel(weights: WeightScheme):
    """Pairs (i, j) weight G_ij^2 / (M_ii M_jj + M_ij^2), returned as a callable."""
    if weights.blocks is None:
        m = weights.hat.m
        dm = np.diag(m)
        denom = np.outer(dm, dm) + m * m
        w = weights.g ** 2 / denom
        np.fill_diagonal(w, 0.0)

        def kernel(a: np.ndarray, b: np.ndarray) -> float:
            return float(a @ w @ b)

        return kernel

    mats = []
    for bi in range(weights.blocks.n_blocks):
        mb = weights.m_block(bi)
        dm = np.diag(mb)
        denom = np.outer(dm, dm) + mb * mb
        w = weights.g_block(bi) ** 2 / denom
        np.fill_diagonal(w, 0.0)
        mats.append(w)

    def kernel(a: np.ndarray, b: np.ndarray) -> float:
        total = 0.0
        for w, idx in zip(mats, weights.blocks.indices):
            total += float(a[idx] @ w @ b[idx])
        return total

    return kernel


def ms_crossfit_variance(weights: WeightScheme, y: np.ndarray, x: np.ndarray, beta0: float) -> float:
    """Cross-fit variance for the AR-type statistic, unnormalized.

    2 sum_{i != j} G_ij^2 / (M_ii M_jj + M_ij^2) * (e M e)_i (e M e)_j with
    (e M e)_i = e_i (M e)_i. Can be negative; callers must treat a
    non-positive value as an undefined test, never as a rejection.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    e = y - float(beta0) * x
    if weights.blocks is None:
        me = weights.hat.m @ e
    else:
        me = np.empty_like(e)
        for bi, idx in enumerate(weights.blocks.indices):
            me[idx] = weights.m_block(bi) @ e[idx]
    prod = e * me
    return 2.0 * _ms_kernel(weights)(prod, prod)


def cms_plugin_variance(weights: WeightScheme, y: np.ndarray, x: np.ndarray, beta0: float) -> float:
    """Convergence-robust plug-in for the AR-type statistic, unnormalized.

    2 sum_{i != j} G_ij^2 e_i^2 e_j^2; nonnegative by construction.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    e = y - float(beta0) * x
    e2 = e * e
    return 2.0 * _squared_weight_bilinear(weights, e2, e2)


def ms_fs_scale(weights: WeightScheme, x: np.ndarray) -> float:
    """Denominator of the fs_ms diagnostic: the MS kernel applied to x^2."""
    x2 = np.asarray(x, dtype=float) ** 2
    return 2.0 * _ms_kernel(weights)(x2, x2)


def cms_fs_scale(weights: WeightScheme, x: np.ndarray) -> float:
    """Denominator of the fs_cms diagnostic."""
    x2 = np.asarray(x, dtype=float) ** 2
    return 2.0 * _squared_weight_bilinear(weights, x2, x2)


# ---------------------------------------------------------------------------
# constructed-instrument tests


def constructed_t_test(weights: WeightScheme, y: np.ndarray, x: np.ndarray, beta0: float):
    """t-test of the leave-out ratio estimator against beta0.

    The constructed instrument is Xt_i = sum_{j != i} G_ij X_j; the point
    estimate sum Y Xt / sum X Xt coincides with the ratio estimator from
    the same weights. Returns (t, beta_hat, se).
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    xt = leave_out_predictor(weights, x)
    denom = float(np.sum(x * xt))
    if denom == 0.0:
        raise DegenerateFirstStage("constructed instrument is orthogonal to the regressor")
    beta = float(np.sum(y * xt)) / denom
    resid = y - beta * x
    var = float(np.sum(xt * xt * resid * resid)) / denom ** 2
    se = math.sqrt(var)
    return (beta - float(beta0)) / se, beta, se


def constructed_ar_test(weights: WeightScheme, y: np.ndarray, x: np.ndarray, beta0: float) -> float:
    """Just-identified AR test along the constructed instrument.

    Regresses e = y - beta0 x on Xt, removes the fitted part, and
    studentizes sum e_i Xt_i by the heteroskedasticity-robust variance of
    that sum. Returns the t-ratio.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    e = y - float(beta0) * x
    xt = leave_out_predictor(weights, x)
    ss = float(np.sum(xt * xt))
    if ss == 0.0:
        raise DegenerateFirstStage("constructed instrument is identically zero")
    delta = float(np.sum(e * xt)) / ss
    eps = e - delta * xt
    denom = math.sqrt(float(np.sum(xt * xt * eps * eps)))
    if denom == 0.0:
        raise DegenerateFirstStage("constructed-instrument residuals are degenerate")
    return float(np.sum(e * xt)) / denom


# ---------------------------------------------------------------------------
# plug-in for the LM variance under homogeneity-style approximations


def ek_plugin_variance(weights: WeightScheme, y: np.ndarray, x: np.ndarray, beta_hat: float) -> float:
    """Plug-in estimate of Var(S_LM) evaluated at the point estimate.

    Uses the population variance decomposition with fitted first-stage
    projections standing in for the mean functions and own products of
    annihilated residuals standing in for the error moments:

        R    -> H_Q x,   R_delta -> H_Q e_hat,
        nu_i -> (M e_hat)_i,  eta_i -> (M x)_i,

    where e_hat = y - beta_hat x. All five population terms are formed
    with these plug-ins.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    e = y - float(beta_hat) * x
    if weights.blocks is None:
        m = weights.hat.m
        nu = m @ e
        eta = m @ x
    else:
        nu = np.empty_like(e)
        eta = np.empty_like(x)
        for bi, idx in enumerate(weights.blocks.indices):
            mb = weights.m_block(bi)
            nu[idx] = mb @ e[idx]
            eta[idx] = mb @ x[idx]
    # Fitted projections: H_Q v = v - M v.
    r_hat = x - eta
    rd_hat = e - nu
    g_row_r = leave_out_predictor(weights, r_hat)
    nu2 = nu * nu
    eta2 = eta * eta
    nueta = nu * eta
    # Column-weight leave-out predictions, sum_{j != i} G_ji v_j.
    if weights.blocks is None:
        g = weights.g
        g_col_rd = g.T @ rd_hat - np.diag(g) * rd_hat
    else:
        g_col_rd = np.empty_like(rd_hat)
        for bi, idx in enumerate(weights.blocks.indices):
            gb = weights.g_block(bi)
            vb = rd_hat[idx]
            g_col_rd[idx] = gb.T @ vb - np.diag(gb) * vb
    term1 = float(np.sum(nu2 * g_row_r ** 2))
    term2 = _squared_weight_bilinear(weights, nu2, eta2)
    term3 = _hadamard_pair_bilinear(weights, nueta, nueta)
    term4 = 2.0 * float(np.sum(nueta * g_row_r * g_col_rd))
    term5 = float(np.sum(eta2 * g_col_rd ** 2))
    return term1 + term2 + term3 + term4 + term5


def ek_plugin_test(weights: WeightScheme, y: np.ndarray, x: np.ndarray, beta0: float):
    """t-ratio for the ratio estimator using the plug-in variance.

    Returns (t, beta_hat, se) with se = sqrt(V) / |S_fs|.
    """
    est = jive_estimate(weights, y, x)
    _, _, _, s_xx = raw_moments(weights, y, x)
    v = ek_plugin_variance(weights, y, x, est.beta)
    if v <= 0.0 or s_xx == 0.0:
        return None, est.beta, None
    se = math.sqrt(v) / abs(s_xx)
    return (est.beta - float(beta0)) / se, est.beta, se


# ---------------------------------------------------------------------------
# oracle variances for simulation designs


def population_lm_variance(weights: WeightScheme, r: np.ndarray, r_delta: np.ndarray,
                           nu2: np.ndarray, eta2: np.ndarray, nueta: np.ndarray) -> float:
    """Population variance of S_LM given mean vectors and per-row moments.

    r and r_delta are the conditional means of X and of e(beta0); nu2,
    eta2, nueta are per-row second moments of the mean-zero parts of
    e(beta0) and X.
    """
    g_row_r = leave_out_predictor(weights, r)
    if weights.blocks is None:
        g = weights.g
        g_col_rd = g.T @ r_delta - np.diag(g) * r_delta
    else:
        g_col_rd = np.empty_like(r_delta)
        for bi, idx in enumerate(weights.blocks.indices):
            gb = weights.g_block(bi)
            vb = r_delta[idx]
            g_col_rd[idx] = gb.T @ vb - np.diag(gb) * vb
    term1 = float(np.sum(nu2 * g_row_r ** 2))
    term2 = _squared_weight_bilinear(weights, nu2, eta2)
    term3 = _hadamard_pair_bilinear(weights, nueta, nueta)
    term4 = 2.0 * float(np.sum(nueta * g_row_r * g_col_rd))
    term5 = float(np.sum(eta2 * g_col_rd ** 2))
    return term1 + term2 + term3 + term4 + term5


def population_ar_variance(weights: WeightScheme, r_delta: np.ndarray, nu2: np.ndarray) -> float:
    """Population variance of S_AR given the mean vector and row variances of e."""
    g_row = leave_out_predictor(weights, r_delta)
    if weights.blocks is None:
        g = weights.g
        g_col = g.T @ r_delta - np.diag(g) * r_delta
    else:
        g_col = np.empty_like(r_delta)
        for bi, idx in enumerate(weights.blocks.indices):
            gb = weights.g_block(bi)
            vb = r_delta[idx]
            g_col[idx] = gb.T @ vb - np.diag(gb) * vb
    lin = float(np.sum(nu2 * (g_row + g_col) ** 2))
    if weights.blocks is None:
        gs = weights.g + weights.g.T
        np.fill_diagonal(gs, 0.0)
        quad = 0.5 * float(nu2 @ (gs * gs) @ nu2)
    else:
        quad = 0.0
        for bi, idx in enumerate(weights.blocks.indices):
            gb = weights.g_block(bi)
            gs = gb + gb.T
            np.fill_diagonal(gs, 0.0)
            vb = nu2[idx]
            quad += 0.5 * float(vb @ (gs * gs) @ vb)
    return lin + quad


def oracle_variances(design, beta0: float | None = None, n_draws: int = 1_000_000,
                     seed: int = 0, batch: int = 4096) -> OracleMoments:
    """Monte Carlo oracle variances of S_LM and S_AR at a simulation design.

    Holds the instrument assignment fixed at the design's layout and
    simulates the error draws n_draws times, recording the two statistics
    at beta0 (defaulting to the design's data-generating coefficient).
    The reported MC standard errors are for the variance estimates
    themselves. Where the design family admits closed-form moments, the
    analytic values are attached for cross-checking.
    """
    from .simulate import design_weights, draw_batch, analytic_oracle

    if beta0 is None:
        beta0 = design.beta
    weights = design_weights(design)
    # Keyed far away from the per-replication streams (seed, rep).
    rng = np.random.default_rng(np.random.Philox(key=[seed, 1 << 48]))
    s_lm = np.empty(n_draws)
    s_ar = np.empty(n_draws)
    done = 0
    while done < n_draws:
        b = min(batch, n_draws - done)
        yb, xb = draw_batch(design, rng, b)
        eb = yb - float(beta0) * xb
        s_lm[done:done + b] = _batch_offdiag(weights, eb, xb)
        s_ar[done:done + b] = _batch_offdiag(weights, eb, eb)
        done += b
    v_lm, se_lm = _variance_with_se(s_lm)
    v_ar, se_ar = _variance_with_se(s_ar)
    ana = analytic_oracle(design, float(beta0))
    return OracleMoments(
        v_lm=v_lm, v_ar=v_ar, mc_se_lm=se_lm, mc_se_ar=se_ar, n_draws=n_draws,
        v_lm_analytic=None if ana is None else ana[0],
        v_ar_analytic=None if ana is None else ana[1],
    )


def _batch_offdiag(weights: WeightScheme, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise sum_{i != j} G_ij a_i b_j for batches a, b of shape (B, n)."""
    if weights.blocks is None:
        g = weights.g
        vals = np.einsum("bi,ij,bj->b", a, g, b)
        vals -= np.sum(a * b * np.diag(g)[None, :], axis=1)
        return vals
    out = np.zeros(a.shape[0])
    for bi, idx in enumerate(weights.blocks.indices):
        gb = weights.g_block(bi)
        ab = a[:, idx]
        bb = b[:, idx]
        out += np.einsum("bi,ij,bj->b", ab, gb, bb)
        out -= np.sum(ab * bb * np.diag(gb)[None, :], axis=1)
    return out


def _variance_with_se(samples: np.ndarray) -> tuple:
    n = samples.shape[0]
    mean = float(np.mean(samples))
    centered = samples - mean
    m2 = float(np.mean(centered ** 2))
    m4 = float(np.mean(centered ** 4))
    var = m2 * n / (n - 1)
    se = math.sqrt(max(m4 - m2 * m2, 0.0) / n)
    return var, se
