"""Quadratic-form statistics and point estimators.

All statistics exclude the own-observation terms: the double sums run over
j != i regardless of whether the weighting matrix stores a diagonal.
"""

from __future__ import annotations

import math

import numpy as np

from .design import Dataset, WeightScheme, offdiag_bilinear, _dense_hat
from .errors import DegenerateFirstStage
from .results import Estimate, KStatistics


def raw_moments(weights: WeightScheme, y: np.ndarray, x: np.ndarray) -> tuple:
    """Off-diagonal moments (yy, yx, xy, xx), unnormalized.

    yx places y on the left index of G and x on the right; for an
    asymmetric G these two cross moments differ.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    s_yy = offdiag_bilinear(weights, y, y)
    s_yx = offdiag_bilinear(weights, y, x)
    s_xy = offdiag_bilinear(weights, x, y)
    s_xx = offdiag_bilinear(weights, x, x)
    return s_yy, s_yx, s_xy, s_xx


def k_statistics(weights: WeightScheme, y: np.ndarray, x: np.ndarray, beta0: float) -> KStatistics:
    """Normalized statistics at beta0, scaled by 1/sqrt(K).

    K is the instrument column count of the design that produced the
    weighting matrix. The raw moments are computed once; evaluation at a
    different beta0 is then a cheap polynomial identity via ``.at``.
    """
    s_yy, s_yx, s_xy, s_xx = raw_moments(weights, y, x)
    scale = 1.0 / math.sqrt(weights.k_eff)
    base = KStatistics(
        beta0=0.0, k=weights.k_eff,
        t_ar=s_yy * scale, t_lm=s_yx * scale, t_fs=s_xx * scale,
        t_yy=s_yy * scale, t_yx=s_yx * scale, t_xy=s_xy * scale, t_xx=s_xx * scale,
    )
    return base.at(float(beta0))


def jive_estimate(weights: WeightScheme, y: np.ndarray, x: np.ndarray) -> Estimate:
    """Ratio estimator sum_{i != j} G_ij Y_i X_j / sum_{i != j} G_ij X_i X_j.

    With jive weights this is the jackknife IV estimator; with ujive or
    sive weights it is the corresponding leave-out ratio estimator.
    """
    _, s_yx, _, s_xx = raw_moments(weights, y, x)
    if s_xx == 0.0:
        raise DegenerateFirstStage("the leave-out first-stage moment is exactly zero")
    return Estimate(beta=s_yx / s_xx, method=weights.kind)


def tsls_estimate(dataset: Dataset, robust: bool = True) -> Estimate:
    """Two-stage least squares with the full instrument set.

    Covariates, when present, are partialled out of y, x, and Z first.
    The standard error is the usual heteroskedasticity-robust sandwich for
    the just-identified representation in the projected regressor.
    """
    y = dataset.y
    x = dataset.x
    z = dataset.z_matrix
    if dataset.w_matrix is not None:
        basis_w, _ = _dense_hat(dataset.w_matrix)
        y = y - basis_w @ (basis_w.T @ y)
        x = x - basis_w @ (basis_w.T @ x)
        z = z - basis_w @ (basis_w.T @ z)
    basis_z, _ = _dense_hat(z)
    xhat = basis_z @ (basis_z.T @ x)
    denom = float(x @ xhat)
    if denom == 0.0:
        raise DegenerateFirstStage("projected regressor is orthogonal to the regressor")
    beta = float(xhat @ y) / denom
    if not robust:
        return Estimate(beta=beta, method="tsls")
    resid = y - beta * x
    meat = float(np.sum((xhat * resid) ** 2))
    se = math.sqrt(meat) / abs(denom)
    return Estimate(beta=beta, se=se, method="tsls")
