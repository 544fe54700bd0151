"""Result containers shared across the estimation, testing, and simulation layers."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np


@dataclass(frozen=True)
class KStatistics:
    """Normalized quadratic-form statistics at a hypothesized coefficient.

    t_ar, t_lm, t_fs are the 1/sqrt(K)-scaled off-diagonal double sums of
    e_i e_j, e_i X_j, and X_i X_j with e = Y - X * beta0. The raw moments
    (t_yy, t_yx, t_xy, t_xx) do not depend on beta0 and reproduce the
    statistics at any other beta0 through the translation identities.
    """

    beta0: float
    k: int
    t_ar: float
    t_lm: float
    t_fs: float
    t_yy: float
    t_yx: float
    t_xy: float
    t_xx: float

    def at(self, beta0: float) -> "KStatistics":
        """Re-evaluate at another hypothesized value without touching the data."""
        b = float(beta0)
        return KStatistics(
            beta0=b,
            k=self.k,
            t_ar=self.t_yy - b * (self.t_yx + self.t_xy) + b * b * self.t_xx,
            t_lm=self.t_yx - b * self.t_xx,
            t_fs=self.t_xx,
            t_yy=self.t_yy,
            t_yx=self.t_yx,
            t_xy=self.t_xy,
            t_xx=self.t_xx,
        )


@dataclass(frozen=True)
class Estimate:
    """A point estimate with an optional standard error."""

    beta: float
    se: float | None = None
    method: str = ""


@dataclass(frozen=True)
class QuadraticVariance:
    """A variance estimate that is an exact quadratic in the tested coefficient.

    value(beta0) = b0 + b1 * beta0 + b2 * beta0**2. The coefficients carry
    whatever normalization the producing routine documents.
    """

    b0: float
    b1: float
    b2: float
    conservative_applied: bool = False
    dropped_triples: int = 0

    def value(self, beta0: float) -> float:
        return self.b0 + beta0 * (self.b1 + beta0 * self.b2)


@dataclass(frozen=True)
class TestReport:
    """Outcome of a single hypothesis test.

    status is 'ok' when the variance estimate was positive and a decision
    was made, 'negative_variance' when the variance estimate was not
    positive (no rejection decision is reported), or 'undefined' when the
    statistic itself could not be formed.
    """

    procedure: str
    beta0: float
    statistic: float | None
    variance: float | None
    critical_value: float
    alpha: float
    status: str
    reject: bool | None
    p_value: float | None = None
    detail: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ConfidenceSet:
    """A level-(1 - alpha) confidence set for the structural coefficient.

    shape is one of 'interval', 'two_rays', 'whole_line', 'empty'. For an
    interval, lower and upper hold the endpoints. For two rays, the set is
    (-inf, lower] union [upper, inf) with lower < upper.
    """

    shape: str
    alpha: float
    lower: float | None = None
    upper: float | None = None
    leading_coeff: float | None = None
    discriminant: float | None = None
    estimate: float | None = None
    detail: dict = field(default_factory=dict)

    def contains(self, beta0: float) -> bool:
        if self.shape == "whole_line":
            return True
        if self.shape == "empty":
            return False
        if self.shape == "interval":
            return self.lower <= beta0 <= self.upper
        return beta0 <= self.lower or beta0 >= self.upper

    @property
    def length(self) -> float:
        if self.shape == "interval":
            return self.upper - self.lower
        if self.shape == "empty":
            return 0.0
        return math.inf


@dataclass(frozen=True)
class FeasibilityReport:
    """Whether the leave-three-out variance is computable on a dataset."""

    feasible: bool
    n_singular_triples: int
    first_offender: tuple | None
    note: str = ""


@dataclass(frozen=True)
class OracleMoments:
    """Simulated (and, where available, analytic) oracle variances at a design."""

    v_lm: float
    v_ar: float
    mc_se_lm: float
    mc_se_ar: float
    n_draws: int
    v_lm_analytic: float | None = None
    v_ar_analytic: float | None = None


@dataclass(frozen=True)
class McCell:
    """Rejection tally for one procedure in one Monte Carlo design."""

    procedure: str
    n_reps: int
    n_valid: int
    n_reject: int
    n_undefined: int

    @property
    def rejection_rate(self) -> float:
        if self.n_valid == 0:
            return math.nan
        return self.n_reject / self.n_valid


@dataclass
class McResult:
    """All tallies from one Monte Carlo run, plus design identification."""

    design_label: str
    design_params: dict
    beta0: float
    cells: dict  # procedure name -> McCell
    extras: dict = field(default_factory=dict)

    def rate(self, procedure: str) -> float:
        return self.cells[procedure].rejection_rate
