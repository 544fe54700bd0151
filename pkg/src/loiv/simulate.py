"""Structural simulation designs and the Monte Carlo harness.

Three data-generating families, each indexed by the strength targets
(e_tfs, e_tar) that pin the population means of the normalized first-stage
and AR quadratic forms:

* ``binary_judge``: one binary decision per case, K+1 decision makers with
  compliance rates lambda_k = (1 + pi_k) / 2; the regressor is the signed
  indicator 2 X - 1, so the group means of the regressor are the pi_k
  themselves. First-stage slopes pi_k take values {0, +-s, +-s/2} and the
  direct-effect means pi_dk take {0, +-h}, arranged so the cross sums
  vanish. The mapping s^2 = 8 e_tfs / (5 sqrt(K) (c-1)) makes the
  first-stage target exact; h^2 = e_tar / (sqrt(K) (c-1)) does the same
  for the heterogeneity target. Outcomes are Y = pi_Yk + zeta with
  zeta | v ~ N(sigma_ev (v - 1/2), sigma_ee) and v the latent uniform that
  also drives the decision, so zeta is mean zero and correlated with
  treatment.
* ``continuous_x``: X = pi_k + v and Y = X (beta + xi) + eps with
  (eps, xi, v) jointly normal per group; the group-specific covariance
  sigma_xiv in {0, +-h} generates heterogeneous effects correlated with
  the first stage.
* ``binary_covariates``: K strata, each with its own intercept; a binary
  characteristic B activates the instrument only for half of each
  stratum, the instrument label collapses to a single value whenever
  B = 0, and the outcome carries stratum fixed effects gamma_t. Errors
  follow a two-point effect mixture tilted by the sign of the latent
  uniform. This family exercises the covariate-robust weighting path.

Randomness is counter-based: replication r of a design with seed s reads
an independent Philox stream keyed by (s, r), so any worker layout
produces identical draws. The harness evaluates every requested procedure
on each replication, records reject / accept / no-decision per procedure,
and merges chunk tallies in a fixed order.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from ._normal import chi2_1_critical
from .alt_variance import (
    _ms_kernel,
    cms_plugin_variance,
    constructed_ar_test,
    constructed_t_test,
    ek_plugin_test,
    mo_quadratic,
    population_ar_variance,
    population_lm_variance,
)
from .design import Dataset, WeightScheme, build_weights
from .errors import DegenerateFirstStage, InvalidDesign, LoivError
from .l3o_variance import l3o_quadratic
from .results import McCell, McResult
from .statistics import raw_moments

FAMILIES = ("binary_judge", "continuous_x", "binary_covariates")

_DEFAULT_ERRORS = {
    "binary_judge": {"sigma_ev": 0.3, "sigma_ee": 0.1},
    "continuous_x": {
        "sigma_ee": 1.0,
        "sigma_vv": 1.0,
        "sigma_exi": 0.0,
        "sigma_ev": 0.8,
        "sigma_xixi": None,  # defaults to 1 + h once h is known
    },
    "binary_covariates": {"p": 0.875, "sigma_ee": 0.5, "sigma_ev": 0.1, "g": 0.1},
}

PROCEDURES = ("l3o", "lmorc", "arorc", "tsls", "ek", "ms", "cms", "mo", "xt_t", "xt_ar")

DISPLAY_NAMES = {
    "l3o": "L3O", "lmorc": "LMorc", "arorc": "ARorc", "tsls": "TSLS",
    "ek": "EK", "ms": "MS", "cms": "CMS", "mo": "MO",
    "xt_t": "Xt-t", "xt_ar": "Xt-AR",
}

_ALIASES = {
    "l3o": "l3o", "lm_l3o": "l3o", "lm-l3o": "l3o",
    "lmorc": "lmorc", "lm_oracle": "lmorc", "lm-oracle": "lmorc",
    "arorc": "arorc", "ar_oracle": "arorc", "ar-oracle": "arorc",
    "tsls": "tsls", "2sls": "tsls",
    "ek": "ek",
    "ms": "ms", "ar_ms": "ms",
    "cms": "cms", "ar_cms": "cms",
    "mo": "mo", "lm_mo": "mo",
    "xt_t": "xt_t", "xt-t": "xt_t", "xtt": "xt_t",
    "xt_ar": "xt_ar", "xt-ar": "xt_ar", "xtar": "xt_ar",
}

# Replication codes inside a chunk.
_REJECT, _ACCEPT, _UNDEFINED, _FAILED = 1, 0, -1, -2

# Fixed chunk length: the rep -> chunk assignment never depends on the
# worker count, so merged floating-point tallies are bit-stable.
_CHUNK = 64


def normalize_procedures(names) -> tuple:
    """Map user-facing procedure names (any case, aliases) to canonical ids."""
    if isinstance(names, str):
        names = names.split(",")
    out = []
    for raw in names:
        key = str(raw).strip().lower()
        if key not in _ALIASES:
            raise LoivError(
                f"unknown procedure '{raw}'; choose from {', '.join(PROCEDURES)}"
            )
        canon = _ALIASES[key]
        if canon not in out:
            out.append(canon)
    if not out:
        raise LoivError("no procedures requested")
    return tuple(out)


@dataclass(frozen=True)
class SimDesign:
    """A fully derived simulation design.

    s and h are the per-group scale parameters implied by the strength
    targets; error_params holds the family-specific noise settings.
    """

    family: str
    k: int
    c: int
    beta: float
    e_tfs: float
    e_tar: float
    s: float
    h: float
    error_params: dict
    seed: int
    label: str = ""

    @property
    def n(self) -> int:
        if self.family == "binary_covariates":
            return 2 * self.c * self.k
        return (self.k + 1) * self.c


def make_design(family: str, k: int, c: int, e_tfs: float = 0.0, e_tar: float = 0.0,
                beta: float = 0.0, error_params: dict | None = None, seed: int = 0,
                label: str = "") -> SimDesign:
    """Validate parameters, derive (s, h), and freeze a design.

    Raises ``InvalidDesign`` with the failed requirement when the targets
    are infeasible for the family (for example a compliance rate pushed
    outside (0, 1), or a non-PSD error covariance).
    """
    fam = str(family).strip().lower()
    if fam not in FAMILIES:
        raise InvalidDesign(f"unknown family '{family}'; choose from {FAMILIES}")
    k = int(k)
    c = int(c)
    if k < 4 or k % 4 != 0:
        raise InvalidDesign("K must be a positive multiple of 4 so the sign groups balance")
    if c < 2:
        raise InvalidDesign("need at least 2 cases per group")
    e_tfs = float(e_tfs)
    e_tar = float(e_tar)
    if e_tfs < 0.0 or e_tar < 0.0:
        raise InvalidDesign("strength targets e_tfs and e_tar must be nonnegative")
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise InvalidDesign("seed must be an unsigned 64-bit integer")

    params = dict(_DEFAULT_ERRORS[fam])
    if error_params:
        unknown = sorted(set(error_params) - set(params))
        if unknown:
            raise InvalidDesign(f"unknown error parameters for {fam}: {unknown}")
        for key, value in error_params.items():
            params[key] = float(value)

    denom = math.sqrt(k) * (c - 1)
    if fam == "binary_judge":
        s = math.sqrt(8.0 * e_tfs / (5.0 * denom))
        h = math.sqrt(e_tar / denom)
        if s >= 1.0:
            raise InvalidDesign(
                f"e_tfs={e_tfs:g} needs first-stage scale s={s:.4f} >= 1, which puts a "
                "compliance rate outside (0, 1); lower e_tfs or raise K or c"
            )
        if params["sigma_ee"] <= 0.0:
            raise InvalidDesign("sigma_ee must be positive")
    elif fam == "continuous_x":
        s = math.sqrt(e_tfs / denom)
        h = math.sqrt(e_tar / denom)
        if params["sigma_xixi"] is None:
            params["sigma_xixi"] = 1.0 + h
        _trivariate_factors(params, h)  # raises InvalidDesign when not PSD
    else:
        s = math.sqrt(e_tfs / denom)
        h = math.sqrt(e_tar / denom)
        if not 0.0 <= params["p"] <= 1.0:
            raise InvalidDesign("mixture weight p must lie in [0, 1]")
        if s + abs(params["g"]) > 1.0 + 1e-12:
            raise InvalidDesign(
                f"s + |g| = {s + abs(params['g']):.4f} > 1 puts a treatment probability "
                "outside [0, 1]; lower e_tfs or g"
            )
        if params["sigma_ee"] < 0.0:
            raise InvalidDesign("sigma_ee must be nonnegative")

    design = SimDesign(
        family=fam, k=k, c=c, beta=float(beta), e_tfs=e_tfs, e_tar=e_tar,
        s=s, h=h, error_params=params, seed=seed,
        label=label or f"{fam} K={k} c={c} e_tfs={e_tfs:g} e_tar={e_tar:g} beta={beta:g}",
    )
    if design.n < _min_rows(fam, k):
        raise InvalidDesign("too few rows for leave-three-out inference; raise c")
    return design


def _min_rows(fam: str, k: int) -> int:
    if fam == "binary_covariates":
        # K instrument contrasts plus K stratum indicators plus slack.
        return 2 * k + 4
    return (k + 1) + 4


def _trivariate_factors(params: dict, h: float) -> list:
    """Factor the three (eps, xi, v) covariance matrices, one per sigma_xiv value."""
    see = params["sigma_ee"]
    svv = params["sigma_vv"]
    sexi = params["sigma_exi"]
    sev = params["sigma_ev"]
    sxixi = params["sigma_xixi"]
    factors = []
    for sxv in (0.0, h, -h):
        sigma = np.array([
            [see, sexi, sev],
            [sexi, sxixi, sxv],
            [sev, sxv, svv],
        ])
        evals, evecs = np.linalg.eigh(sigma)
        floor = -1e-10 * max(float(evals[-1]), 1.0)
        if evals[0] < floor:
            raise InvalidDesign(
                "error covariance for (eps, xi, v) is not positive semidefinite "
                f"(min eigenvalue {evals[0]:.3e}); adjust sigma parameters or e_tar"
            )
        factors.append(evecs * np.sqrt(np.clip(evals, 0.0, None)))
    return factors


class _Layout:
    """Per-design vectors: group parameters and the row -> group maps."""

    def __init__(self, design: SimDesign):
        k, c = design.k, design.c
        q = k // 4
        self.family = design.family
        if design.family == "binary_covariates":
            self.n = 2 * c * k
            pi = np.empty(k)
            pi[: k // 2] = -design.s
            pi[k // 2:] = design.s
            sxv = np.empty(k)
            sxv[0::2] = design.h
            sxv[1::2] = -design.h
            self.pi_state = pi
            self.sxv_state = sxv
            self.gamma_state = design.error_params["g"] * np.sign(pi)
            self.state_of_row = np.repeat(np.arange(k), 2 * c)
            self.b_flag = np.tile(np.r_[np.ones(c), np.zeros(c)], k)
            # Instrument label: stratum id while B = 1, a single shared
            # label 0 otherwise. One label is then redundant given the
            # stratum indicators, so the effective instrument count is K.
            self.z_label = ((self.state_of_row + 1) * self.b_flag).astype(np.int64)
            return
        j = k + 1
        self.n = j * c
        pi = np.zeros(j)
        pi_delta = np.zeros(j)
        if design.family == "binary_judge":
            pi[1:1 + q] = -design.s
            pi[1 + q:1 + 2 * q] = -design.s / 2.0
            pi[1 + 2 * q:1 + 3 * q] = design.s / 2.0
            pi[1 + 3 * q:] = design.s
            pi_delta[1:1 + q] = design.h
            pi_delta[1 + q:1 + 3 * q] = -design.h
            pi_delta[1 + 3 * q:] = design.h
            self.lam = (1.0 + pi) / 2.0
            self.pi_y = design.beta * pi + pi_delta
        else:
            pi[1:1 + 2 * q] = -design.s
            pi[1 + 2 * q:] = design.s
            # sigma_xiv group ids: 0 none, 1 -> +h, 2 -> -h; each sign of
            # pi splits evenly so both cross sums vanish.
            ids = np.zeros(j, dtype=np.int64)
            ids[1:1 + q] = 1
            ids[1 + q:1 + 2 * q] = 2
            ids[1 + 2 * q:1 + 3 * q] = 1
            ids[1 + 3 * q:] = 2
            self.sxv_id = ids
            self.sxv_value = np.array([0.0, design.h, -design.h])[ids]
            self.factors = _trivariate_factors(design.error_params, design.h)
        self.pi = pi
        self.pi_delta = pi_delta
        self.labels = np.repeat(np.arange(j), c)


def _draw_arrays(design: SimDesign, layout: _Layout, rng: np.random.Generator,
                 batch: int | None = None):
    """Generate (y, x), shape (n,) or (batch, n). The rng call order is fixed."""
    shape = (layout.n,) if batch is None else (batch, layout.n)
    p = design.error_params
    if design.family == "binary_judge":
        v = rng.random(shape)
        noise = rng.standard_normal(shape)
        lam_row = layout.lam[layout.labels]
        x = np.where(v <= lam_row, 1.0, -1.0)
        y = (layout.pi_y[layout.labels]
             + p["sigma_ev"] * (v - 0.5)
             + math.sqrt(p["sigma_ee"]) * noise)
        return y, x
    if design.family == "continuous_x":
        u = rng.standard_normal(shape + (3,))
        eps = np.empty(shape)
        xi = np.empty(shape)
        vlat = np.empty(shape)
        row_ids = layout.sxv_id[layout.labels]
        for fid in range(3):
            cols = row_ids == fid
            if not cols.any():
                continue
            vals = u[..., cols, :] @ layout.factors[fid].T
            eps[..., cols] = vals[..., 0]
            xi[..., cols] = vals[..., 1]
            vlat[..., cols] = vals[..., 2]
        x = layout.pi[layout.labels] + vlat
        y = x * (design.beta + xi) + eps
        return y, x
    v = rng.uniform(-1.0, 1.0, shape)
    noise = rng.standard_normal(shape)
    mix = rng.random(shape)
    st = layout.state_of_row
    cut = layout.b_flag * layout.pi_state[st] + layout.gamma_state[st]
    x = (v <= cut).astype(float)
    eps = p["sigma_ev"] * np.sign(v) + math.sqrt(p["sigma_ee"]) * noise
    keep = np.where(v >= 0.0, p["p"], 1.0 - p["p"])
    xi = layout.sxv_state[st] * np.where(mix <= keep, 1.0, -1.0)
    y = x * (design.beta + xi) + layout.gamma_state[st] + eps
    return y, x


def _rep_rng(design: SimDesign, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.Philox(key=[design.seed, int(rep)]))


def draw(design: SimDesign, rep: int):
    """The (y, x) arrays of replication ``rep``; bit-identical on every call."""
    if rep < 0:
        raise LoivError("replication index must be nonnegative")
    layout = _Layout(design)
    return _draw_arrays(design, layout, _rep_rng(design, rep))


def draw_batch(design: SimDesign, rng: np.random.Generator, n_batch: int):
    """A (n_batch, n) stack of draws consuming the supplied generator."""
    layout = _Layout(design)
    return _draw_arrays(design, layout, rng, batch=int(n_batch))


def draw_dataset(design: SimDesign, rep: int) -> Dataset:
    """Replication ``rep`` packaged with its instrument and covariate labels."""
    layout = _Layout(design)
    y, x = _draw_arrays(design, layout, _rep_rng(design, rep))
    if design.family == "binary_covariates":
        return Dataset(y=y, x=x, z=layout.z_label, w=layout.state_of_row)
    return Dataset(y=y, x=x, z=layout.labels)


def design_weights(design: SimDesign) -> WeightScheme:
    """The weighting matrix each family is evaluated with.

    Group designs use the jive weights on decision-maker indicators; the
    covariate family uses the covariate-robust ujive weights on the
    stratum-activated instrument.
    """
    layout = _Layout(design)
    zeros = np.zeros(layout.n)
    if design.family == "binary_covariates":
        dataset = Dataset(y=zeros, x=zeros, z=layout.z_label, w=layout.state_of_row)
        return build_weights(dataset, "ujive")
    dataset = Dataset(y=zeros, x=zeros, z=layout.labels)
    return build_weights(dataset, "jive")


def design_moments(design: SimDesign) -> dict:
    """Exact population values of the normalized strength statistics.

    Both equal their targets by construction:
    (c - 1) sum_k pi_k^2 / sqrt(K) = e_tfs, and the same sum over the
    heterogeneity scales equals e_tar.
    """
    layout = _Layout(design)
    scale = (design.c - 1) / math.sqrt(design.k)
    if design.family == "binary_judge":
        fs = float(layout.pi @ layout.pi)
        het = float(layout.pi_delta @ layout.pi_delta)
    elif design.family == "continuous_x":
        fs = float(layout.pi @ layout.pi)
        het = float(layout.sxv_value @ layout.sxv_value)
    else:
        fs = float(layout.pi_state @ layout.pi_state)
        het = float(layout.sxv_state @ layout.sxv_state)
    return {"e_tfs": scale * fs, "e_tar": scale * het}


def piecewise_effect(design: SimDesign):
    """Piecewise-constant treatment-effect function consistent with a design.

    Returns (breaks, values): the effect takes values[i] on the latent
    interval (breaks[i], breaks[i + 1]]. It integrates to pi_Yk over
    (0, lambda_k] for every group and to beta over (0, 1]. Only the
    binary_judge family admits this representation, and only when the
    compliance rates are distinct wherever the target means differ.
    """
    if design.family != "binary_judge":
        raise InvalidDesign("an effect function is only defined for the binary_judge family")
    layout = _Layout(design)
    table = {}
    for lam, target in zip(layout.lam, layout.pi_y):
        lam = float(lam)
        target = float(target)
        if lam in table and abs(table[lam] - target) > 1e-12:
            raise InvalidDesign(
                "two groups share a compliance rate but need different mean outcomes; "
                "no single effect function can generate this design"
            )
        table[lam] = target
    cuts = sorted(table)
    breaks = [0.0] + cuts + [1.0]
    values = []
    prev_cut, prev_int = 0.0, 0.0
    for cut in cuts:
        values.append((table[cut] - prev_int) / (cut - prev_cut))
        prev_cut, prev_int = cut, table[cut]
    if breaks[-2] == 1.0:
        breaks.pop()
    else:
        values.append((design.beta - prev_int) / (1.0 - prev_cut))
    # Validate: the running integral must reproduce every group mean.
    for lam, target in table.items():
        total = 0.0
        for lo, hi, val in zip(breaks[:-1], breaks[1:], values):
            total += val * (min(hi, lam) - lo)
            if hi >= lam:
                break
        if abs(total - target) > 1e-9:
            raise InvalidDesign("effect function failed to reproduce a group mean")
    return np.array(breaks), np.array(values)


def analytic_oracle(design: SimDesign, beta0: float):
    """Closed-form (Var S_LM, Var S_AR) at beta0, or None when unavailable.

    Exact population moments fed through the variance decompositions; the
    mixture mechanics of the covariate family are left to the Monte Carlo
    oracle.
    """
    if design.family == "binary_covariates":
        return None
    layout = _Layout(design)
    p = design.error_params
    beta0 = float(beta0)
    labels = layout.labels
    pi = layout.pi[labels]
    if design.family == "binary_judge":
        pi_y = layout.pi_y[labels]
        r = pi
        r_delta = pi_y - beta0 * pi
        var_eta = 1.0 - pi * pi
        var_zeta = p["sigma_ee"] + p["sigma_ev"] ** 2 / 12.0
        cov_zeta_eta = -p["sigma_ev"] * (1.0 - pi * pi) / 4.0
        nu2 = var_zeta + beta0 * beta0 * var_eta - 2.0 * beta0 * cov_zeta_eta
        eta2 = var_eta
        nueta = cov_zeta_eta - beta0 * var_eta
    else:
        sxv = layout.sxv_value[labels]
        d = design.beta - beta0
        see = p["sigma_ee"]
        svv = p["sigma_vv"]
        sexi = p["sigma_exi"]
        sev = p["sigma_ev"]
        sxx = p["sigma_xixi"]
        r = pi
        r_delta = d * pi + sxv
        eta2 = np.full(layout.n, svv)
        nu2 = (d * d * svv + pi * pi * sxx + svv * sxx + sxv * sxv + see
               + 2.0 * d * (pi * sxv + sev) + 2.0 * pi * sexi)
        nueta = d * svv + pi * sxv + sev
    weights = design_weights(design)
    v_lm = population_lm_variance(weights, r, r_delta, nu2, eta2, nueta)
    v_ar = population_ar_variance(weights, r_delta, nu2)
    return v_lm, v_ar


# ---------------------------------------------------------------------------
# per-replication evaluation


class _RepEvaluator:
    """Everything reusable across the replications of one chunk."""

    def __init__(self, design: SimDesign, procs, beta0: float, alpha: float,
                 conservative: bool, oracle_pair):
        self.design = design
        self.layout = _Layout(design)
        self.weights = design_weights(design)
        self.procs = procs
        self.beta0 = float(beta0)
        self.q = chi2_1_critical(alpha)
        self.z = math.sqrt(self.q)
        self.conservative = conservative
        self.oracle_pair = oracle_pair
        self.ms_kernel = _ms_kernel(self.weights) if "ms" in procs else None
        if self.ms_kernel is not None:
            self.m_blocks = [self.weights.m_block(b)
                             for b in range(self.weights.blocks.n_blocks)]
        if design.family == "binary_covariates":
            st = self.layout.state_of_row
            self.q_labels = 2 * st + self.layout.b_flag.astype(np.int64)
            self.w_labels = st
        else:
            self.q_labels = self.layout.labels
            self.w_labels = None
        self.q_counts = np.bincount(self.q_labels).astype(float)
        if self.w_labels is not None:
            self.w_counts = np.bincount(self.w_labels).astype(float)

    def _chi_code(self, s: float, v: float) -> int:
        if v is None or not math.isfinite(v) or v <= 0.0:
            return _UNDEFINED
        return _REJECT if s * s >= self.q * v else _ACCEPT

    def _t_code(self, t) -> int:
        if t is None or not math.isfinite(t):
            return _UNDEFINED
        return _REJECT if abs(t) >= self.z else _ACCEPT

    def _annihilate(self, e: np.ndarray) -> np.ndarray:
        out = np.empty_like(e)
        for mb, idx in zip(self.m_blocks, self.weights.blocks.indices):
            out[idx] = mb @ e[idx]
        return out

    def _tsls_code(self, y: np.ndarray, x: np.ndarray) -> int:
        mean_q_x = np.bincount(self.q_labels, weights=x) / self.q_counts
        if self.w_labels is None:
            xhat = mean_q_x[self.q_labels]
            y_til, x_til = y, x
        else:
            mean_w_x = np.bincount(self.w_labels, weights=x) / self.w_counts
            mean_w_y = np.bincount(self.w_labels, weights=y) / self.w_counts
            xhat = mean_q_x[self.q_labels] - mean_w_x[self.w_labels]
            x_til = x - mean_w_x[self.w_labels]
            y_til = y - mean_w_y[self.w_labels]
        denom = float(x_til @ xhat)
        if denom == 0.0:
            return _UNDEFINED
        beta_hat = float(xhat @ y_til) / denom
        resid = y_til - beta_hat * x_til
        meat = float(np.sum((xhat * resid) ** 2))
        if meat <= 0.0:
            return _UNDEFINED
        return self._t_code((beta_hat - self.beta0) * abs(denom) / math.sqrt(meat))

    def evaluate(self, y: np.ndarray, x: np.ndarray, out: np.ndarray) -> tuple:
        """Fill one code per procedure into out; return (t_fs, t_ar_at_beta)."""
        w = self.weights
        b0 = self.beta0
        s_yy, s_yx, s_xy, s_xx = raw_moments(w, y, x)
        s_lm = s_yx - b0 * s_xx
        s_ar = s_yy - b0 * (s_yx + s_xy) + b0 * b0 * s_xx
        beta = self.design.beta
        scale = 1.0 / math.sqrt(self.design.k)
        t_fs = s_xx * scale
        t_ar_beta = (s_yy - beta * (s_yx + s_xy) + beta * beta * s_xx) * scale
        e = None
        for pos, proc in enumerate(self.procs):
            try:
                if proc == "l3o":
                    quad = l3o_quadratic(w, y, x, conservative=self.conservative)
                    out[pos] = self._chi_code(s_lm, quad.value(b0))
                elif proc == "lmorc":
                    out[pos] = self._chi_code(s_lm, self.oracle_pair[0])
                elif proc == "arorc":
                    out[pos] = self._chi_code(s_ar, self.oracle_pair[1])
                elif proc == "mo":
                    out[pos] = self._chi_code(s_lm, mo_quadratic(w, y, x).value(b0))
                elif proc == "ms":
                    if e is None:
                        e = y - b0 * x
                    prod = e * self._annihilate(e)
                    out[pos] = self._chi_code(s_ar, 2.0 * self.ms_kernel(prod, prod))
                elif proc == "cms":
                    out[pos] = self._chi_code(s_ar, cms_plugin_variance(w, y, x, b0))
                elif proc == "ek":
                    t, _, _ = ek_plugin_test(w, y, x, b0)
                    out[pos] = self._t_code(t)
                elif proc == "xt_t":
                    t, _, _ = constructed_t_test(w, y, x, b0)
                    out[pos] = self._t_code(t)
                elif proc == "xt_ar":
                    out[pos] = self._t_code(constructed_ar_test(w, y, x, b0))
                elif proc == "tsls":
                    out[pos] = self._tsls_code(y, x)
            except (LoivError, np.linalg.LinAlgError):
                out[pos] = _FAILED
        return t_fs, t_ar_beta


def _chunk_worker(design: SimDesign, procs, rep_lo: int, rep_hi: int, beta0: float,
                  alpha: float, conservative: bool, oracle_pair):
    evaluator = _RepEvaluator(design, procs, beta0, alpha, conservative, oracle_pair)
    codes = np.full((len(procs), rep_hi - rep_lo), _FAILED, dtype=np.int8)
    sum_tfs = 0.0
    sum_tar = 0.0
    n_drawn = 0
    for col, rep in enumerate(range(rep_lo, rep_hi)):
        try:
            y, x = _draw_arrays(design, evaluator.layout, _rep_rng(design, rep))
        except (LoivError, np.linalg.LinAlgError):
            continue
        t_fs, t_ar = evaluator.evaluate(y, x, codes[:, col])
        sum_tfs += t_fs
        sum_tar += t_ar
        n_drawn += 1
    return codes, sum_tfs, sum_tar, n_drawn


def run_monte_carlo(design: SimDesign, procedures=("l3o",), n_reps: int = 1000,
                    alpha: float = 0.05, beta0: float | None = None,
                    n_jobs: int | None = None, conservative: bool = False,
                    oracle=None, oracle_draws: int = 1_000_000) -> McResult:
    """Rejection-rate tallies over deterministic replications.

    beta0 defaults to the design's data coefficient (size); pass a
    different value for power. Oracle procedures use the closed-form
    variances when the family has them, otherwise a Monte Carlo oracle of
    ``oracle_draws`` draws; a precomputed (v_lm, v_ar) pair can be passed
    via ``oracle``. Per-replication errors are counted as undefined for
    the affected procedure, never aborting the run. Results are identical
    for any worker count.
    """
    n_reps = int(n_reps)
    if n_reps < 1:
        raise LoivError("n_reps must be at least 1")
    if not 0.0 < alpha < 1.0:
        raise LoivError("alpha must lie in (0, 1)")
    procs = normalize_procedures(procedures)
    b0 = design.beta if beta0 is None else float(beta0)
    pair = oracle
    if pair is None and ("lmorc" in procs or "arorc" in procs):
        pair = analytic_oracle(design, b0)
        if pair is None:
            from .alt_variance import oracle_variances

            moments = oracle_variances(design, b0, n_draws=oracle_draws, seed=design.seed)
            pair = (moments.v_lm, moments.v_ar)

    start = time.perf_counter()
    bounds = [(lo, min(lo + _CHUNK, n_reps)) for lo in range(0, n_reps, _CHUNK)]
    if n_jobs is None:
        n_jobs = os.cpu_count() or 1
    n_jobs = max(1, min(int(n_jobs), len(bounds)))
    if n_jobs == 1:
        parts = [_chunk_worker(design, procs, lo, hi, b0, alpha, conservative, pair)
                 for lo, hi in bounds]
    else:
        from joblib import Parallel, delayed

        parts = Parallel(n_jobs=n_jobs)(
            delayed(_chunk_worker)(design, procs, lo, hi, b0, alpha, conservative, pair)
            for lo, hi in bounds
        )
    codes = np.concatenate([part[0] for part in parts], axis=1)
    sum_tfs = math.fsum(part[1] for part in parts)
    sum_tar = math.fsum(part[2] for part in parts)
    n_drawn = sum(part[3] for part in parts)
    wall = time.perf_counter() - start

    cells = {}
    for pos, proc in enumerate(procs):
        row = codes[pos]
        cells[proc] = McCell(
            procedure=proc,
            n_reps=n_reps,
            n_valid=int(np.sum(row >= 0)),
            n_reject=int(np.sum(row == _REJECT)),
            n_undefined=int(np.sum(row < 0)),
        )
    params = {
        "family": design.family, "K": design.k, "c": design.c, "beta": design.beta,
        "e_tfs": design.e_tfs, "e_tar": design.e_tar, "s": design.s, "h": design.h,
        "seed": design.seed,
    }
    params.update(design.error_params)
    extras = {
        "wall_time_s": wall,
        "alpha": alpha,
        "n_jobs": n_jobs,
        "mean_t_fs": sum_tfs / n_drawn if n_drawn else math.nan,
        "mean_t_ar_at_beta": sum_tar / n_drawn if n_drawn else math.nan,
        "n_drawn": n_drawn,
        "codes": codes,
    }
    if pair is not None:
        extras["oracle_v_lm"], extras["oracle_v_ar"] = float(pair[0]), float(pair[1])
    return McResult(
        design_label=design.label,
        design_params=params,
        beta0=b0,
        cells=cells,
        extras=extras,
    )


def table1_designs(seed: int = 1, k: int = 400, c: int = 5) -> list:
    """The nine null designs of the headline size table.

    Rows iterate the heterogeneity target over {2 sqrt(K), 2, 0} (outer)
    and the first-stage target over the same levels (inner). Each design
    gets its own derived seed so the streams never overlap.
    """
    levels = (2.0 * math.sqrt(k), 2.0, 0.0)
    designs = []
    index = 0
    for e_tar in levels:
        for e_tfs in levels:
            designs.append(make_design(
                "binary_judge", k, c, e_tfs=e_tfs, e_tar=e_tar, beta=0.0,
                seed=seed * 100 + index,
                label=f"e_tar={e_tar:g} e_tfs={e_tfs:g}",
            ))
            index += 1
    return designs
