"""Leave-three-out variance estimation for the quadratic-form LM statistic.

Two independent routes compute the same estimate:

* ``l3o_variance_naive`` follows the published five-term formula literally,
  refitting the auxiliary regression on the reduced sample for every
  leave-out set. It is the reference implementation and is only meant for
  small n.
* ``l3o_quadratic`` / ``l3o_variance`` evaluate the same sums through
  closed-form leave-out residual algebra on the annihilator matrix M,
  block by block when the design has group structure. The result is exact
  up to floating point and returns the variance as a quadratic in the
  hypothesized coefficient, so confidence-set inversion never re-runs the
  engine.

The five terms, with their signs and the factor two on the second term
built in, are

    V = A1 + A2 + A3 + A4 + A5
    A1 =   sum_i sum_{j!=i} sum_{k!=i} G_ij X_j G_ik X_k * e_i * t_i
    A2 = 2 sum_i sum_{j!=i} sum_{k!=i} G_ij X_j G_ki e_k * e_i * s_i
    A3 =   sum_i sum_{j!=i} sum_{k!=i} G_ji e_j G_ki e_k * X_i * s_i
    A4 = - sum_i sum_{j!=i} sum_{k!=j} G_ji^2 X_i Mc_ik X_k * e_j * t_j
    A5 = - sum_i sum_{j!=i} sum_{k!=j} G_ij G_ji e_i Mc_ik X_k * e_j * s_j

where t_r and s_r are the residuals at row r of e and X after projecting
out the design on the sample with rows {i, j, k} removed (set semantics:
repeated indices collapse, so j = k or k = i reduce to leave-two-out), and
Mc_ik is the leave-{i,j}-out cross weight (M_jj M_ik - M_ij M_jk) / D_ij
with D_ij = M_ii M_jj - M_ij^2. Every denominator is a principal minor
of M; a near-zero minor makes the estimate undefined, which raises
``NearSingularTriple`` unless conservative mode drops the offending terms.
"""

from __future__ import annotations

import math

import numpy as np

from .design import WeightScheme
from .errors import NearSingularTriple, TripleSingular
from .results import FeasibilityReport, QuadraticVariance

SINGULAR_RTOL = 1e-10

_NAIVE_MAX_N = 80


# ---------------------------------------------------------------------------
# fast route


def _first_true_index(flag: np.ndarray):
    flat = np.flatnonzero(flag.ravel())
    if flat.size == 0:
        return None
    return np.unravel_index(flat[0], flag.shape)


class _GuardState:
    """Collects near-singular leave-out sets during a pass."""

    def __init__(self, conservative: bool, block_indices):
        self.conservative = conservative
        self.block_indices = block_indices  # list of global index arrays
        self.dropped = 0
        self.first_offender = None

    def record_pair(self, bad: np.ndarray, i_local: int, d_vals: np.ndarray, offsets):
        if not bad.any():
            return
        if self.first_offender is None:
            b, j = _first_true_index(bad)
            gi = self.block_indices[offsets[b]]
            trip = (int(gi[i_local]), int(gi[j]), int(gi[j]))
            self._note(trip, float(d_vals[b, j]))
        self.dropped += int(bad.sum())

    def record_triple(self, bad: np.ndarray, i_local: int, d_vals: np.ndarray, offsets):
        if not bad.any():
            return
        if self.first_offender is None:
            b, j, k = _first_true_index(bad)
            gi = self.block_indices[offsets[b]]
            trip = (int(gi[i_local]), int(gi[j]), int(gi[k]))
            self._note(trip, float(d_vals[b, j, k]))
        self.dropped += int(bad.sum())

    def _note(self, triple, d_value: float):
        self.first_offender = triple
        if not self.conservative:
            raise NearSingularTriple(*triple, d_triple=d_value, threshold=SINGULAR_RTOL)


def _quad_pass(g0: np.ndarray, m: np.ndarray, xv: np.ndarray, yv: np.ndarray,
               guard: _GuardState, offsets) -> np.ndarray:
    """Per-block quadratic coefficients of the five-term sum.

    g0, m: (B, c, c) with the diagonal of g0 already zeroed; xv, yv: (B, c).
    Returns (B, 3) with columns (b0, b1, b2) so that the block's
    contribution at beta0 is b0 + b1 beta0 + b2 beta0^2, where the
    polynomial identity comes from e = y - beta0 x entering every term
    bilinearly.
    """
    B, c, _ = m.shape
    dm = np.einsum("bii->bi", m).copy()
    dpout = dm[:, :, None] * dm[:, None, :]
    d_pair = dpout - m * m
    mx = np.einsum("bjk,bk->bj", m, xv)
    my = np.einsum("bjk,bk->bj", m, yv)

    thr3_base = SINGULAR_RTOL * dpout
    thr_row_base = SINGULAR_RTOL * dm

    coef = np.zeros((B, 3))
    not_eye = ~np.eye(c, dtype=bool)

    for i in range(c):
        a = m[:, i, :]
        a2 = a * a
        dmi = dm[:, i]
        d_row = d_pair[:, i, :]

        # D3[b, j, k] = det of the {i, j, k} principal minor of M.
        aa = a[:, :, None] * a[:, None, :]
        d3 = m * aa
        d3 *= 2.0
        d3 += dmi[:, None, None] * d_pair
        d3 -= dm[:, :, None] * a2[:, None, :]
        d3 -= a2[:, :, None] * dm[:, None, :]

        mask = not_eye.copy()
        mask[i, :] = False
        mask[:, i] = False

        row_valid = np.ones(c, dtype=bool)
        row_valid[i] = False

        bad_pair = row_valid[None, :] & (np.abs(d_row) <= dmi[:, None] * thr_row_base)
        guard.record_pair(bad_pair, i, d_row, offsets)
        bad_trip = mask[None, :, :] & (np.abs(d3) <= dmi[:, None, None] * thr3_base)
        guard.record_triple(bad_trip, i, d3, offsets)

        ok_row = row_valid[None, :] & ~bad_pair
        ok3 = mask[None, :, :] & ~bad_trip

        # Reciprocal minors carry the masking: zero wherever a leave-out
        # set is unusable, so every table below is a plain product.
        r3 = ok3 / np.where(ok3, d3, 1.0)
        rrow = ok_row / np.where(ok_row, d_row, 1.0)

        def resid_at_i(mv):
            # Triple-leave-out residual at row i of the vector behind mv,
            # as a (j, k) table, plus the j = k pair column.
            u = a * mv
            t = mv[:, :, None] * a[:, None, :]
            t += a[:, :, None] * mv[:, None, :]
            t *= m
            t += mv[:, i, None, None] * d_pair
            t -= u[:, :, None] * dm[:, None, :]
            t -= dm[:, :, None] * u[:, None, :]
            t *= r3
            pair = (dm * mv[:, i, None] - u) * rrow
            return t, pair

        t_y, ry_i = resid_at_i(my)
        t_x, rx_i = resid_at_i(mx)

        gx = g0[:, i, :] * xv
        ge_y = g0[:, :, i] * yv
        ge_x = g0[:, :, i] * xv
        yi = yv[:, i]
        xi = xv[:, i]

        c1_y = (np.sum(gx * (t_y @ gx[:, :, None])[:, :, 0], axis=1)
                + np.sum(gx * gx * ry_i, axis=1))

        # The six bilinears against t_x share the same middle table, so one
        # stacked product covers them, with the pair column entering as a
        # diagonal correction.
        p3 = np.stack([gx, ge_y, ge_x], axis=2)
        p3t = p3.transpose(0, 2, 1)
        s_full = np.matmul(p3t, np.matmul(t_x, p3))
        s_full += np.matmul(p3t, p3 * rx_i[:, :, None])
        c1_x = s_full[:, 0, 0]
        q2_y = s_full[:, 0, 1]
        q2_x = s_full[:, 0, 2]
        m3_yy = s_full[:, 1, 1]
        m3_yx = s_full[:, 1, 2]
        m3_xx = s_full[:, 2, 2]

        # Leave-{i,j}-out cross weights times the triple reciprocal. The
        # j-residual numerator for the set {i, j, k} is linear in the data
        # vector, so its contraction against these weights splits into three
        # data-independent kernels hit by matvecs instead of a full table
        # per data vector:
        #   n_v = mv_j d_row_k + mv_i t1_jk + mv_k t2_jk.
        mcr = dm[:, :, None] * a[:, None, :]
        mcr -= a[:, :, None] * m
        mcr *= rrow[:, :, None]
        mcr *= r3

        t1 = m * a[:, None, :]
        t1 -= a[:, :, None] * dm[:, None, :]
        t2 = aa - dmi[:, None, None] * m

        w1 = (mcr @ (d_row * xv)[:, :, None])[:, :, 0]
        w2 = ((mcr * t1) @ xv[:, :, None])[:, :, 0]
        w3 = (mcr * t2) @ np.stack([my * xv, mx * xv], axis=2)

        # k = i pair columns (leave {i, j} out, residual at j).
        rp_y = (dmi[:, None] * my - a * my[:, i, None]) * rrow
        rp_x = (dmi[:, None] * mx - a * mx[:, i, None]) * rrow

        vec4_y = my * w1 + my[:, i, None] * w2 + w3[:, :, 0] + xi[:, None] * rp_y
        vec4_x = mx * w1 + mx[:, i, None] * w2 + w3[:, :, 1] + xi[:, None] * rp_x
        vec5 = vec4_x

        w4 = g0[:, :, i] ** 2
        gg = g0[:, i, :] * g0[:, :, i]

        a4_yy = -xi * np.sum(w4 * yv * vec4_y, axis=1)
        a4_yx = -xi * np.sum(w4 * yv * vec4_x, axis=1)
        a4_xy = -xi * np.sum(w4 * xv * vec4_y, axis=1)
        a4_xx = -xi * np.sum(w4 * xv * vec4_x, axis=1)

        s5_y = np.sum(gg * yv * vec5, axis=1)
        s5_x = np.sum(gg * xv * vec5, axis=1)
        a5_yy = -yi * s5_y
        a5_yx = -yi * s5_x
        a5_xy = -xi * s5_y
        a5_xx = -xi * s5_x

        t_yy = yi * c1_y + 2.0 * yi * q2_y + xi * m3_yy + a4_yy + a5_yy
        t_yx = yi * c1_x + 2.0 * yi * q2_x + xi * m3_yx + a4_yx + a5_yx
        t_xy = xi * c1_y + 2.0 * xi * q2_y + xi * m3_yx + a4_xy + a5_xy
        t_xx = xi * c1_x + 2.0 * xi * q2_x + xi * m3_xx + a4_xx + a5_xx

        coef[:, 0] += t_yy
        coef[:, 1] -= t_yx + t_xy
        coef[:, 2] += t_xx

    return coef


def _gather_blocks(weights: WeightScheme):
    """Yield (offsets, g0, m, order) groups of equal-sized blocks.

    offsets maps the position within the stacked group back to the block
    number, so guard messages can name global row indices.
    """
    if weights.blocks is None:
        n = weights.n
        g0 = weights.g.copy()
        np.fill_diagonal(g0, 0.0)
        yield [0], g0[None, :, :], weights.hat.m[None, :, :], [np.arange(n)]
        return
    sizes = weights.blocks.sizes
    for size in np.unique(sizes):
        members = np.flatnonzero(sizes == size)
        g_list = []
        m_list = []
        idx_list = []
        for b in members:
            gb = weights.g_block(int(b)).copy()
            np.fill_diagonal(gb, 0.0)
            g_list.append(gb)
            m_list.append(weights.m_block(int(b)))
            idx_list.append(weights.blocks.indices[int(b)])
        yield members.tolist(), np.stack(g_list), np.stack(m_list), idx_list


def l3o_quadratic(weights: WeightScheme, y: np.ndarray, x: np.ndarray,
                  conservative: bool = False) -> QuadraticVariance:
    """Variance estimate as a quadratic in the hypothesized coefficient.

    The returned coefficients are on the unnormalized scale: value(beta0)
    estimates the variance of the unnormalized statistic
    sum_{i != j} G_ij e_i X_j. Near-singular leave-out sets raise
    ``NearSingularTriple``; with conservative=True they are dropped from
    the sums instead and the result is flagged.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if weights.blocks is None:
        n_blocks = 1
        block_index_list = [np.arange(weights.n)]
    else:
        n_blocks = weights.blocks.n_blocks
        block_index_list = list(weights.blocks.indices)
    guard = _GuardState(conservative, block_index_list)
    per_block = [None] * n_blocks
    for offsets, g0, m, idx_list in _gather_blocks(weights):
        if weights.blocks is None:
            xb = x[None, :]
            yb = y[None, :]
        else:
            xb = np.stack([x[idx] for idx in idx_list])
            yb = np.stack([y[idx] for idx in idx_list])
        coef = _quad_pass(g0, m, xb, yb, guard, offsets)
        for pos, b in enumerate(offsets):
            per_block[b] = coef[pos]
    b0 = math.fsum(c[0] for c in per_block)
    b1 = math.fsum(c[1] for c in per_block)
    b2 = math.fsum(c[2] for c in per_block)
    return QuadraticVariance(
        b0=b0, b1=b1, b2=b2,
        conservative_applied=conservative and guard.dropped > 0,
        dropped_triples=guard.dropped,
    )


def l3o_variance(weights: WeightScheme, y: np.ndarray, x: np.ndarray, beta0: float,
                 conservative: bool = False) -> float:
    """Point evaluation of the leave-three-out variance at beta0."""
    return l3o_quadratic(weights, y, x, conservative=conservative).value(float(beta0))


def l3o_feasible(weights: WeightScheme, y: np.ndarray, x: np.ndarray) -> FeasibilityReport:
    """Check whether every leave-out set the estimator needs is invertible."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if weights.blocks is None:
        block_index_list = [np.arange(weights.n)]
    else:
        block_index_list = list(weights.blocks.indices)
    guard = _GuardState(True, block_index_list)
    for offsets, g0, m, idx_list in _gather_blocks(weights):
        if weights.blocks is None:
            xb = x[None, :]
            yb = y[None, :]
        else:
            xb = np.stack([x[idx] for idx in idx_list])
            yb = np.stack([y[idx] for idx in idx_list])
        _quad_pass(g0, m, xb, yb, guard, offsets)
    feasible = guard.dropped == 0
    note = "" if feasible else (
        "some leave-out sets are singular; rerun with conservative=True to drop them"
    )
    return FeasibilityReport(
        feasible=feasible,
        n_singular_triples=guard.dropped,
        first_offender=guard.first_offender,
        note=note,
    )


# ---------------------------------------------------------------------------
# naive reference route


def l3o_variance_naive(weights: WeightScheme, y: np.ndarray, x: np.ndarray, beta0: float,
                       q_matrix: np.ndarray | None = None) -> float:
    """Literal implementation of the five-term formula via repeated refits.

    For every leave-out set the auxiliary coefficients are recomputed on
    the reduced sample by downdating the Gram matrix, exactly as the
    definition reads. Quadratic cost in memory and worse in time; guarded
    to small n. q_matrix defaults to the design behind the weights.
    """
    n = weights.n
    if n > _NAIVE_MAX_N:
        raise ValueError(f"naive reference is limited to n <= {_NAIVE_MAX_N}, got {n}")
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    e = y - float(beta0) * x

    if q_matrix is None:
        # Reconstruct a design with the same span as the hat matrix.
        hq = weights.hat.hq
        vals, vecs = np.linalg.eigh(hq)
        q = vecs[:, vals > 0.5]
    else:
        q = np.asarray(q_matrix, dtype=float)

    g = weights.g.copy()
    np.fill_diagonal(g, 0.0)
    qtq = q.T @ q
    m = np.eye(n) - q @ np.linalg.solve(qtq, q.T)
    qt_x = q.T @ x
    qt_e = q.T @ e

    resid_cache: dict = {}

    def residuals(indices) -> tuple:
        """Leave-out residuals of x and e at every member of the set."""
        key = frozenset(indices)
        hit = resid_cache.get(key)
        if hit is not None:
            return hit
        rows = sorted(key)
        qs = q[rows]
        gram = qtq - qs.T @ qs
        rhs_x = qt_x - qs.T @ x[rows]
        rhs_e = qt_e - qs.T @ e[rows]
        try:
            tau = np.linalg.solve(gram, np.column_stack([rhs_x, rhs_e]))
        except np.linalg.LinAlgError:
            raise TripleSingular(*(rows + [rows[-1]] * (3 - len(rows)))[:3]) from None
        tau_x = tau[:, 0]
        tau_e = tau[:, 1]
        out = {r: (x[r] - q[r] @ tau_x, e[r] - q[r] @ tau_e) for r in rows}
        resid_cache[key] = out
        return out

    a1 = []
    a2 = []
    a3 = []
    a4 = []
    a5 = []
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            gij_xj = g[i, j] * x[j]
            gji_ej = g[j, i] * e[j]
            for k in range(n):
                if k == i:
                    continue
                need_a12 = gij_xj != 0.0 or g[i, k] != 0.0
                if not (need_a12 or gji_ej != 0.0 or g[k, i] != 0.0):
                    continue
                rx_i, re_i = residuals((i, j, k))[i]
                a1.append(gij_xj * g[i, k] * x[k] * e[i] * re_i)
                a2.append(2.0 * gij_xj * g[k, i] * e[k] * e[i] * rx_i)
                a3.append(gji_ej * g[k, i] * e[k] * x[i] * rx_i)
        for j in range(n):
            if j == i or g[j, i] == 0.0 and g[i, j] == 0.0:
                continue
            d_ij = m[i, i] * m[j, j] - m[i, j] ** 2
            for k in range(n):
                if k == j:
                    continue
                mc = (m[j, j] * m[i, k] - m[i, j] * m[j, k]) / d_ij
                if mc == 0.0 and k != i:
                    continue
                rx_j, re_j = residuals((i, j, k))[j]
                a4.append(g[j, i] ** 2 * x[i] * mc * x[k] * e[j] * re_j)
                a5.append(g[i, j] * g[j, i] * e[i] * mc * x[k] * e[j] * rx_j)
    return math.fsum(a1) + math.fsum(a2) + math.fsum(a3) - math.fsum(a4) - math.fsum(a5)
