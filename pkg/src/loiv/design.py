"""Designs, projections, and leave-out weighting matrices.

This module ingests data (arrays or CSV), expands categorical instrument and
covariate encodings to indicator designs, builds hat/annihilator matrices
with their leverages, and constructs the n x n weighting matrix G used by
the estimators and tests:

* ``jive``: G equals the hat matrix of the instrument design.
* ``ujive``: G is built from diagonal-rescaled hat matrices of Q = (Z, W)
  and of W alone, with the diagonal removed, so that every row sums to zero
  whenever W spans an intercept within each covariate group.
* ``sive``: G = P_BN - M_Q diag(d) M_Q where P_BN projects on the
  covariate-annihilated instruments and the diagonal vector d is chosen so
  that G has an exactly zero diagonal.

Group structure is detected from integer labels, never by scanning matrices
for zeros: when the instrument/covariate encoding is categorical and the
design is saturated, all downstream computations run block by block.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateFirstStage,
    LoivError,
    RankDeficient,
    SchemaError,
    SiveDiagonalUnsolvable,
)

RANK_RTOL = 1e-10

_WEIGHT_KINDS = ("jive", "ujive", "sive")


def _as_float_vector(name: str, v) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise SchemaError(f"column '{name}' must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise SchemaError(f"column '{name}' has a non-finite value at row {bad}")
    return arr


def _as_int_labels(name: str, v) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise SchemaError(f"label column '{name}' must be one-dimensional")
    if not np.issubdtype(arr.dtype, np.integer):
        flo = np.asarray(arr, dtype=float)
        if not np.all(np.isfinite(flo)) or np.any(flo != np.round(flo)):
            raise SchemaError(f"label column '{name}' must contain integers")
        arr = np.round(flo).astype(np.int64)
    return arr.astype(np.int64)


def _indicator_matrix(codes: np.ndarray, n_levels: int) -> np.ndarray:
    out = np.zeros((codes.shape[0], n_levels))
    out[np.arange(codes.shape[0]), codes] = 1.0
    return out


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


@dataclass(frozen=True)
class BlockPartition:
    """Partition of rows into groups within which a matrix is allowed to be nonzero."""

    labels: np.ndarray  # (n,) int codes 0..n_blocks-1
    indices: tuple  # tuple of int arrays, one per block

    @property
    def n_blocks(self) -> int:
        return len(self.indices)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([idx.shape[0] for idx in self.indices])

    @property
    def equal_sized(self) -> bool:
        sizes = self.sizes
        return bool(np.all(sizes == sizes[0]))


def _partition_from_labels(labels: np.ndarray) -> BlockPartition:
    codes, inverse = np.unique(labels, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(codes) + 1))
    indices = tuple(order[bounds[b]:bounds[b + 1]] for b in range(len(codes)))
    return BlockPartition(labels=inverse, indices=indices)


class Dataset:
    """Outcome, endogenous regressor, instruments, and optional covariates.

    Parameters
    ----------
    y, x : array_like, shape (n,)
        Outcome and endogenous regressor.
    z : array_like
        Either a 1-d integer array of group labels (judge ids), expanded to
        one indicator column per distinct label with no intercept, or a 2-d
        float matrix used as-is.
    w : array_like, optional
        Covariates; 1-d integer labels (expanded to indicators for every
        distinct label) or a 2-d float matrix.

    Notes
    -----
    When both z and w are categorical, stacking all indicators of both would
    be collinear (each set of indicators sums to one). One instrument-label
    indicator is dropped per connected component of the label incidence
    graph, which keeps the column span of Q = (Z, W) unchanged and Q full
    rank. For nested designs this is the usual within-group contrast
    parameterization; the dropped labels are recorded in
    ``dropped_z_labels``.
    """

    def __init__(self, y, x, z, w=None):
        self.y = _as_float_vector("y", y)
        self.x = _as_float_vector("x", x)
        n = self.y.shape[0]
        if self.x.shape[0] != n:
            raise SchemaError(f"y has {n} rows but x has {self.x.shape[0]}")

        self.z_labels = None
        self.w_labels = None
        self.dropped_z_labels: tuple = ()

        z_arr = np.asarray(z)
        if z_arr.ndim == 1:
            self.z_labels = _as_int_labels("z", z_arr)
            if self.z_labels.shape[0] != n:
                raise SchemaError("z has a different number of rows than y")
        else:
            zm = np.asarray(z_arr, dtype=float)
            if zm.shape[0] != n:
                raise SchemaError("z has a different number of rows than y")
            if not np.all(np.isfinite(zm)):
                raise SchemaError("z contains non-finite values")
            self._z_dense = zm

        if w is None:
            self._w_dense = None
        else:
            w_arr = np.asarray(w)
            if w_arr.ndim == 1:
                self.w_labels = _as_int_labels("w", w_arr)
                if self.w_labels.shape[0] != n:
                    raise SchemaError("w has a different number of rows than y")
            else:
                wm = np.asarray(w_arr, dtype=float)
                if wm.shape[0] != n:
                    raise SchemaError("w has a different number of rows than y")
                if not np.all(np.isfinite(wm)):
                    raise SchemaError("w contains non-finite values")
                self._w_dense = wm

        self.n = n
        self._build_matrices()
        if self.n < self.k + self.l + 4:
            raise SchemaError(
                f"need n >= K + L + 4 rows for leave-three-out inference; "
                f"got n={self.n}, K={self.k}, L={self.l}"
            )

    def _build_matrices(self) -> None:
        if self.w_labels is not None:
            self._w_part = _partition_from_labels(self.w_labels)
            self._w_dense = _indicator_matrix(self._w_part.labels, self._w_part.n_blocks)
        else:
            self._w_part = None
        if self.z_labels is not None:
            z_part = _partition_from_labels(self.z_labels)
            z_codes = z_part.labels
            n_z = z_part.n_blocks
            if self.w_labels is not None:
                w_codes = self._w_part.labels
                n_w = self._w_part.n_blocks
                # Connected components of the bipartite label graph decide
                # how many z indicators are redundant given all w indicators.
                uf = _UnionFind(n_z + n_w)
                for zi, wi in zip(z_codes, n_z + w_codes):
                    uf.union(int(zi), int(wi))
                comp_of_z = np.array([uf.find(i) for i in range(n_z)])
                drop = []
                seen = set()
                for code in range(n_z):
                    root = comp_of_z[code]
                    if root not in seen:
                        seen.add(root)
                        drop.append(code)
                keep = np.array([c for c in range(n_z) if c not in set(drop)], dtype=int)
                zm_full = _indicator_matrix(z_codes, n_z)
                self._z_dense = zm_full[:, keep]
                z_values = np.unique(self.z_labels)
                self.dropped_z_labels = tuple(int(z_values[c]) for c in drop)
            else:
                self._z_dense = _indicator_matrix(z_codes, n_z)
            self._z_part = z_part
        else:
            self._z_part = None

        self.k = self._z_dense.shape[1]
        self.l = 0 if self._w_dense is None else self._w_dense.shape[1]

    @property
    def z_matrix(self) -> np.ndarray:
        return self._z_dense

    @property
    def w_matrix(self):
        return self._w_dense

    @property
    def q_matrix(self) -> np.ndarray:
        if self._w_dense is None:
            return self._z_dense
        return np.hstack([self._z_dense, self._w_dense])

    def cells(self):
        """Partition by distinct (z label, w label) pairs, or None for dense input."""
        if self.z_labels is None:
            return None
        if self._w_dense is None:
            return self._z_part
        if self.w_labels is None:
            return None  # dense covariates break the cell structure
        combined = self._z_part.labels.astype(np.int64) * (self._w_part.n_blocks + 1) + self._w_part.labels
        return _partition_from_labels(combined)

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Read the documented CSV schema.

        Header required. Columns: ``y``, ``x``, then either ``z`` (integer
        group id) or ``z1..zK``, optionally ``w`` (integer group id) or
        ``w1..wL``. UTF-8, comma separators, '.' decimal point.
        """
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError("empty CSV: no header row") from None
            header = [h.strip() for h in header]
            rows = [row for row in reader if row]

        def column(name):
            return header.index(name)

        for required in ("y", "x"):
            if required not in header:
                raise SchemaError(f"missing required column '{required}'")

        z_cols = [h for h in header if h == "z" or (h.startswith("z") and h[1:].isdigit())]
        w_cols = [h for h in header if h == "w" or (h.startswith("w") and h[1:].isdigit())]
        if not z_cols:
            raise SchemaError("missing instrument column(s): need 'z' or 'z1..zK'")
        if "z" in z_cols and len(z_cols) > 1:
            raise SchemaError("use either a single 'z' label column or 'z1..zK', not both")
        if "w" in w_cols and len(w_cols) > 1:
            raise SchemaError("use either a single 'w' label column or 'w1..wL', not both")
        z_cols = ["z"] if z_cols == ["z"] else sorted(
            (h for h in z_cols if h != "z"), key=lambda h: int(h[1:])
        )
        w_cols = ["w"] if w_cols == ["w"] else sorted(
            (h for h in w_cols if h != "w"), key=lambda h: int(h[1:])
        )

        width = len(header)
        for r, row in enumerate(rows):
            if len(row) != width:
                raise SchemaError(f"row {r + 2} has {len(row)} fields, header has {width}")

        def parse_float(name, r, s):
            try:
                return float(s)
            except ValueError:
                raise SchemaError(f"column '{name}', row {r + 2}: cannot parse '{s}' as a number") from None

        def parse_int(name, r, s):
            try:
                return int(s)
            except ValueError:
                raise SchemaError(f"column '{name}', row {r + 2}: cannot parse '{s}' as an integer id") from None

        y = [parse_float("y", r, row[column("y")]) for r, row in enumerate(rows)]
        x = [parse_float("x", r, row[column("x")]) for r, row in enumerate(rows)]

        if z_cols == ["z"]:
            z = np.array([parse_int("z", r, row[column("z")]) for r, row in enumerate(rows)])
        else:
            z = np.column_stack([
                [parse_float(c, r, row[column(c)]) for r, row in enumerate(rows)] for c in z_cols
            ])
        if not w_cols:
            w = None
        elif w_cols == ["w"]:
            w = np.array([parse_int("w", r, row[column("w")]) for r, row in enumerate(rows)])
        else:
            w = np.column_stack([
                [parse_float(c, r, row[column(c)]) for r, row in enumerate(rows)] for c in w_cols
            ])
        return cls(y=y, x=x, z=z, w=w)


def _dense_hat(matrix: np.ndarray):
    """Hat matrix basis via SVD, with an informative rank error."""
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise RankDeficient(range(matrix.shape[1]), "design has no usable columns")
    keep = s > RANK_RTOL * s[0]
    if not np.all(keep):
        null_rows = vt[~keep]
        involved = sorted(set(np.flatnonzero(np.abs(null_rows).max(axis=0) > 1e-8).tolist()))
        raise RankDeficient(involved)
    return u, int(s.shape[0])


class HatMatrices:
    """Hat matrix H_Q of a design, its annihilator M = I - H_Q, and leverages.

    Dense designs store an orthonormal basis; saturated categorical designs
    store only the cell partition, and the dense matrices are materialized
    lazily in case a caller asks for them.
    """

    def __init__(self, n: int, leverages: np.ndarray, rank: int, cells: BlockPartition | None,
                 basis: np.ndarray | None):
        self.n = n
        self.leverages = leverages
        self.rank = rank
        self.cells = cells
        self._basis = basis
        self._hq = None

    @property
    def hq(self) -> np.ndarray:
        if self._hq is None:
            if self._basis is not None:
                self._hq = self._basis @ self._basis.T
            else:
                hq = np.zeros((self.n, self.n))
                for idx in self.cells.indices:
                    hq[np.ix_(idx, idx)] = 1.0 / idx.shape[0]
                self._hq = hq
        return self._hq

    @property
    def m(self) -> np.ndarray:
        return np.eye(self.n) - self.hq

    def m_block(self, idx: np.ndarray) -> np.ndarray:
        """Annihilator restricted to the rows/columns in idx.

        Only valid when M is block-diagonal and idx is a union of cells,
        which is how the block engines call it.
        """
        if self.cells is not None:
            sub = np.eye(idx.shape[0])
            cell_codes = self.cells.labels[idx]
            for code in np.unique(cell_codes):
                local = np.flatnonzero(cell_codes == code)
                sub[np.ix_(local, local)] -= 1.0 / local.shape[0]
            return sub
        b = self._basis[idx]
        return np.eye(idx.shape[0]) - b @ b.T


def build_hat(dataset: Dataset) -> HatMatrices:
    """Hat and annihilator matrices of the stacked design Q = (Z, W)."""
    cells = dataset.cells()
    if cells is not None:
        q = dataset.q_matrix
        rank_cat = dataset.k + dataset.l if dataset.l else dataset.k
        if rank_cat == cells.n_blocks:
            sizes = cells.sizes
            leverages = 1.0 / sizes[cells.labels]
            return HatMatrices(dataset.n, leverages, cells.n_blocks, cells, None)
        # Non-saturated categorical design: fall through to the dense path.
    basis, rank = _dense_hat(dataset.q_matrix)
    leverages = np.einsum("ij,ij->i", basis, basis)
    return HatMatrices(dataset.n, leverages, rank, None, basis)


class WeightScheme:
    """A weighting matrix G with its cached hat matrices and block structure.

    Attributes
    ----------
    kind : str
        'jive', 'ujive', or 'sive'.
    k_eff : int
        Normalizer K in the 1/sqrt(K) statistics: the instrument column count.
    hat : HatMatrices
        Hat/annihilator of the full design Q = (Z, W).
    blocks : BlockPartition or None
        Partition within which both G and M are block-diagonal; populated
        for categorical saturated designs only.
    """

    def __init__(self, kind: str, k_eff: int, hat: HatMatrices, blocks: BlockPartition | None,
                 g_dense: np.ndarray | None, g_blocks: list | None, has_g_diagonal: bool):
        self.kind = kind
        self.k_eff = k_eff
        self.hat = hat
        self.blocks = blocks
        self._g_dense = g_dense
        self._g_blocks = g_blocks
        # jive keeps the hat-matrix diagonal in storage; every statistic
        # excludes it explicitly. ujive/sive store a zero diagonal.
        self.has_g_diagonal = has_g_diagonal

    @property
    def n(self) -> int:
        return self.hat.n

    @property
    def g(self) -> np.ndarray:
        if self._g_dense is None:
            g = np.zeros((self.n, self.n))
            for idx, gb in zip(self.blocks.indices, self._g_blocks):
                g[np.ix_(idx, idx)] = gb
            self._g_dense = g
        return self._g_dense

    def g_block(self, b: int) -> np.ndarray:
        if self._g_blocks is not None:
            return self._g_blocks[b]
        idx = self.blocks.indices[b]
        return self._g_dense[np.ix_(idx, idx)]

    def m_block(self, b: int) -> np.ndarray:
        return self.hat.m_block(self.blocks.indices[b])


def _offdiag_bilinear_dense(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ g @ b - np.sum(np.diag(g) * a * b))


def offdiag_bilinear(weights: WeightScheme, a: np.ndarray, b: np.ndarray) -> float:
    """sum_i sum_{j != i} G_ij a_i b_j, using blocks when available."""
    if weights.blocks is None:
        return _offdiag_bilinear_dense(weights.g, a, b)
    total = 0.0
    for bi, idx in enumerate(weights.blocks.indices):
        gb = weights.g_block(bi)
        total += _offdiag_bilinear_dense(gb, a[idx], b[idx])
    return total


def leave_out_predictor(weights: WeightScheme, v: np.ndarray) -> np.ndarray:
    """Vector of leave-own-observation predictions, entry i = sum_{j != i} G_ij v_j."""
    v = np.asarray(v, dtype=float)
    if v.shape != (weights.n,):
        raise SchemaError(f"vector has shape {v.shape}, expected ({weights.n},)")
    if weights.blocks is None:
        g = weights.g
        return g @ v - np.diag(g) * v
    out = np.empty_like(v)
    for bi, idx in enumerate(weights.blocks.indices):
        gb = weights.g_block(bi)
        vb = v[idx]
        out[idx] = gb @ vb - np.diag(gb) * vb
    return out


def _jive_weights(dataset: Dataset) -> WeightScheme:
    if dataset.w_matrix is None:
        hat = build_hat(dataset)
        if hat.cells is not None:
            blocks = hat.cells
            g_blocks = [np.full((idx.shape[0], idx.shape[0]), 1.0 / idx.shape[0])
                        for idx in blocks.indices]
            return WeightScheme("jive", dataset.k, hat, blocks, None, g_blocks, True)
        return WeightScheme("jive", dataset.k, hat, None, hat.hq.copy(), None, True)
    # With covariates, G is still the hat matrix of the instruments alone,
    # while M comes from the full design Q = (Z, W).
    hat_q = build_hat(dataset)
    basis_z, _ = _dense_hat(dataset.z_matrix)
    g = basis_z @ basis_z.T
    return WeightScheme("jive", dataset.k, hat_q, None, g, None, True)


def _rescale_offdiag(h: np.ndarray, leverages: np.ndarray) -> np.ndarray:
    if np.any(leverages >= 1.0 - 1e-12):
        raise LoivError("a leverage equals one; leave-out weighting is undefined for that row")
    out = h / (1.0 - leverages)[:, None]
    np.fill_diagonal(out, 0.0)
    return out


def _ujive_weights(dataset: Dataset) -> WeightScheme:
    if dataset.w_matrix is None:
        raise SchemaError("ujive weights require covariates; use jive when there are none")
    hat_q = build_hat(dataset)
    cells = dataset.cells()
    saturated = hat_q.cells is not None
    if saturated and dataset.w_labels is not None:
        # Both hats are unions of label cells: work per covariate group.
        w_part = _partition_from_labels(dataset.w_labels)
        g_blocks = []
        for idx in w_part.indices:
            nb = idx.shape[0]
            hq_b = np.zeros((nb, nb))
            cell_codes = cells.labels[idx]
            for code in np.unique(cell_codes):
                local = np.flatnonzero(cell_codes == code)
                hq_b[np.ix_(local, local)] = 1.0 / local.shape[0]
            hw_b = np.full((nb, nb), 1.0 / nb)
            gb = _rescale_offdiag(hq_b, np.diag(hq_b)) - _rescale_offdiag(hw_b, np.diag(hw_b))
            g_blocks.append(gb)
        return WeightScheme("ujive", dataset.k, hat_q, w_part, None, g_blocks, False)
    basis_w, _ = _dense_hat(dataset.w_matrix)
    hw = basis_w @ basis_w.T
    hq = hat_q.hq
    g = _rescale_offdiag(hq, hat_q.leverages) - _rescale_offdiag(hw, np.diag(hw).copy())
    return WeightScheme("ujive", dataset.k, hat_q, None, g, None, False)


def _sive_weights(dataset: Dataset) -> WeightScheme:
    if dataset.w_matrix is None:
        raise SchemaError("sive weights require covariates; use jive when there are none")
    hat_q = build_hat(dataset)
    basis_w, _ = _dense_hat(dataset.w_matrix)
    m_w = np.eye(dataset.n) - basis_w @ basis_w.T
    a = m_w @ dataset.z_matrix
    try:
        basis_a, _ = _dense_hat(a)
    except RankDeficient as exc:
        raise RankDeficient(exc.columns, "instruments are collinear with covariates") from exc
    p_bn = basis_a @ basis_a.T
    m_q = np.eye(dataset.n) - hat_q.hq
    # d solves (M_Q had M_Q) d = diag(P_BN), which zeroes the diagonal of G.
    system = m_q * m_q
    try:
        d = np.linalg.solve(system, np.diag(p_bn))
    except np.linalg.LinAlgError as exc:
        raise SiveDiagonalUnsolvable(
            "the diagonal system for the saturated-design weights is singular"
        ) from exc
    g = p_bn - (m_q * d[None, :]) @ m_q
    np.fill_diagonal(g, 0.0)
    return WeightScheme("sive", dataset.k, hat_q, None, g, None, False)


def build_weights(dataset: Dataset, kind: str) -> WeightScheme:
    """Construct the weighting matrix G of the requested kind."""
    kind = kind.lower()
    if kind not in _WEIGHT_KINDS:
        raise LoivError(f"unknown weight kind '{kind}'; expected one of {_WEIGHT_KINDS}")
    if kind == "jive":
        return _jive_weights(dataset)
    if kind == "ujive":
        return _ujive_weights(dataset)
    return _sive_weights(dataset)
