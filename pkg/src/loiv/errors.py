"""Exception types shared across the package."""

from __future__ import annotations


class LoivError(Exception):
    """Base class for all package errors."""


class SchemaError(LoivError):
    """Input data violates the CSV schema (missing/odd columns, bad values)."""


class RankDeficient(LoivError):
    """The stacked design Q = (Z, W) is rank deficient.

    Carries the indices of a detected linear dependency among columns.
    """

    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"design is rank deficient; dependent columns: {self.columns}")


class InvalidDesign(LoivError):
    """A simulation design's parameters are infeasible."""


class DegenerateFirstStage(LoivError):
    """A first-stage denominator is numerically zero."""


class SiveDiagonalUnsolvable(LoivError):
    """The linear system defining the SIVE diagonal adjustment is singular."""


class TripleSingular(LoivError):
    """A leave-three-out Gram matrix is not invertible."""

    def __init__(self, i, j, k, message=None):
        self.triple = (i, j, k)
        super().__init__(message or f"leave-out Gram matrix singular for rows {(i, j, k)}")


class NearSingularTriple(LoivError):
    """A leave-three-out determinant is below the stability threshold.

    Raised by default; the conservative mode drops such triples instead.
    """

    def __init__(self, i, j, k, d_triple, threshold):
        self.triple = (i, j, k)
        self.d_triple = d_triple
        self.threshold = threshold
        super().__init__(
            f"near-singular leave-three-out determinant {d_triple:.3e} < {threshold:.3e} "
            f"for rows {(i, j, k)}; pass conservative=True to drop and flag"
        )


class GridTooCoarse(LoivError):
    """Grid inversion could not bracket the acceptance region after expansion."""
