"""Sparse/dense kernels and the verification oracles used by the solvers.

Vectors are plain one-dimensional float64 numpy arrays. The sparse format is
CSR with strictly increasing column indices inside each row. The dense solve
and the power iteration exist mainly to cross-check the iterative machinery,
so they are deliberately boring and direct.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import scipy.linalg

__all__ = [
    "SparseMatrix",
    "SpectralEstimate",
    "SingularMatrixError",
    "ZeroRhsError",
    "spmv",
    "residual_norms",
    "dense_solve",
    "power_iteration",
]

DENSE_ORACLE_CAP = 8192


class SingularMatrixError(Exception):
    """Elimination hit a pivot that is zero to working precision."""

    def __init__(self, pivot_index: int):
        super().__init__(
            f"matrix is singular to working precision (pivot {pivot_index})"
        )
        self.pivot_index = pivot_index


class ZeroRhsError(ValueError):
    """Relative residual requested against a zero right-hand side."""


def as_vector(x, n: int | None = None) -> np.ndarray:
    """Coerce to a 1-D float64 array, optionally checking its length."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ValueError(f"expected a vector of length {n}, got {v.shape[0]}")
    return v


@dataclass(frozen=True)
class SparseMatrix:
    """CSR sparse matrix.

    ``row_offsets`` has ``num_rows + 1`` non-decreasing entries; within each
    row the column indices are strictly increasing, so there is at most one
    stored entry per (row, col).
    """

    num_rows: int
    num_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_rows, self.num_cols)

    @classmethod
    def from_entries(
        cls,
        num_rows: int,
        num_cols: int,
        entries: Iterable[tuple[int, int, float]],
    ) -> "SparseMatrix":
        """Build from (row, col, value) triples.

        Duplicate (row, col) pairs are rejected rather than summed.
        """
        items = list(entries)
        if not items:
            return cls(
                num_rows,
                num_cols,
                np.zeros(num_rows + 1, dtype=np.int64),
                np.zeros(0, dtype=np.int64),
                np.zeros(0, dtype=np.float64),
            )
        rows = np.asarray([e[0] for e in items], dtype=np.int64)
        cols = np.asarray([e[1] for e in items], dtype=np.int64)
        vals = np.asarray([e[2] for e in items], dtype=np.float64)
        if rows.min() < 0 or rows.max() >= num_rows:
            raise ValueError("row index out of range")
        if cols.min() < 0 or cols.max() >= num_cols:
            raise ValueError("column index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
        if np.any(dup):
            i = int(np.nonzero(dup)[0][0])
            raise ValueError(f"duplicate entry at ({rows[i]}, {cols[i]})")
        offsets = np.zeros(num_rows + 1, dtype=np.int64)
        np.add.at(offsets, rows + 1, 1)
        np.cumsum(offsets, out=offsets)
        return cls(num_rows, num_cols, offsets, cols, vals)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        a = np.asarray(dense, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("expected a 2-D array")
        rows, cols = np.nonzero(a)
        return cls.from_entries(
            a.shape[0], a.shape[1], zip(rows.tolist(), cols.tolist(), a[rows, cols])
        )

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.num_rows, self.num_cols))
        for r in range(self.num_rows):
            s, e = self.row_offsets[r], self.row_offsets[r + 1]
            a[r, self.col_indices[s:e]] = self.values[s:e]
        return a

    def diagonal(self) -> np.ndarray:
        """Diagonal entries; positions without a stored entry read as zero."""
        d = np.zeros(min(self.num_rows, self.num_cols))
        for r in range(d.shape[0]):
            s, e = self.row_offsets[r], self.row_offsets[r + 1]
            j = np.searchsorted(self.col_indices[s:e], r)
            if j < e - s and self.col_indices[s + j] == r:
                d[r] = self.values[s + j]
        return d

    def without_diagonal(self) -> "SparseMatrix":
        """Copy with the diagonal entries dropped."""
        rows = np.repeat(
            np.arange(self.num_rows, dtype=np.int64), np.diff(self.row_offsets)
        )
        keep = rows != self.col_indices
        offsets = np.zeros(self.num_rows + 1, dtype=np.int64)
        np.add.at(offsets, rows[keep] + 1, 1)
        np.cumsum(offsets, out=offsets)
        return SparseMatrix(
            self.num_rows,
            self.num_cols,
            offsets,
            self.col_indices[keep].copy(),
            self.values[keep].copy(),
        )

    def check(self) -> None:
        """Validate the CSR invariants, raising ValueError on violation."""
        if self.row_offsets.shape != (self.num_rows + 1,):
            raise ValueError("row_offsets has wrong length")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != self.nnz:
            raise ValueError("row_offsets endpoints inconsistent with nnz")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if self.nnz:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.num_cols:
                raise ValueError("column index out of range")
        for r in range(self.num_rows):
            s, e = self.row_offsets[r], self.row_offsets[r + 1]
            if np.any(np.diff(self.col_indices[s:e]) <= 0):
                raise ValueError(f"columns not strictly increasing in row {r}")


def spmv(a: SparseMatrix, x) -> np.ndarray:
    """y = A x for a CSR matrix."""
    x = as_vector(x)
    if x.shape[0] != a.num_cols:
        raise ValueError(
            f"dimension mismatch: matrix has {a.num_cols} columns, vector has {x.shape[0]}"
        )
    out = np.zeros(a.num_rows)
    if a.nnz == 0:
        return out
    prod = a.values * x[a.col_indices]
    starts = a.row_offsets[:-1]
    nonempty = a.row_offsets[1:] > starts
    # reduceat mishandles zero-length segments; summing only the non-empty
    # rows keeps consecutive offsets as true segment boundaries.
    out[nonempty] = np.add.reduceat(prod, starts[nonempty])
    return out


def residual_norms(a: SparseMatrix, x, b) -> tuple[float, float]:
    """Return (absolute, relative) Euclidean residual norms of b - Ax."""
    b = as_vector(b, a.num_rows)
    r = b - spmv(a, x)
    absolute = float(np.linalg.norm(r))
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        raise ZeroRhsError("relative residual undefined for a zero right-hand side")
    return absolute, absolute / bnorm


def dense_solve(a, b, *, max_dim: int = DENSE_ORACLE_CAP) -> np.ndarray:
    """Solve a dense square system by Gaussian elimination with partial pivoting.

    Verification oracle: O(n^3), capped at ``max_dim`` unknowns so the test
    suite stays fast. Raises SingularMatrixError (with the offending pivot
    index) when a pivot is zero to working precision.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    b = as_vector(b, n)
    if n > max_dim:
        raise ValueError(f"system of size {n} exceeds the oracle cap {max_dim}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    pivots = np.abs(np.diag(lu))
    scale = max(float(np.abs(a).max()), np.finfo(np.float64).tiny)
    tol = n * np.finfo(np.float64).eps * scale
    bad = np.nonzero(pivots <= tol)[0]
    if bad.size:
        raise SingularMatrixError(int(bad[0]))
    return scipy.linalg.lu_solve((lu, piv), b)


@dataclass
class SpectralEstimate:
    """Dominant |eigenvalue| estimate from the power iteration."""

    radius: float
    iterations_used: int
    converged: bool


def power_iteration(
    apply_map: Callable[[np.ndarray], np.ndarray],
    dim: int,
    tol: float = 1e-10,
    max_iterations: int = 5000,
    seed: int = 0,
) -> SpectralEstimate:
    """Estimate the spectral radius of a linear map by the power method.

    The start vector is seeded-random mixed with all-ones, which keeps a
    component on the dominant eigenvector for the nonnegative iteration
    matrices this is used on. The radius estimate is the norm growth ratio
    per step (robust when +r and -r are both dominant); convergence is
    declared when successive estimates differ by less than ``tol``.
    """
    if dim < 1:
        raise ValueError("dim must be at least 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    x = 1.0 + rng.random(dim)
    x /= np.linalg.norm(x)
    previous = np.inf
    estimate = 0.0
    for it in range(1, max_iterations + 1):
        y = as_vector(apply_map(x), dim)
        estimate = float(np.linalg.norm(y))
        if estimate == 0.0:
            return SpectralEstimate(0.0, it, True)
        if abs(estimate - previous) < tol:
            return SpectralEstimate(estimate, it, True)
        previous = estimate
        x = y / estimate
    return SpectralEstimate(estimate, max_iterations, False)
