"""Sparse data matrix with dual row/column access, column partitions and row statistics.

Coordinates are 1-based in the documentation and 0-based in code. Entries are
kept exactly as given: duplicates are rejected rather than summed and exact
zeros are dropped at construction. Objects are immutable once built.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from exceptions import (
    DuplicateEntry, EmptyColumn, EmptyRow, IndexOutOfBounds, NotDivisible, ShardMismatch,
)
from utils import fsum_segments, setup_logging, timer

logger = setup_logging(__name__)


@dataclass(frozen=True, eq=False)
class ColumnBlock:
    """Column-major slice of A holding the columns one node owns.

    Local column k is global coordinate ``columns[k]``. The per-column entry
    order is the order of the parent matrix, so every reduction below gives
    bitwise identical results on a slice and on the full matrix.
    """
    n_rows: int
    columns: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def n_cols(self):
        return len(self.columns)

    def gather(self, local):
        """Entries of the given local columns as (position-in-request, row, value)"""
        local = np.asarray(local, dtype=np.int64)
        starts = self.indptr[local]
        lens = self.indptr[local + 1] - starts
        total = int(lens.sum())
        pos = np.repeat(np.arange(len(local)), lens)
        offsets = np.repeat(starts - np.cumsum(lens) + lens, lens)
        idx = offsets + np.arange(total)
        return pos, self.indices[idx], self.data[idx]

    def column_dots(self, local, row_weights, gathered=None):
        """Per requested column, sum of A_ji * row_weights[j] in stored order"""
        pos, rows, vals = gathered if gathered is not None else self.gather(local)
        return np.bincount(pos, weights=vals * row_weights[rows], minlength=len(local))

    def combine(self, local, t, gathered=None):
        """Dense n-vector sum_k A[:, local[k]] * t[k], accumulated in request order"""
        pos, rows, vals = gathered if gathered is not None else self.gather(local)
        return np.bincount(rows, weights=vals * t[pos], minlength=self.n_rows)

    def support(self, local, gathered=None):
        """Rows touched by the given columns (the union of the sets D_i)"""
        _, rows, _ = gathered if gathered is not None else self.gather(local)
        return np.unique(rows)


class SparseMatrix:
    """n-by-d matrix stored both column-major (CSC) and row-major (CSR)"""

    def __init__(self, indptr, indices, data, shape, n_padded=0):
        self.n_rows, self.n_cols = int(shape[0]), int(shape[1])
        self.n_padded = int(n_padded)
        self.csc = sparse.csc_matrix((data, indices, indptr), shape=shape)
        self.csr = self.csc.tocsr()
        self.csr.sort_indices()
        self.block = ColumnBlock(
            n_rows=self.n_rows,
            columns=np.arange(self.n_cols),
            indptr=self.csc.indptr.astype(np.int64),
            indices=self.csc.indices.astype(np.int64),
            data=self.csc.data.astype(np.float64),
        )
        self._col_sq_norms = None

    @classmethod
    def from_triples(cls, rows, cols, values, shape, n_padded=0, check=True):
        """Build from (row, col, value) triples, 0-based; exact zeros are dropped"""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        n_rows, n_cols = int(shape[0]), int(shape[1])

        _check_bounds(rows, n_rows, 'row')
        _check_bounds(cols, n_cols, 'column')

        keep = values != 0.0
        rows, cols, values = rows[keep], cols[keep], values[keep]

        # Column-major order, rows ascending inside a column
        order = np.lexsort((rows, cols))
        rows, cols, values = rows[order], cols[order], values[order]
        indptr = np.zeros(n_cols + 1, dtype=np.int64)
        np.cumsum(np.bincount(cols, minlength=n_cols), out=indptr[1:])

        matrix = cls(indptr, rows, values, (n_rows, n_cols), n_padded=n_padded)
        if check:
            validate(matrix)
        return matrix

    @classmethod
    def from_scipy(cls, mat, n_padded=0, check=True):
        coo = sparse.coo_matrix(mat)
        return cls.from_triples(coo.row, coo.col, coo.data, coo.shape,
                                n_padded=n_padded, check=check)

    @classmethod
    def from_dense(cls, array, check=True):
        array = np.atleast_2d(np.asarray(array, dtype=np.float64))
        rows, cols = np.nonzero(array)
        return cls.from_triples(rows, cols, array[rows, cols], array.shape, check=check)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return int(self.csc.nnz)

    @property
    def n_active(self):
        """Number of real (non-padding) columns"""
        return self.n_cols - self.n_padded

    @property
    def active_mask(self):
        mask = np.ones(self.n_cols, dtype=bool)
        if self.n_padded:
            mask[self.n_active:] = False
        return mask

    @property
    def col_sq_norms(self):
        """Exactly rounded sum_j A_ji^2 per column"""
        if self._col_sq_norms is None:
            self._col_sq_norms = fsum_segments(self.block.data ** 2, self.block.indptr)
        return self._col_sq_norms

    def weighted_col_sums(self, row_weights):
        """Exactly rounded sum_j w_j A_ji^2 per column"""
        row_weights = np.asarray(row_weights, dtype=np.float64)
        terms = row_weights[self.block.indices] * self.block.data ** 2
        return fsum_segments(terms, self.block.indptr)

    def column(self, i):
        """(rows, values) of column i; the rows form the set D_i"""
        lo, hi = self.block.indptr[i], self.block.indptr[i + 1]
        return self.block.indices[lo:hi], self.block.data[lo:hi]

    def column_rows(self, i):
        return self.column(i)[0]

    def row(self, j):
        """(cols, values) of row j"""
        lo, hi = self.csr.indptr[j], self.csr.indptr[j + 1]
        return self.csr.indices[lo:hi], self.csr.data[lo:hi]

    def iter_rows(self):
        for j in range(self.n_rows):
            yield (j, *self.row(j))

    def iter_columns(self):
        for i in range(self.n_cols):
            yield (i, *self.column(i))

    def column_block(self, cols):
        """Column-major slice holding the given global columns"""
        cols = np.asarray(cols, dtype=np.int64)
        pos, rows, vals = self.block.gather(cols)
        lens = np.diff(self.block.indptr)[cols]
        indptr = np.zeros(len(cols) + 1, dtype=np.int64)
        np.cumsum(lens, out=indptr[1:])
        return ColumnBlock(n_rows=self.n_rows, columns=cols, indptr=indptr,
                           indices=rows, data=vals)

    def matvec(self, x):
        return self.csc @ np.asarray(x, dtype=np.float64)

    def rmatvec(self, y):
        return self.csr.T @ np.asarray(y, dtype=np.float64)

    def submatrix(self, cols):
        """scipy CSC of the given columns (dense work at small scale)"""
        return self.csc[:, np.asarray(cols)]

    def to_dense(self):
        return self.csc.toarray()

    def __repr__(self):
        return f"SparseMatrix(n={self.n_rows}, d={self.n_cols}, nnz={self.nnz}, padded={self.n_padded})"


def _check_bounds(index, size, axis):
    if index.size == 0:
        return
    bad = np.flatnonzero((index < 0) | (index >= size))
    if bad.size:
        raise IndexOutOfBounds(axis, int(index[bad[0]]), size)


def validate(m):
    """Check structure: indices in range, no duplicates, no empty row or column.

    Returns True; raises the first violation found. Trailing padding columns
    (``m.n_padded``) are allowed to be empty.
    """
    blk = m.block
    _check_bounds(blk.indices, m.n_rows, 'row')

    # Duplicates show up as equal adjacent rows inside a column
    counts = np.diff(blk.indptr)
    cols = np.repeat(np.arange(m.n_cols), counts)
    same = (blk.indices[1:] == blk.indices[:-1]) & (cols[1:] == cols[:-1])
    if same.any():
        k = int(np.flatnonzero(same)[0])
        raise DuplicateEntry(int(blk.indices[k]), int(cols[k]))

    empty_cols = np.flatnonzero(counts[:m.n_active] == 0)
    if empty_cols.size:
        raise EmptyColumn(int(empty_cols[0]))

    row_counts = np.bincount(blk.indices, minlength=m.n_rows)
    empty_rows = np.flatnonzero(row_counts == 0)
    if empty_rows.size:
        raise EmptyRow(int(empty_rows[0]))
    return True


@dataclass(frozen=True, eq=False)
class Partition:
    """Assignment of the d coordinates to c nodes, s coordinates each"""
    c: int
    s: int
    assignment: np.ndarray = field(repr=False)

    @property
    def d(self):
        return self.c * self.s

    def block(self, l):
        """Coordinates owned by node l, ascending"""
        return np.flatnonzero(self.assignment == l)

    @property
    def blocks(self):
        return [self.block(l) for l in range(self.c)]

    def check(self, d):
        """Raise unless this partition covers exactly d coordinates in equal blocks"""
        if len(self.assignment) != d:
            raise ShardMismatch(f"partition covers {len(self.assignment)} coordinates, matrix has {d}")
        sizes = np.bincount(self.assignment, minlength=self.c)
        if len(sizes) != self.c or np.any(sizes != self.s):
            raise ShardMismatch(f"partition blocks have sizes {sizes.tolist()}, expected {self.s} each")
        return True


def partition_uniform(d, c):
    """Contiguous blocks P_l = {l*s, ..., (l+1)*s - 1}"""
    if c < 1 or d < 1 or d % c != 0:
        raise NotDivisible(d, c)
    s = d // c
    if d > 10**8:
        # Too large to materialize; the shape is still meaningful
        return Partition(c=c, s=s, assignment=np.empty(0, dtype=np.int64))
    return Partition(c=c, s=s, assignment=np.arange(d, dtype=np.int64) // s)


@dataclass(frozen=True, eq=False)
class RowStats:
    """Per-row structure counts and per-column squared norms"""
    omega: np.ndarray
    omega_prime: np.ndarray
    col_sq_norms: np.ndarray

    @property
    def max_omega(self):
        return int(self.omega.max())

    @property
    def max_omega_prime(self):
        return int(self.omega_prime.max())


@timer
def row_stats(m, p):
    """omega_j (nonzeros in row j), omega'_j (partitions active at row j), column norms"""
    p.check(m.n_cols)
    blk = m.block
    omega = np.bincount(blk.indices, minlength=m.n_rows).astype(np.int64)

    # Distinct (row, owner) pairs, counted per row
    owners = p.assignment[np.repeat(np.arange(m.n_cols), np.diff(blk.indptr))]
    pairs = np.unique(blk.indices * p.c + owners)
    omega_prime = np.bincount(pairs // p.c, minlength=m.n_rows).astype(np.int64)

    logger.info(f"Row stats for {m}: mean omega={omega.mean():.2f}, max omega={omega.max()}, "
                f"max omega'={omega_prime.max()}")
    return RowStats(omega=omega, omega_prime=omega_prime, col_sq_norms=m.col_sq_norms)
