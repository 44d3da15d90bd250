import numpy as np
import pytest
from scipy import linalg

from conftest import random_matrix
from exceptions import DuplicateEntry, EmptyColumn, EmptyRow, IndexOutOfBounds, NotDivisible, ShardMismatch
from sparse_matrix import Partition, SparseMatrix, partition_uniform, row_stats, validate


def test_from_triples_builds_both_orders(matrix_e):
    assert matrix_e.shape == (3, 4)
    assert matrix_e.nnz == 7
    rows, _ = matrix_e.column(1)
    assert rows.tolist() == [0, 1]
    cols, _ = matrix_e.row(1)
    assert cols.tolist() == [1, 2, 3]
    np.testing.assert_array_equal(matrix_e.to_dense(), np.array([[1, 1, 0, 0], [0, 1, 1, 1], [1, 0, 0, 1]]))


def test_row_and_column_iterators_cover_every_entry(matrix_e):
    dense = matrix_e.to_dense()
    by_row = np.zeros_like(dense)
    for j, cols, vals in matrix_e.iter_rows():
        by_row[j, cols] = vals
    by_col = np.zeros_like(dense)
    for i, rows, vals in matrix_e.iter_columns():
        by_col[rows, i] = vals
    np.testing.assert_array_equal(by_row, dense)
    np.testing.assert_array_equal(by_col, dense)
    assert [j for j, _, _ in matrix_e.iter_rows()] == [0, 1, 2]
    np.testing.assert_array_equal(matrix_e.column_rows(3), [1, 2])
    np.testing.assert_array_equal(matrix_e.column_rows(0), [0, 2])


def test_exact_zeros_are_dropped():
    m = SparseMatrix.from_triples([0, 0, 1], [0, 1, 1], [1.0, 0.0, 2.0], (2, 2), check=False)
    assert m.nnz == 2


def test_empty_row_rejected():
    with pytest.raises(EmptyRow) as info:
        SparseMatrix.from_triples([0, 0], [0, 1], [1.0, 1.0], (2, 2))
    assert info.value.row == 1


def test_empty_column_rejected():
    with pytest.raises(EmptyColumn) as info:
        SparseMatrix.from_triples([0, 1], [0, 0], [1.0, 1.0], (2, 2))
    assert info.value.col == 1


def test_index_out_of_bounds():
    with pytest.raises(IndexOutOfBounds):
        SparseMatrix.from_triples([0, 2], [0, 1], [1.0, 1.0], (2, 2))


def test_duplicate_entry_rejected():
    with pytest.raises(DuplicateEntry) as info:
        SparseMatrix.from_triples([0, 0, 1], [1, 1, 0], [1.0, 2.0, 3.0], (2, 2))
    assert (info.value.row, info.value.col) == (0, 1)


def test_padding_columns_may_be_empty():
    m = SparseMatrix.from_triples([0, 1], [0, 1], [1.0, 1.0], (2, 3), n_padded=1)
    assert validate(m)
    assert m.n_active == 2
    assert m.active_mask.tolist() == [True, True, False]


def test_col_sq_norms(matrix_e):
    np.testing.assert_array_equal(matrix_e.col_sq_norms, [2.0, 2.0, 1.0, 2.0])


def test_partition_uniform():
    p = partition_uniform(6, 3)
    assert p.s == 2
    assert [b.tolist() for b in p.blocks] == [[0, 1], [2, 3], [4, 5]]
    assert p.check(6)


def test_partition_not_divisible():
    with pytest.raises(NotDivisible):
        partition_uniform(5, 2)


def test_partition_mismatch():
    p = Partition(c=2, s=2, assignment=np.array([0, 0, 0, 1]))
    with pytest.raises(ShardMismatch):
        p.check(4)


def test_row_stats_on_example(matrix_e, partition_e):
    stats = row_stats(matrix_e, partition_e)
    assert stats.omega.tolist() == [2, 3, 2]
    assert stats.omega_prime.tolist() == [1, 2, 2]
    assert stats.max_omega == 3


def test_single_partition_has_unit_omega_prime(matrix_e):
    stats = row_stats(matrix_e, partition_uniform(4, 1))
    assert stats.omega_prime.tolist() == [1, 1, 1]


def test_column_block_reductions_match_full_matrix():
    m = random_matrix(25, 30, density=0.2, seed=3)
    p = partition_uniform(30, 3)
    rng = np.random.default_rng(0)
    weights = rng.standard_normal(25)
    for l in range(3):
        cols = p.block(l)
        block = m.column_block(cols)
        local = np.array([0, 4, 7])
        dots = block.column_dots(local, weights)
        full = m.block.column_dots(cols[local], weights)
        np.testing.assert_array_equal(dots, full)
        t = rng.standard_normal(3)
        np.testing.assert_allclose(block.combine(local, t), m.matvec(_scatter(cols[local], t, 30)), atol=1e-12)


def _scatter(idx, values, d):
    x = np.zeros(d)
    x[idx] = values
    return x


def test_partition_uniform_shapes():
    assert [b.tolist() for b in partition_uniform(4, 1).blocks] == [[0, 1, 2, 3]]
    assert partition_uniform(50 * 10**9, 256).s == 195_312_500


def _max_quadratic_ratio(M, B):
    """max x^T M x subject to x^T B x <= 1, for B positive semidefinite with ker B inside ker M"""
    evals, evecs = linalg.eigh(B)
    keep = evals > 1e-12 * evals.max()
    P = evecs[:, keep] / np.sqrt(evals[keep])
    return linalg.eigvalsh(P.T @ M @ P)[-1]


def test_row_counts_match_eigen_oracle():
    m = random_matrix(15, 12, density=0.35, seed=8)
    p = partition_uniform(12, 3)
    stats = row_stats(m, p)
    A = m.to_dense()
    for j in range(15):
        a = A[j]
        M = np.outer(a, a)
        blocks = np.zeros_like(M)
        for cols in p.blocks:
            blocks[np.ix_(cols, cols)] = M[np.ix_(cols, cols)]
        assert _max_quadratic_ratio(M, np.diag(np.diag(M))) == pytest.approx(stats.omega[j], rel=1e-8)
        assert _max_quadratic_ratio(M, blocks) == pytest.approx(stats.omega_prime[j], rel=1e-8)


def test_row_counts_are_bounded():
    for seed in range(20):
        m = random_matrix(20, 24, density=0.25, seed=seed)
        stats = row_stats(m, partition_uniform(24, 4))
        assert np.all(stats.omega_prime <= stats.omega)
        assert np.all(stats.omega_prime <= 4)
