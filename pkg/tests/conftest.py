import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import sparse

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from problems import make_lasso, make_svm_dual  # noqa: E402
from sparse_matrix import SparseMatrix, partition_uniform  # noqa: E402

E_DENSE = [[1, 1, 0, 0],
           [0, 1, 1, 1],
           [1, 0, 0, 1]]


def random_matrix(n, d, density=0.3, seed=0):
    """Random sparse matrix with no empty row or column"""
    rng = np.random.default_rng(seed)
    dense = sparse.random(n, d, density=density, random_state=rng,
                          data_rvs=rng.standard_normal).toarray()
    # Guarantee coverage of every row and column
    for j in range(n):
        if not dense[j].any():
            dense[j, rng.integers(d)] = rng.standard_normal() or 1.0
    for i in range(d):
        if not dense[:, i].any():
            dense[rng.integers(n), i] = rng.standard_normal() or 1.0
    return SparseMatrix.from_dense(dense)


@pytest.fixture
def matrix_e():
    return SparseMatrix.from_dense(E_DENSE)


@pytest.fixture
def partition_e():
    return partition_uniform(4, 2)


@pytest.fixture
def tiny_lasso():
    m = random_matrix(30, 40, density=0.2, seed=11)
    b = np.random.default_rng(12).standard_normal(30)
    return make_lasso(m, b, lambda_ratio=0.1), partition_uniform(40, 4)


@pytest.fixture
def tiny_svm():
    rng = np.random.default_rng(21)
    n_features, n_samples = 20, 100
    X = random_matrix(n_features, n_samples, density=0.3, seed=22)
    w = rng.standard_normal(n_features)
    labels = np.sign(X.rmatvec(w) + 0.1 * rng.standard_normal(n_samples))
    labels[labels == 0] = 1.0
    return make_svm_dual(X, labels, svm_lambda=1.0), partition_uniform(n_samples, 4)
