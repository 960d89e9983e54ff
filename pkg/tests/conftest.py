import numpy as np
import pytest

from oocgemm.core import SparseMatrix


def random_sparse(rng, n_rows, n_cols, density, integer=True):
    """Random sparse matrix; integer mode draws nonzero values in [-4, 4]."""
    nnz = rng.binomial(n_rows * n_cols, density) if n_rows * n_cols else 0
    if nnz == 0:
        return SparseMatrix.empty(n_rows, n_cols)
    idx = rng.choice(n_rows * n_cols, size=nnz, replace=False)
    rows = idx // n_cols
    cols = idx % n_cols
    if integer:
        vals = rng.integers(1, 5, size=nnz) * rng.choice([-1.0, 1.0], size=nnz)
    else:
        vals = rng.standard_normal(nnz)
        vals[vals == 0.0] = 1.0
    return SparseMatrix.from_coo(n_rows, n_cols, rows, cols, vals.astype(float))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
