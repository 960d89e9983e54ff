import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oocgemm.core import (
    Accumulator,
    SparseMatrix,
    SparseRow,
    accumulate,
    merge_entry_batches,
    scale_row,
    spgemm_in_memory,
    spgemm_reference,
)
from oocgemm.errors import DimensionError

from conftest import random_sparse


def row(row_id, pairs):
    return SparseRow.from_pairs(row_id, pairs)


def mat(rows_as_lists, n_cols=None):
    """Dense row-of-lists helper for small fixtures."""
    dense = np.asarray(rows_as_lists, dtype=float)
    n_rows, nc = dense.shape
    n_cols = nc if n_cols is None else n_cols
    rows = []
    for i in range(n_rows):
        ks = np.flatnonzero(dense[i])
        rows.append((ks, dense[i, ks]))
    return SparseMatrix.from_rows(n_rows, n_cols, rows)


class TestScaleRow:
    def test_identity_scalar(self):
        r = row(0, [(0, 3.0), (5, -2.0)])
        out = scale_row(1.0, r)
        assert out.pairs() == [(0, 3.0), (5, -2.0)]

    def test_annihilation(self):
        r = row(0, [(0, 3.0), (5, -2.0)])
        out = scale_row(0.0, r)
        assert out.pairs() == []

    def test_linearity(self):
        r = row(3, [(1, 1.5), (4, -1.0)])
        out = scale_row(2.0, r)
        assert out.pairs() == [(1, 3.0), (4, -2.0)]
        assert out.row_id == 3

    def test_input_unchanged(self):
        r = row(0, [(2, 1.0)])
        scale_row(5.0, r)
        assert r.pairs() == [(2, 1.0)]


class TestAccumulator:
    def test_empty_insert(self):
        acc = Accumulator()
        accumulate(acc, row(0, [(2, 1.0)]))
        assert acc.items() == [(2, 1.0)]

    def test_merge_on_equal_column(self):
        acc = Accumulator()
        accumulate(acc, row(0, [(2, 1.0)]))
        accumulate(acc, row(0, [(2, 2.0), (7, 1.0)]))
        assert acc.items() == [(2, 3.0), (7, 1.0)]

    def test_cancellation_zero_retained(self):
        acc = Accumulator()
        accumulate(acc, row(0, [(0, 1.0)]))
        accumulate(acc, row(0, [(0, -1.0)]))
        assert acc.items() == [(0, 0.0)]
        assert acc.get(0) == 0.0

    def test_drain_sorted_and_resets(self):
        acc = Accumulator()
        acc.add_scaled(1.0, np.array([9, 11]), np.array([1.0, 2.0]))
        acc.add_scaled(1.0, np.array([1, 9]), np.array([5.0, 1.0]))
        cols, vals = acc.drain()
        assert cols.tolist() == [1, 9, 11]
        assert vals.tolist() == [5.0, 2.0, 2.0]
        assert acc.entry_count() == 0

    def test_entry_count_bound(self):
        acc = Accumulator()
        accumulate(acc, row(0, [(1, 1.0), (2, 1.0)]))
        before = acc.entry_count()
        accumulate(acc, row(0, [(2, 1.0), (3, 1.0), (4, 1.0)]))
        assert acc.entry_count() <= before + 3

    @given(st.lists(st.lists(st.tuples(st.integers(0, 30), st.integers(-4, 4)),
                             max_size=12), max_size=15))
    @settings(max_examples=60, deadline=None)
    def test_no_duplicate_columns_property(self, batches):
        acc = Accumulator()
        expect = {}
        for batch in batches:
            seen = sorted({c: v for c, v in batch}.items())
            if not seen:
                continue
            accumulate(acc, row(0, seen))
            for c, v in seen:
                expect[c] = expect.get(c, 0) + v
        got = acc.items()
        cols = [c for c, _ in got]
        assert len(cols) == len(set(cols))
        assert cols == sorted(cols)
        assert {c: v for c, v in got} == {c: float(v) for c, v in expect.items()}


class TestMergeKernel:
    def test_paths_agree(self, rng):
        # dense-scatter and pack-sort strategies must produce identical
        # results on integer data
        batches = []
        for _ in range(6):
            n = rng.integers(1, 50)
            c = np.sort(rng.choice(64, size=n, replace=False))
            v = rng.integers(-4, 5, size=n).astype(float)
            batches.append((float(rng.integers(1, 4)), c, v))
        c1, v1 = merge_entry_batches(list(batches), n_cols=None)
        c2, v2 = merge_entry_batches(list(batches), n_cols=64)
        assert c1.tolist() == c2.tolist()
        assert v1.tolist() == v2.tolist()


class TestReference:
    def test_identity(self, rng):
        a = random_sparse(rng, 3, 3, 0.5)
        out = spgemm_reference(SparseMatrix.identity(3), a)
        assert out.equals(a)

    def test_nilpotent_empty_output(self):
        a = mat([[0, 1], [0, 0]])
        out = spgemm_reference(a, a)
        assert out.nnz == 0
        assert out.n_rows == 2 and out.n_cols == 2

    def test_hand_product(self):
        # recomputed by hand: [[1,2],[0,3]] @ [[4,0],[1,5]]
        #   row0: 1*[4,0] + 2*[1,5] = [6,10]
        #   row1: 3*[1,5]           = [3,15]
        a = mat([[1, 2], [0, 3]])
        b = mat([[4, 0], [1, 5]])
        out = spgemm_reference(a, b)
        assert out.to_dense().tolist() == [[6.0, 10.0], [3.0, 15.0]]
        # structural check: (1,0) of b is a real entry, so all four cells touched
        assert out.nnz == 4

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            spgemm_reference(mat([[1, 2]]), mat([[1, 2]]))

    def test_cancellation_entry_kept(self):
        a = mat([[1, 1]])
        b = mat([[1], [-1]])
        out = spgemm_reference(a, b)
        assert out.nnz == 1
        assert out.row(0).pairs() == [(0, 0.0)]


class TestInMemory:
    def test_same_examples_as_reference(self, rng):
        a3 = random_sparse(rng, 3, 3, 0.5)
        assert spgemm_in_memory(SparseMatrix.identity(3), a3).equals(a3)
        n = mat([[0, 1], [0, 0]])
        assert spgemm_in_memory(n, n).nnz == 0
        a = mat([[1, 2], [0, 3]])
        b = mat([[4, 0], [1, 5]])
        assert spgemm_in_memory(a, b).to_dense().tolist() == [[6.0, 10.0], [3.0, 15.0]]

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            spgemm_in_memory(mat([[1, 2]]), mat([[1, 2]]))

    def test_oracle_equivalence_integer(self, rng):
        for _ in range(40):
            m, k, p = rng.integers(1, 65, size=3)
            density = rng.choice([0.02, 0.1, 0.2])
            a = random_sparse(rng, m, k, density)
            b = random_sparse(rng, k, p, density)
            assert spgemm_in_memory(a, b).equals(spgemm_reference(a, b))

    def test_oracle_equivalence_real(self, rng):
        for _ in range(20):
            m, k, p = rng.integers(1, 65, size=3)
            a = random_sparse(rng, m, k, 0.2, integer=False)
            b = random_sparse(rng, k, p, 0.2, integer=False)
            assert spgemm_in_memory(a, b).allclose(spgemm_reference(a, b), tol=1e-9)

    def test_identity_both_sides(self, rng):
        a = random_sparse(rng, 17, 17, 0.15)
        eye = SparseMatrix.identity(17)
        assert spgemm_in_memory(eye, a).equals(a)
        assert spgemm_in_memory(a, eye).equals(a)

    def test_bilinearity(self, rng):
        a = random_sparse(rng, 12, 9, 0.2)
        b = random_sparse(rng, 9, 14, 0.2)
        base = spgemm_in_memory(a, b)
        scaled_a = SparseMatrix(a.n_rows, a.n_cols, a.indptr, a.cols, a.vals * 3.0)
        scaled = spgemm_in_memory(scaled_a, b)
        assert np.array_equal(scaled.cols, base.cols)
        assert np.array_equal(scaled.indptr, base.indptr)
        assert np.array_equal(scaled.vals, base.vals * 3.0)


class TestSparseMatrix:
    def test_from_coo_sums_duplicates(self):
        m = SparseMatrix.from_coo(2, 2, [0, 0], [1, 1], [1.0, 2.0])
        assert m.row(0).pairs() == [(1, 3.0)]

    def test_from_coo_drops_explicit_zeros(self):
        m = SparseMatrix.from_coo(2, 2, [0, 1], [0, 1], [0.0, 5.0])
        assert m.nnz == 1

    def test_round_trip_dense(self, rng):
        a = random_sparse(rng, 7, 5, 0.3)
        d = a.to_dense()
        assert d.shape == (7, 5)
        b = mat(d.tolist(), n_cols=5)
        assert a.equals(b)

    def test_transpose(self, rng):
        a = random_sparse(rng, 6, 9, 0.3)
        assert np.array_equal(a.transpose().to_dense(), a.to_dense().T)

    def test_validation_rejects_unsorted(self):
        with pytest.raises(ValueError):
            SparseMatrix(1, 4, [0, 2], [2, 1], [1.0, 1.0])


@given(st.integers(1, 24), st.integers(1, 24), st.integers(1, 24),
       st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_oracle_equivalence_property(m, k, p, seed):
    rng = np.random.default_rng(seed)
    a = random_sparse(rng, m, k, 0.2)
    b = random_sparse(rng, k, p, 0.2)
    assert spgemm_in_memory(a, b).equals(spgemm_reference(a, b))
