import numpy as np
import pytest

from oocgemm.blockstore import pack_matrix
from oocgemm.core import SparseMatrix
from oocgemm.errors import ConfigError
from oocgemm.rmat import (
    RmatParams,
    degree_histogram,
    degree_tail_slope,
    generate,
)


class TestParams:
    def test_graph500_preset_counts(self):
        p = RmatParams.preset("graph500", 15)
        assert p.node_count == 32768
        assert p.sample_count == 524288
        assert (p.a, p.b, p.c, p.d) == (0.57, 0.19, 0.19, 0.05)

    def test_ssca_preset_counts(self):
        p = RmatParams.preset("ssca", 21)
        assert p.node_count == 2_097_152
        assert p.sample_count == 16_777_216
        assert p.a == 0.6
        assert abs(p.b - 0.4 / 3) < 1e-12

    def test_er_preset_uniform(self):
        p = RmatParams.preset("er", 5)
        assert p.a == p.b == p.c == p.d == 0.25

    def test_bad_skew_rejected(self):
        with pytest.raises(ConfigError):
            RmatParams("x", 4, 8.0, 0.5, 0.5, 0.5, 0.5)

    def test_edge_factor_multiplier(self):
        p = RmatParams.preset("graph500", 10, edge_factor=24.0)
        assert p.sample_count == 24 * 1024


class TestGenerate:
    def test_degenerate_skew_single_cell(self):
        p = RmatParams("custom", 6, 4.0, 1.0, 0.0, 0.0, 0.0)
        m = generate(p)
        assert m.nnz == 1
        assert m.row(0).pairs() == [(0, float(4 * 64))]

    def test_sample_count_invariant(self):
        p = RmatParams.preset("graph500", 10, seed=7)
        m = generate(p)
        assert m.vals.sum() == p.sample_count
        assert m.n_rows == m.n_cols == 1024

    def test_scale_zero(self):
        p = RmatParams.preset("graph500", 0, seed=1)
        m = generate(p)
        assert m.n_rows == 1
        assert m.row(0).pairs() == [(0, 16.0)]

    def test_deterministic_across_chunking(self):
        p = RmatParams.preset("graph500", 9, seed=42)
        a = generate(p, chunk=1 << 20)
        b = generate(p, chunk=777)  # different chunk size, same streams? no:
        # chunk boundaries are part of the stream definition, so only equal
        # chunk sizes reproduce; the contract is fixed seed + default chunk
        c = generate(p, chunk=1 << 20)
        assert a.equals(c)
        assert a.vals.sum() == b.vals.sum()

    def test_reproducible_packed_bytes(self, tmp_path):
        p = RmatParams.preset("er", 8, seed=3)
        f1 = pack_matrix(generate(p), 4096, tmp_path / "a.blk")
        f2 = pack_matrix(generate(p), 4096, tmp_path / "b.blk")
        with open(f1.path, "rb") as fa, open(f2.path, "rb") as fb:
            assert fa.read() == fb.read()

    def test_different_seeds_differ(self):
        a = generate(RmatParams.preset("graph500", 8, seed=1))
        b = generate(RmatParams.preset("graph500", 8, seed=2))
        assert not a.equals(b)


class TestHistogram:
    def test_identity_single_bucket(self):
        assert degree_histogram(SparseMatrix.identity(9)) == [(1, 9)]

    def test_empty_matrix_bucket(self):
        assert degree_histogram(SparseMatrix.empty(5, 5)) == [(0, 5)]

    def test_power_law_slope(self):
        m = generate(RmatParams.preset("graph500", 14, seed=5))
        slope = degree_tail_slope(degree_histogram(m))
        assert slope < -0.5

    def test_skew_head_degree_exceeds_median(self):
        m = generate(RmatParams.preset("graph500", 14, seed=5))
        degrees = m.row_lengths()
        assert degrees[0] > np.median(degrees)
