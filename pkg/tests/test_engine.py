import os

import numpy as np
import pytest

from oocgemm.blockstore import OutputWriter, pack_matrix
from oocgemm.buffers import IoStats, StagedPartial
from oocgemm.core import SparseMatrix, spgemm_reference
from oocgemm.engine import (
    EngineConfig,
    SpillWriter,
    merge_spills,
    multiply,
    parse_size,
    plan_workloads,
    set_strategy_toggles,
)
from oocgemm.errors import ConfigError, DimensionError

from conftest import random_sparse

KiB = 1 << 10
MiB = 1 << 20


def stored(m, tmp_path, name, block_size=512):
    return pack_matrix(m, block_size, tmp_path / name)


def config(tmp_path, name="c.blk", **kw):
    kw.setdefault("memory_capacity_bytes", 8 * MiB)
    kw.setdefault("block_size_bytes", 512)
    kw.setdefault("threads", 2)
    return EngineConfig(output_path=str(tmp_path / name), **kw)


def file_bytes(path):
    with open(path, "rb") as f:
        return f.read()


class TestPlanWorkloads:
    def test_one_block_per_thread(self):
        plan = plan_workloads(5, 5)
        assert plan.block_counts() == [1, 1, 1, 1, 1]

    def test_uneven_counts(self):
        plan = plan_workloads(7, 3)
        assert plan.block_counts() == [3, 2, 2]
        flat = [b for lst in plan.per_thread_blocks for b in lst]
        assert flat == list(range(7))  # contiguous deal

    def test_zero_blocks(self):
        plan = plan_workloads(0, 4)
        assert plan.block_counts() == [0, 0, 0, 0]

    def test_row_policy_round_robin(self):
        plan = plan_workloads(3, 2, policy="row", n_rows=5)
        assert plan.per_thread_rows == [[0, 2, 4], [1, 3]]

    def test_balance_invariant_random(self, rng):
        for _ in range(20):
            n, t = int(rng.integers(0, 50)), int(rng.integers(1, 9))
            plan = plan_workloads(n, t)
            plan.validate(n)


class TestParseSize:
    def test_units(self):
        assert parse_size("64MiB") == 64 * MiB
        assert parse_size("1KB") == 1000
        assert parse_size("4096") == 4096
        assert parse_size(512) == 512

    def test_bad(self):
        with pytest.raises(ConfigError):
            parse_size("12 parsecs")


class TestMultiply:
    def test_identity(self, tmp_path, rng):
        m = random_sparse(rng, 20, 20, 0.2)
        eye = SparseMatrix.identity(20)
        a = stored(eye, tmp_path, "i.blk")
        b = stored(m, tmp_path, "m.blk")
        out, report = multiply(a, b, config(tmp_path))
        assert out.unpack().equals(m)
        assert report.output_entries == m.nnz

    def test_matches_reference(self, tmp_path, rng):
        for trial in range(10):
            mm, kk, pp = rng.integers(1, 50, size=3)
            a = random_sparse(rng, mm, kk, 0.2)
            b = random_sparse(rng, kk, pp, 0.2)
            sa = stored(a, tmp_path, f"a{trial}.blk")
            sb = stored(b, tmp_path, f"b{trial}.blk")
            out, _ = multiply(sa, sb, config(tmp_path, f"c{trial}.blk"))
            assert out.unpack().equals(spgemm_reference(a, b)), f"trial {trial}"

    def test_dimension_mismatch(self, tmp_path, rng):
        a = stored(random_sparse(rng, 4, 5, 0.5), tmp_path, "a.blk")
        b = stored(random_sparse(rng, 4, 5, 0.5), tmp_path, "b.blk")
        with pytest.raises(DimensionError):
            multiply(a, b, config(tmp_path))

    def test_infeasible_budget_names_minimum(self, tmp_path, rng):
        a = stored(random_sparse(rng, 30, 30, 0.4), tmp_path, "a.blk")
        with pytest.raises(ConfigError) as ei:
            multiply(a, a, config(tmp_path, memory_capacity_bytes=600))
        assert ei.value.min_capacity is not None
        cfg = config(tmp_path, memory_capacity_bytes=ei.value.min_capacity)
        out, _ = multiply(a, a, cfg)
        assert out.n_entries > 0

    def test_min_vs_ample_budget_identical_bytes(self, tmp_path, rng):
        m = random_sparse(rng, 48, 48, 0.2)
        a = stored(m, tmp_path, "a.blk")
        with pytest.raises(ConfigError) as ei:
            multiply(a, a, config(tmp_path, memory_capacity_bytes=1))
        cmin = ei.value.min_capacity
        out1, _ = multiply(a, a, config(tmp_path, "c1.blk",
                                        memory_capacity_bytes=cmin))
        out2, _ = multiply(a, a, config(tmp_path, "c2.blk",
                                        memory_capacity_bytes=64 * MiB))
        assert file_bytes(out1.path) == file_bytes(out2.path)

    def test_thread_counts_identical_bytes(self, tmp_path, rng):
        m = random_sparse(rng, 60, 60, 0.15)
        a = stored(m, tmp_path, "a.blk")
        outs = []
        for t in (1, 2, 4):
            out, rep = multiply(a, a, config(tmp_path, f"c{t}.blk", threads=t))
            outs.append(file_bytes(out.path))
            assert len(rep.per_thread_blocks) == t
        assert outs[0] == outs[1] == outs[2]

    def test_repeat_run_identical_bytes(self, tmp_path, rng):
        m = random_sparse(rng, 40, 40, 0.2)
        a = stored(m, tmp_path, "a.blk")
        out1, _ = multiply(a, a, config(tmp_path, "c1.blk", threads=4))
        out2, _ = multiply(a, a, config(tmp_path, "c2.blk", threads=4))
        assert file_bytes(out1.path) == file_bytes(out2.path)

    def test_split_rows_handled(self, tmp_path):
        # one giant row in A split across several 512-byte blocks
        n = 200
        cols = np.arange(n, dtype=np.int64)
        a_m = SparseMatrix.from_rows(2, n, [(cols, np.ones(n)), (cols[:3], np.ones(3))])
        b_m = SparseMatrix.identity(n)
        a = stored(a_m, tmp_path, "a.blk")
        assert a.n_blocks > 2  # row 0 was split
        b = stored(b_m, tmp_path, "b.blk", block_size=4096)
        out, report = multiply(a, b, config(tmp_path, threads=3))
        assert out.unpack().equals(a_m)

    def test_empty_operands(self, tmp_path):
        a = stored(SparseMatrix.empty(5, 7), tmp_path, "a.blk")
        b = stored(SparseMatrix.empty(7, 3), tmp_path, "b.blk")
        out, report = multiply(a, b, config(tmp_path))
        assert out.unpack().equals(SparseMatrix.empty(5, 3))
        assert report.output_entries == 0

    def test_report_fields(self, tmp_path, rng):
        m = random_sparse(rng, 30, 30, 0.3)
        a = stored(m, tmp_path, "a.blk")
        out, rep = multiply(a, a, config(tmp_path, threads=2))
        assert rep.balance_spread() <= 1
        assert sum(rep.per_thread_entries) == m.nnz
        assert rep.io["b1_loads"] >= a.n_blocks
        assert rep.output_entries == out.n_entries
        assert set(rep.phase_seconds) == {"plan", "load", "compute", "merge", "write"}


class TestToggles:
    def test_all_variants_same_output(self, tmp_path, rng):
        m = random_sparse(rng, 64, 64, 0.15)
        a = stored(m, tmp_path, "a.blk")
        want = spgemm_reference(m, m)
        blobs = set()
        for bb in (False, True):
            for pa in (False, True):
                cfg = set_strategy_toggles(
                    config(tmp_path, f"c{bb}{pa}.blk"), bb, pa)
                out, rep = multiply(a, a, cfg)
                assert out.unpack().equals(want), f"variant bb={bb} pa={pa}"
                assert rep.policy == ("block" if bb else "row")
                blobs.add(file_bytes(out.path))
        assert len(blobs) == 1

    def test_aggregation_reduces_spill(self, tmp_path, rng):
        # small alpha drives a tiny stage share so both variants spill
        m = random_sparse(rng, 80, 80, 0.25)
        a = stored(m, tmp_path, "a.blk")
        flushed = {}
        for pa in (True, False):
            cfg = config(tmp_path, f"c{pa}.blk", threads=2, alpha=0.0625)
            cfg = set_strategy_toggles(cfg, True, pa)
            out, rep = multiply(a, a, cfg)
            assert out.unpack().equals(spgemm_reference(m, m))
            flushed[pa] = rep.io["spill_flush_bytes"]
        assert flushed[False] > 0, "baseline did not spill; test misconfigured"
        assert flushed[True] <= flushed[False]

    def test_row_policy_imbalance_on_skewed_rows(self, tmp_path):
        # one heavy row -> round-robin rows skew one thread's entry count
        rows = [(np.arange(300, dtype=np.int64), np.ones(300))]
        rows += [(np.array([0], dtype=np.int64), np.ones(1)) for _ in range(29)]
        m = SparseMatrix.from_rows(30, 300, rows)
        a = stored(m, tmp_path, "a.blk")
        b = stored(SparseMatrix.identity(300), tmp_path, "b.blk", block_size=4096)
        out_b, rep_block = multiply(a, b, set_strategy_toggles(
            config(tmp_path, "cb.blk", threads=2), True, True))
        out_r, rep_row = multiply(a, b, set_strategy_toggles(
            config(tmp_path, "cr.blk", threads=2), False, True))
        assert out_b.unpack().equals(out_r.unpack())
        assert rep_row.entry_ratio() > rep_block.entry_ratio()


class TestSpillRuns:
    def write_run(self, tmp_path, name, partials, n_cols=100):
        stats = IoStats()
        w = SpillWriter(tmp_path / name, stats, n_cols)
        w.write_run(partials)
        w.close()
        return str(tmp_path / name)

    def partial(self, row, cols, vals, frag=0, seq=0, aggregated=True):
        return StagedPartial(row, frag, seq,
                             np.asarray(cols, dtype=np.uint32),
                             np.asarray(vals, dtype=float), aggregated)

    def merge_to_matrix(self, tmp_path, run_paths, staged, n_rows, n_cols):
        writer = OutputWriter(tmp_path / "merged.blk", 4096, n_rows, n_cols)
        merge_spills(run_paths, staged, writer, n_cols)
        return writer.finalize().unpack()

    def test_staged_only_equals_direct_write(self, tmp_path):
        staged = [self.partial(0, [1, 3], [1.0, 2.0]),
                  self.partial(2, [0], [5.0])]
        got = self.merge_to_matrix(tmp_path, [], staged, 3, 5)
        want = SparseMatrix.from_coo(3, 5, [0, 0, 2], [1, 3, 0], [1.0, 2.0, 5.0])
        assert got.equals(want)

    def test_two_runs_sum(self, tmp_path):
        p1 = self.write_run(tmp_path, "r1.spill", [self.partial(0, [1], [1.0])])
        p2 = self.write_run(tmp_path, "r2.spill",
                            [self.partial(0, [1], [1.0], frag=1)])
        got = self.merge_to_matrix(tmp_path, [p1, p2], [], 1, 5)
        assert got.row(0).pairs() == [(1, 2.0)]

    def test_disjoint_runs_concatenate(self, tmp_path):
        paths = []
        for i, row in enumerate((0, 1, 2)):
            paths.append(self.write_run(
                tmp_path, f"d{i}.spill", [self.partial(row, [row], [float(row + 1)])]))
        got = self.merge_to_matrix(tmp_path, paths, [], 3, 5)
        assert got.to_dense().tolist() == [[1.0, 0, 0, 0, 0],
                                           [0, 2.0, 0, 0, 0],
                                           [0, 0, 3.0, 0, 0]]

    def test_merge_idempotent(self, tmp_path):
        p1 = self.write_run(tmp_path, "r1.spill",
                            [self.partial(0, [1, 2], [1.0, 2.0]),
                             self.partial(1, [0], [3.0])])
        m1 = self.merge_to_matrix(tmp_path, [p1], [], 2, 4)
        writer = OutputWriter(tmp_path / "again.blk", 4096, 2, 4)
        merge_spills([p1], [], writer, 4)
        m2 = writer.finalize().unpack()
        assert m1.equals(m2)

    def test_run_uniqueness_after_coalesce(self, tmp_path):
        # same row staged twice in one flush: aggregated runs coalesce
        stats = IoStats()
        w = SpillWriter(tmp_path / "c.spill", stats, 10)
        w.write_run([self.partial(3, [1, 2], [1.0, 1.0], frag=0),
                     self.partial(3, [2, 5], [1.0, 1.0], frag=1)])
        w.close()
        from oocgemm.engine import SpillStream
        s = SpillStream(str(tmp_path / "c.spill"))
        s.bound()
        groups = s.pop_upto(10)
        assert len(groups) == 1
        assert groups[0].cols.tolist() == [1, 2, 5]
        assert groups[0].vals.tolist() == [1.0, 2.0, 1.0]

    def test_corrupt_run_detected(self, tmp_path):
        p1 = self.write_run(tmp_path, "r1.spill",
                            [self.partial(0, [1, 2], [1.0, 2.0])])
        with open(p1, "r+b") as f:
            f.seek(40)
            f.write(b"\x99")
        from oocgemm.engine import SpillStream
        from oocgemm.errors import FormatError
        s = SpillStream(p1)
        with pytest.raises(FormatError):
            s.bound()

    def test_cancellation_zero_survives_merge(self, tmp_path):
        staged = [self.partial(0, [4], [1.0], frag=0),
                  self.partial(0, [4], [-1.0], frag=1)]
        got = self.merge_to_matrix(tmp_path, [], staged, 1, 8)
        assert got.row(0).pairs() == [(4, 0.0)]


class TestEngineConfig:
    def test_env_round_trip(self):
        env = {
            "OOCGEMM_MEMORY": "32MiB",
            "OOCGEMM_THREADS": "3",
            "OOCGEMM_ALPHA": "0.25",
            "OOCGEMM_NO_PARTIAL_AGG": "1",
            "OOCGEMM_SPILL_DIR": "/tmp/sp",
        }
        cfg = EngineConfig.from_env(env)
        assert cfg.memory_capacity_bytes == 32 * MiB
        assert cfg.threads == 3
        assert cfg.alpha == 0.25
        assert cfg.partial_aggregation is False
        assert cfg.block_based_allocation is True
        assert cfg.spill_directory == "/tmp/sp"

    def test_toggle_mapping(self):
        base = EngineConfig(output_path="x")
        none_ = set_strategy_toggles(base, False, False)
        bw = set_strategy_toggles(base, True, False)
        pa = set_strategy_toggles(base, False, True)
        full = set_strategy_toggles(base, True, True)
        assert (none_.block_based_allocation, none_.partial_aggregation) == (False, False)
        assert (bw.block_based_allocation, bw.partial_aggregation) == (True, False)
        assert (pa.block_based_allocation, pa.partial_aggregation) == (False, True)
        assert (full.block_based_allocation, full.partial_aggregation) == (True, True)

    def test_validation(self):
        with pytest.raises(ConfigError):
            EngineConfig(threads=0, output_path="x").validated()
        with pytest.raises(ConfigError):
            EngineConfig(alpha=0.0, output_path="x").validated()


def test_out_of_storage_during_spill(tmp_path, rng, monkeypatch):
    import errno

    from oocgemm import engine as eng
    from oocgemm.errors import OutOfStorageError

    m = random_sparse(rng, 60, 60, 0.3)
    a = stored(m, tmp_path, "a.blk")

    real_write = eng.SpillWriter.write_run
    calls = {"n": 0}

    def failing(self, partials):
        calls["n"] += 1
        if calls["n"] >= 2:
            raise OSError(errno.ENOSPC, "no space")
        return real_write(self, partials)

    monkeypatch.setattr(eng.SpillWriter, "write_run", failing)
    cfg = config(tmp_path, threads=1, alpha=0.0625)
    with pytest.raises((OutOfStorageError, OSError)) as ei:
        multiply(a, a, cfg)
    assert calls["n"] >= 2
