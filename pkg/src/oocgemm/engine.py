"""Operation layer: multi-threaded out-of-core multiplication.

Work is dealt to threads by former-matrix block, so every thread receives
the same number of blocks (within one) no matter how skewed the row lengths
are; each fragment of a row split across blocks is processed by the owner of
its block and the partials are combined in the merge phase.

Per assigned row fragment a worker scales and folds latter rows into a
budgeted accumulator.  Completed partials are staged inside the worker's
share of the output buffer; when they no longer fit, the staged set is
flushed to a spill run.  A final single-threaded pass merges staged partials
and spill runs by (row, column), summing contributions in a canonical order,
and streams finished rows to the output writer.

With partial aggregation disabled (ablation baseline), intermediates are
staged as raw term triples without column-wise merging, which multiplies the
spilled volume; correctness is unaffected because the merge pass aggregates
everything anyway.
"""

from __future__ import annotations

import dataclasses
import math
import os
import re
import struct
import tempfile
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .blockstore import (
    DEFAULT_BLOCK_SIZE,
    ENTRY_DT,
    MIN_BLOCK_SIZE,
    OBJ_HEADER_BYTES,
    OutputWriter,
    StoredMatrix,
)
from .buffers import (
    INTERMEDIATE_ENTRY_BYTES,
    BufferPool,
    IoStats,
    OutputStage,
    StagedPartial,
    plan_buffers,
)
from .core import merge_entry_batches, sort_batches_stable
from .errors import ConfigError, DimensionError, FormatError

ENV_PREFIX = "OOCGEMM_"

_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([KMGT]i?B?|B)?\s*$", re.IGNORECASE)
_SIZE_FACTORS = {
    "": 1, "b": 1,
    "k": 1000, "kb": 1000, "kib": 1024,
    "m": 1000**2, "mb": 1000**2, "mib": 1024**2,
    "g": 1000**3, "gb": 1000**3, "gib": 1024**3,
    "t": 1000**4, "tb": 1000**4, "tib": 1024**4,
}


def parse_size(text):
    """'64MiB' / '1GB' / '4096' -> bytes."""
    if isinstance(text, int):
        return text
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ConfigError(f"cannot parse size {text!r}")
    value = float(m.group(1))
    unit = (m.group(2) or "").lower()
    if unit not in _SIZE_FACTORS:
        raise ConfigError(f"unknown size unit in {text!r}")
    return int(value * _SIZE_FACTORS[unit])


@dataclass(frozen=True)
class EngineConfig:
    """Knobs of one multiplication run.

    Every field can also come from the environment with the OOCGEMM_ prefix:
    OOCGEMM_MEMORY, OOCGEMM_BLOCK_SIZE, OOCGEMM_THREADS, OOCGEMM_ALPHA,
    OOCGEMM_NO_BLOCK_BALANCE, OOCGEMM_NO_PARTIAL_AGG, OOCGEMM_SPILL_DIR.
    """

    memory_capacity_bytes: int = 256 << 20
    block_size_bytes: int = DEFAULT_BLOCK_SIZE
    threads: int = 4
    alpha: float = 0.125
    block_based_allocation: bool = True
    partial_aggregation: bool = True
    spill_directory: str | None = None
    output_path: str | None = None
    keep_spills: bool = False

    def validated(self):
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.block_size_bytes < MIN_BLOCK_SIZE:
            raise ConfigError(f"block size must be at least {MIN_BLOCK_SIZE} bytes")
        if self.memory_capacity_bytes <= 0:
            raise ConfigError("memory capacity must be positive")
        return self

    @classmethod
    def from_env(cls, env=None, **overrides):
        env = os.environ if env is None else env
        kw = {}

        def pick(name, key, conv):
            raw = env.get(ENV_PREFIX + name)
            if raw is not None:
                kw[key] = conv(raw)

        pick("MEMORY", "memory_capacity_bytes", parse_size)
        pick("BLOCK_SIZE", "block_size_bytes", parse_size)
        pick("THREADS", "threads", int)
        pick("ALPHA", "alpha", float)
        pick("NO_BLOCK_BALANCE", "block_based_allocation",
             lambda v: v.strip().lower() in ("", "0", "false", "no"))
        pick("NO_PARTIAL_AGG", "partial_aggregation",
             lambda v: v.strip().lower() in ("", "0", "false", "no"))
        pick("SPILL_DIR", "spill_directory", str)
        kw.update(overrides)
        return cls(**kw)


def set_strategy_toggles(cfg, block_based_allocation, partial_aggregation):
    """Select the workload policy and intermediate handling for ablations."""
    return dataclasses.replace(cfg,
                               block_based_allocation=block_based_allocation,
                               partial_aggregation=partial_aggregation)


@dataclass
class WorkloadPlan:
    """Block lists (balanced mode) or row lists (round-robin ablation) per thread."""

    policy: str
    per_thread_blocks: list | None = None
    per_thread_rows: list | None = None

    def block_counts(self):
        if self.per_thread_blocks is None:
            return None
        return [len(b) for b in self.per_thread_blocks]

    def validate(self, n_blocks):
        if self.policy == "block":
            counts = self.block_counts()
            if counts and max(counts) - min(counts) > 1:
                raise AssertionError(f"unbalanced block plan: {counts}")
            seen = [i for blocks in self.per_thread_blocks for i in blocks]
            if sorted(seen) != list(range(n_blocks)):
                raise AssertionError("plan does not cover each block exactly once")


def plan_workloads(n_blocks, threads, policy="block", n_rows=None):
    """Deal work to threads.

    Block policy: contiguous runs of blocks, counts differing by at most one,
    earlier threads taking the extra block.  Row policy (ablation baseline):
    rows dealt round-robin regardless of size.
    """
    if threads < 1:
        raise ConfigError("threads must be at least 1")
    if policy == "block":
        base, extra = divmod(n_blocks, threads)
        out, start = [], 0
        for w in range(threads):
            n = base + (1 if w < extra else 0)
            out.append(list(range(start, start + n)))
            start += n
        return WorkloadPlan("block", per_thread_blocks=out)
    if policy == "row":
        if n_rows is None:
            raise ConfigError("row policy requires the row count")
        rows = [list(range(w, n_rows, threads)) for w in range(threads)]
        return WorkloadPlan("row", per_thread_rows=rows)
    raise ConfigError(f"unknown workload policy {policy!r}")


# ---------------------------------------------------------------------------
# spill runs
# ---------------------------------------------------------------------------

RUN_MAGIC = 0x4E555231  # "1RUN"
_RUN_HEADER = struct.Struct("<IIIIIIQ")  # magic, flags, groups, row_min, row_max, crc, triples
RUN_HEADER_BYTES = _RUN_HEADER.size
GROUP_DT = np.dtype([("row", "<u4"), ("frag", "<u2"), ("seq", "<u2"), ("count", "<u4")])
RUN_FLAG_AGGREGATED = 1


@dataclass
class SpillRun:
    """One flushed run inside a worker's spill file."""

    path: str
    offset: int
    groups: int
    triples: int
    row_min: int
    row_max: int
    aggregated: bool


class SpillWriter:
    """Appends runs to one per-worker spill file.

    Within a run, partials of the same row are coalesced in (fragment, seq)
    order so each (row, column) appears at most once per aggregated run; raw
    runs from the no-aggregation ablation keep duplicates by design.
    """

    def __init__(self, path, stats, n_cols):
        self.path = str(path)
        self.stats = stats
        self.n_cols = n_cols
        self.n_runs = 0
        self._file = None
        self._offset = 0

    def write_run(self, partials):
        partials = [p for p in partials if len(p.cols)]
        if not partials:
            return
        aggregated = all(p.aggregated for p in partials)
        if aggregated and len(partials) > 1:
            partials = self._coalesce(partials)
        if self._file is None:
            self._file = open(self.path, "wb")
        table = np.empty(len(partials), dtype=GROUP_DT)
        for i, p in enumerate(partials):
            if p.row_id >= 1 << 32 or p.frag >= 1 << 16 or p.seq >= 1 << 16:
                raise ConfigError(
                    f"spill group key out of range: row={p.row_id} "
                    f"frag={p.frag} seq={p.seq}")
            table[i] = (p.row_id, p.frag, p.seq, len(p.cols))
        if len(partials) == 1:
            cols = np.ascontiguousarray(partials[0].cols, dtype="<u4")
            vals = np.ascontiguousarray(partials[0].vals, dtype="<f8")
        else:
            cols = np.concatenate([p.cols for p in partials]).astype("<u4", copy=False)
            vals = np.concatenate([p.vals for p in partials]).astype("<f8", copy=False)
        crc = zlib.crc32(table.tobytes())
        crc = zlib.crc32(cols, crc)
        crc = zlib.crc32(vals, crc)
        flags = RUN_FLAG_AGGREGATED if aggregated else 0
        row_min = int(table["row"].min())
        row_max = int(table["row"].max())
        header = _RUN_HEADER.pack(RUN_MAGIC, flags, len(partials), row_min,
                                  row_max, crc, len(cols))
        body_bytes = table.nbytes + cols.nbytes + vals.nbytes
        try:
            if body_bytes < 1 << 20:
                # one syscall for small runs; large ones stream array by array
                self._file.write(header + table.tobytes() + cols.tobytes()
                                 + vals.tobytes())
            else:
                self._file.write(header)
                table.tofile(self._file)
                cols.tofile(self._file)
                vals.tofile(self._file)
        except OSError as e:
            from .blockstore import _write_failed
            raise _write_failed(e, self._offset) from e
        self.n_runs += 1
        self._offset += RUN_HEADER_BYTES + body_bytes
        self.stats.add("spill_flush_bytes", RUN_HEADER_BYTES + body_bytes)
        self.stats.add("spill_runs")

    def _coalesce(self, partials):
        out = []
        i = 0
        while i < len(partials):
            j = i + 1
            while j < len(partials) and partials[j].row_id == partials[i].row_id:
                j += 1
            if j == i + 1:
                out.append(partials[i])
            else:
                group = sorted(partials[i:j], key=lambda p: (p.frag, p.seq))
                cols, vals = merge_entry_batches(
                    [(1.0, p.cols, p.vals) for p in group], self.n_cols)
                first = group[0]
                out.append(StagedPartial(first.row_id, first.frag, first.seq,
                                         cols, vals, aggregated=True))
            i = j
        return out

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    @property
    def bytes_written(self):
        return self._offset


class SpillStream:
    """Sequential reader over one spill file's runs, buffered by run.

    Rows are non-decreasing across a worker's spill stream, which the window
    merge relies on; this is asserted while reading.
    """

    def __init__(self, path, stats=None, n_cols=None):
        self.path = str(path)
        self.stats = stats
        self._file = open(self.path, "rb")
        self._eof = False
        self._buffer = []
        self._head = 0
        self._last_row = -1

    def _read_run(self):
        """Buffer one run; returns the bytes consumed (0 at end of file)."""
        header = self._file.read(RUN_HEADER_BYTES)
        if not header:
            self._eof = True
            self._file.close()
            return 0
        if len(header) < RUN_HEADER_BYTES:
            raise FormatError(f"{self.path}: truncated run header")
        magic, flags, n_groups, row_min, row_max, crc, n_triples = \
            _RUN_HEADER.unpack(header)
        if magic != RUN_MAGIC:
            raise FormatError(f"{self.path}: bad run magic {magic:#x}")
        table_bytes = n_groups * GROUP_DT.itemsize
        body = self._file.read(table_bytes + 12 * n_triples)
        if len(body) < table_bytes + 12 * n_triples:
            raise FormatError(f"{self.path}: truncated run body")
        table = np.frombuffer(body, dtype=GROUP_DT, count=n_groups)
        cols = np.frombuffer(body, dtype="<u4", count=n_triples, offset=table_bytes)
        vals = np.frombuffer(body, dtype="<f8", count=n_triples,
                             offset=table_bytes + 4 * n_triples)
        actual = zlib.crc32(body)
        if actual != crc:
            raise FormatError(f"{self.path}: run checksum mismatch")
        if self.stats is not None:
            self.stats.add("spill_read_bytes",
                           RUN_HEADER_BYTES + table.nbytes + cols.nbytes + vals.nbytes)
        aggregated = bool(flags & RUN_FLAG_AGGREGATED)
        pos = 0
        for row, frag, seq, count in table.tolist():
            if row < self._last_row:
                raise FormatError(f"{self.path}: rows out of order in spill stream")
            self._last_row = row
            self._buffer.append(StagedPartial(row, frag, seq,
                                              cols[pos:pos + count],
                                              vals[pos:pos + count], aggregated))
            pos += count
        return RUN_HEADER_BYTES + len(body)

    def bound(self):
        """Largest row id that is certainly complete in the buffer."""
        while not self._eof and self._head >= len(self._buffer):
            self._read_run()
        if self._eof and self._head >= len(self._buffer):
            return math.inf
        if self._eof:
            return math.inf  # everything buffered is complete
        return self._last_row - 1

    def advance(self, target_bytes=4 << 20):
        """Buffer more runs so the merge window can move (batched by bytes)."""
        got = 0
        while not self._eof and got < target_bytes:
            got += self._read_run()

    def pop_upto(self, row_bound):
        out = []
        while self._head < len(self._buffer) and \
                self._buffer[self._head].row_id <= row_bound:
            out.append(self._buffer[self._head])
            self._head += 1
        if self._head > 256 and self._head == len(self._buffer):
            self._buffer = []
            self._head = 0
        return out

    def exhausted(self):
        return self._eof and self._head >= len(self._buffer)


class StagedStream:
    """In-memory partials presented with the SpillStream interface."""

    def __init__(self, partials):
        self._buffer = sorted(partials, key=lambda p: (p.row_id, p.frag, p.seq))
        self._head = 0

    def bound(self):
        return math.inf

    def advance(self):
        pass

    def pop_upto(self, row_bound):
        out = []
        while self._head < len(self._buffer) and \
                self._buffer[self._head].row_id <= row_bound:
            out.append(self._buffer[self._head])
            self._head += 1
        return out

    def exhausted(self):
        return self._head >= len(self._buffer)


def merge_spills(run_paths, staged, writer, n_cols, stats=None,
                 window_triples=4 << 20):
    """K-way merge of spill files and staged partials into the writer.

    Contributions to one (row, column) are summed in ascending
    (fragment, sub-sequence) order, so the result does not depend on which
    worker spilled what when.  Rows are emitted in ascending order;
    cancellation zeros are kept.
    """
    streams = [SpillStream(p, stats, n_cols) for p in run_paths]
    if staged:
        streams.append(StagedStream(staged))
    if not streams:
        return
    while True:
        active = [s for s in streams if not s.exhausted()]
        if not active:
            break
        bound = min(s.bound() for s in active)
        groups = []
        for s in active:
            groups.extend(s.pop_upto(bound))
        if not groups:
            # the limiting stream's last buffered row may still continue;
            # pull more of it so the bound can move
            limiting = min(active, key=lambda s: s.bound())
            limiting.advance()
            continue
        groups.sort(key=lambda p: (p.row_id, p.frag, p.seq))
        i = 0
        while i < len(groups):
            j = i + 1
            row_id = groups[i].row_id
            while j < len(groups) and groups[j].row_id == row_id:
                j += 1
            if j == i + 1 and groups[i].aggregated:
                cols, vals = groups[i].cols, groups[i].vals
            else:
                cols, vals = merge_entry_batches(
                    [(1.0, g.cols, g.vals) for g in groups[i:j]], n_cols)
            writer.append_row(row_id, cols, vals)
            i = j


# ---------------------------------------------------------------------------
# per-row accumulation under a byte budget
# ---------------------------------------------------------------------------

class _RowAccumulator:
    """Accumulates one row fragment's scaled terms within the worker share.

    Partial aggregation on: terms are column-wise merged whenever the
    buffered volume exceeds the share; if the merged result itself exceeds
    the share it is spilled as a sub-partial and accumulation continues.

    Partial aggregation off: terms are kept as raw triples; overflow spills
    them column-sorted but unmerged.
    """

    __slots__ = ("row_id", "frag", "share", "stage", "pa", "n_cols",
                 "batches", "batch_entries", "merged_cols", "merged_vals", "seq")

    def __init__(self, row_id, frag, share, stage, pa, n_cols):
        self.row_id = row_id
        self.frag = frag
        self.share = share // INTERMEDIATE_ENTRY_BYTES  # budget in entries
        self.stage = stage
        self.pa = pa
        self.n_cols = n_cols
        self.batches = []
        self.batch_entries = 0
        self.merged_cols = None
        self.merged_vals = None
        self.seq = 0

    def add(self, scale, cols, vals):
        if scale == 0.0 or len(cols) == 0:
            return
        self.batches.append((scale, cols, vals))
        self.batch_entries += len(cols)
        merged_n = 0 if self.merged_cols is None else len(self.merged_cols)
        if self.batch_entries + merged_n > self.share:
            self._overflow()

    def _merge_pending(self):
        if not self.batches:
            if self.merged_cols is None:
                self.merged_cols = np.empty(0, dtype=np.uint32)
                self.merged_vals = np.empty(0)
            return
        if self.merged_cols is None or not len(self.merged_cols):
            if len(self.batches) == 1:
                # a single scaled row is already sorted and duplicate-free
                s, c, v = self.batches[0]
                self.merged_cols = np.ascontiguousarray(c, dtype=np.uint32)
                self.merged_vals = v * s if s != 1.0 else np.array(v, dtype=np.float64)
                self.batches = []
                self.batch_entries = 0
                return
            batches = self.batches
        else:
            batches = [(1.0, self.merged_cols, self.merged_vals)] + self.batches
        self.merged_cols, self.merged_vals = merge_entry_batches(batches, self.n_cols)
        self.batches = []
        self.batch_entries = 0

    def _overflow(self):
        if self.pa:
            self._merge_pending()
            if len(self.merged_cols) > self.share:
                self._spill_sub(self.merged_cols, self.merged_vals, aggregated=True)
                self.merged_cols = None
                self.merged_vals = None
        else:
            cols, vals = sort_batches_stable(self.batches)
            self.batches = []
            self.batch_entries = 0
            self._spill_sub(cols, vals, aggregated=False)

    def _spill_sub(self, cols, vals, aggregated):
        # keep the worker's spill stream ordered by row
        self.stage.flush_staged()
        self.stage.sink.write_run([StagedPartial(self.row_id, self.frag, self.seq,
                                                 cols, vals, aggregated)])
        self.seq += 1

    def finish(self):
        """Stage the final partial for this fragment."""
        if self.pa:
            self._merge_pending()
            cols, vals = self.merged_cols, self.merged_vals
            aggregated = True
        else:
            cols, vals = sort_batches_stable(self.batches)
            aggregated = False
        self.stage.stage(StagedPartial(self.row_id, self.frag, self.seq,
                                       cols, vals, aggregated))


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

@dataclass
class MultiplyReport:
    """Instrumentation of one multiply: timings, I/O counters, balance."""

    wall_seconds: float
    phase_seconds: dict
    io: dict
    per_thread_blocks: list
    per_thread_entries: list
    per_thread_rows: list
    output_entries: int
    output_rows: int
    output_cols: int
    max_row_bytes: int
    plan: dict
    policy: str
    partial_aggregation: bool
    peak_staged_bytes: int
    peak_cache_blocks: int
    spill_bytes_by_worker: list = field(default_factory=list)

    def balance_spread(self):
        counts = [c for c in self.per_thread_blocks if c is not None]
        return max(counts) - min(counts) if counts else 0

    def entry_ratio(self):
        busy = [c for c in self.per_thread_entries if c > 0]
        if not busy:
            return 1.0
        return max(busy) / min(busy)

    def to_dict(self):
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# the multiply
# ---------------------------------------------------------------------------

def _open_stored(x):
    return x if isinstance(x, StoredMatrix) else StoredMatrix.open(x)


def _max_row_bound(a, b):
    """Largest per-row intermediate volume: max over rows of the summed
    lengths of selected latter rows, clamped to the column count.

    One streaming pass over the former matrix; row totals accumulate across
    fragments so split rows are bounded by their full extent.
    """
    if a.n_rows == 0:
        return 0
    b_len = b.row_lengths
    row_tot = np.zeros(a.n_rows, dtype=np.int64)
    for blk in range(a.n_blocks):
        payload, _ = a.read_block_payload(blk)
        lay = a.block_layout(blk)
        for pos in range(len(lay.row_ids)):
            ec = int(lay.entry_counts[pos])
            if ec == 0:
                continue
            off = int(lay.offsets[pos]) + OBJ_HEADER_BYTES
            ent = np.frombuffer(payload.data, dtype=ENTRY_DT, count=ec, offset=off)
            row_tot[lay.row_ids[pos]] += int(b_len[ent["col"].astype(np.int64)].sum())
    return int(min(int(row_tot.max()), b.n_cols)) * INTERMEDIATE_ENTRY_BYTES


def multiply(a, b, cfg):
    """Multiply two stored matrices under the configured memory budget.

    Returns (stored result, report).  The result equals the in-memory
    reference entry for entry on integer-valued data regardless of budget,
    thread count, or strategy toggles.
    """
    cfg = cfg.validated()
    if cfg.output_path is None:
        raise ConfigError("output_path must be set")
    a = _open_stored(a)
    b = _open_stored(b)
    if a.n_cols != b.n_rows:
        raise DimensionError(
            f"cannot multiply {a.n_rows}x{a.n_cols} by {b.n_rows}x{b.n_cols}")

    wall0 = time.perf_counter()
    t0 = time.perf_counter()
    max_row_bytes = _max_row_bound(a, b)
    block_size = max(a.block_size, b.block_size)
    plan = plan_buffers(cfg.memory_capacity_bytes, block_size, cfg.threads,
                        cfg.alpha, max_row_bytes)
    policy = "block" if cfg.block_based_allocation else "row"
    workload = plan_workloads(a.n_blocks, cfg.threads, policy, n_rows=a.n_rows)
    workload.validate(a.n_blocks)
    plan_seconds = time.perf_counter() - t0

    stats = IoStats()
    pool = BufferPool(a, b, plan, stats)
    share = plan.worker_share

    own_spill_dir = cfg.spill_directory is None
    spill_dir = cfg.spill_directory or tempfile.mkdtemp(
        prefix="spill-", dir=os.path.dirname(os.path.abspath(cfg.output_path)) or ".")
    os.makedirs(spill_dir, exist_ok=True)

    spills = [SpillWriter(os.path.join(spill_dir, f"run-w{w}.spill"), stats, b.n_cols)
              for w in range(cfg.threads)]
    stages = [OutputStage(share, spills[w]) for w in range(cfg.threads)]
    leftovers = [[] for _ in range(cfg.threads)]
    entries_done = [0] * cfg.threads
    rows_done = [0] * cfg.threads
    failures = [None] * cfg.threads

    def run_block_worker(w):
        cursor = pool.former_cursor(w)
        stage = stages[w]
        fetch = pool.cache.fetch
        n_cols = b.n_cols
        pa = cfg.partial_aggregation
        done_rows = set()
        for bidx in workload.per_thread_blocks[w]:
            blk = cursor.load(bidx)
            lay = blk.layout
            for pos in range(len(lay.row_ids)):
                row_id = int(lay.row_ids[pos])
                frag = int(lay.frag_index[pos])
                acc = _RowAccumulator(row_id, frag, share, stage, pa, n_cols)
                acols, avals = blk.entries_at(pos)
                for j, s in zip(acols.tolist(), avals.tolist()):
                    bcols, bvals = pool.fetch_row("latter", j)
                    acc.add(s, bcols, bvals)
                acc.finish()
                entries_done[w] += len(acols)
                done_rows.add(row_id)
        rows_done[w] = len(done_rows)
        leftovers[w] = stage.drain()

    def run_row_worker(w):
        stage = stages[w]
        n_cols = b.n_cols
        pa = cfg.partial_aggregation
        for row_id in workload.per_thread_rows[w]:
            acols, avals = pool.fetch_row("former", row_id, worker_id=w)
            acc = _RowAccumulator(row_id, 0, share, stage, pa, n_cols)
            for j, s in zip(acols.tolist(), avals.tolist()):
                bcols, bvals = pool.fetch_row("latter", j)
                acc.add(s, bcols, bvals)
            acc.finish()
            entries_done[w] += len(acols)
            rows_done[w] += 1
        leftovers[w] = stage.drain()

    target = run_block_worker if policy == "block" else run_row_worker

    def guarded(w):
        try:
            target(w)
        except BaseException as e:  # noqa: BLE001 - propagated to the caller
            failures[w] = e

    t0 = time.perf_counter()
    threads = [threading.Thread(target=guarded, args=(w,), name=f"mul-w{w}")
               for w in range(cfg.threads)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    compute_seconds = time.perf_counter() - t0
    for sw in spills:
        sw.close()
    try:
        for e in failures:
            if e is not None:
                raise e

        t0 = time.perf_counter()
        writer = OutputWriter(cfg.output_path, cfg.block_size_bytes,
                              a.n_rows, b.n_cols)
        staged = [p for worker in leftovers for p in worker]
        run_paths = [sw.path for sw in spills if sw.bytes_written > 0]
        write_seconds = [0.0]
        timed = _TimedWriter(writer, write_seconds)
        merge_spills(run_paths, staged, timed, b.n_cols, stats)
        result = writer.finalize()
        stats.add("output_write_bytes", writer.bytes_written)
        merge_seconds = time.perf_counter() - t0
    finally:
        if not cfg.keep_spills:
            for sw in spills:
                try:
                    os.unlink(sw.path)
                except OSError:
                    pass
            if own_spill_dir:
                try:
                    os.rmdir(spill_dir)
                except OSError:
                    pass

    cursors = [pool.former_cursor(w) for w in range(cfg.threads)
               if w in pool._cursors]
    load_seconds = pool.cache.load_seconds + sum(c.load_seconds for c in cursors)
    if policy == "block":
        per_thread_blocks = workload.block_counts()
    else:
        per_thread_blocks = [c.loads for c in cursors] or [0] * cfg.threads

    report = MultiplyReport(
        wall_seconds=time.perf_counter() - wall0,
        phase_seconds={"plan": plan_seconds, "load": load_seconds,
                       "compute": compute_seconds, "merge": merge_seconds,
                       "write": write_seconds[0]},
        io=stats.snapshot(),
        per_thread_blocks=per_thread_blocks,
        per_thread_entries=entries_done,
        per_thread_rows=rows_done,
        output_entries=result.n_entries,
        output_rows=result.n_rows,
        output_cols=result.n_cols,
        max_row_bytes=max_row_bytes,
        plan={"capacity": plan.capacity, "block_size": plan.block_size,
              "threads": plan.threads, "alpha": plan.alpha,
              "b1_bytes": plan.b1_bytes, "b2_bytes": plan.b2_bytes,
              "bout_bytes": plan.bout_bytes, "worker_share": share},
        policy=policy,
        partial_aggregation=cfg.partial_aggregation,
        peak_staged_bytes=max((st.peak_bytes for st in stages), default=0),
        peak_cache_blocks=pool.cache.peak_blocks,
        spill_bytes_by_worker=[sw.bytes_written for sw in spills],
    )
    return result, report


class _TimedWriter:
    """Accumulates time spent appending rows to the wrapped writer."""

    def __init__(self, writer, sink):
        self._writer = writer
        self._sink = sink

    def append_row(self, row_id, cols, vals):
        t0 = time.perf_counter()
        self._writer.append_row(row_id, cols, vals)
        self._sink[0] += time.perf_counter() - t0
