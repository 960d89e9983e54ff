"""In-memory layer: budgeted buffers between the storage layer and workers.

The memory budget C is split three ways:

    former-input buffer   b * t           (one block per worker)
    output staging        ceil(alpha * max_row * t)
    latter-input cache    C minus the other two, at least one block

``max_row`` is the serialized size of the largest possible single output
row's intermediate results: max over rows i of the summed lengths of the
latter rows selected by row i's entries, clamped to the column count, at
16 bytes per entry.  Real-graph degree distributions make typical rows far
smaller, which is why scaling the staging buffer by ``alpha`` instead of
provisioning the full maximum pays off.

The latter cache evicts least-recently-used whole blocks.  The former buffer
needs no eviction: each worker holds exactly the block it is processing and
replaces it wholesale when it advances.
"""

from __future__ import annotations

import math
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .blockstore import ENTRY_BYTES, ENTRY_DT, OBJ_HEADER_BYTES
from .errors import ConfigError

INTERMEDIATE_ENTRY_BYTES = ENTRY_BYTES  # (col u64, value f64) pairs


@dataclass(frozen=True)
class BufferPlan:
    """The three buffer sizes computed from (C, b, t, alpha, max_row)."""

    capacity: int
    block_size: int
    threads: int
    alpha: float
    max_row_bytes: int
    b1_bytes: int
    b2_bytes: int
    bout_bytes: int

    @property
    def worker_share(self):
        """Static per-worker slice of the output staging buffer."""
        return self.bout_bytes // self.threads

    @property
    def b2_blocks(self):
        return self.b2_bytes // self.block_size


def plan_buffers(capacity, block_size, threads, alpha, max_row_bytes):
    """Deterministic three-way split of the memory budget.

    Rejects budgets that cannot hold the former buffer, the staging buffer,
    and at least one cached latter block, naming the smallest feasible C.
    """
    if threads < 1:
        raise ConfigError("thread count must be at least 1")
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    if max_row_bytes < 0:
        raise ConfigError("max_row must be non-negative")
    b1 = block_size * threads
    bout = math.ceil(alpha * max_row_bytes * threads)
    min_capacity = b1 + bout + block_size
    if capacity < min_capacity:
        raise ConfigError(
            f"memory budget {capacity} too small: former buffer {b1} + "
            f"output staging {bout} + one cached block {block_size} "
            f"requires at least {min_capacity} bytes",
            min_capacity=min_capacity)
    b2 = capacity - b1 - bout
    return BufferPlan(capacity=capacity, block_size=block_size, threads=threads,
                      alpha=alpha, max_row_bytes=max_row_bytes,
                      b1_bytes=b1, b2_bytes=b2, bout_bytes=bout)


class IoStats:
    """Monotonic counters for storage-memory traffic during one multiply."""

    FIELDS = ("b1_loads", "b2_loads", "b2_evictions", "spill_flush_bytes",
              "spill_read_bytes", "output_write_bytes", "spill_runs")

    def __init__(self):
        self._lock = threading.Lock()
        for f in self.FIELDS:
            setattr(self, f, 0)

    def add(self, field_name, amount=1):
        with self._lock:
            setattr(self, field_name, getattr(self, field_name) + amount)

    def snapshot(self):
        with self._lock:
            return {f: getattr(self, f) for f in self.FIELDS}


class DecodedBlock:
    """One resident block: payload bytes plus derived object positions."""

    __slots__ = ("index", "payload", "layout", "_row_cache")

    def __init__(self, index, payload, layout):
        self.index = index
        self.payload = payload
        self.layout = layout
        self._row_cache = {}

    def __len__(self):
        return len(self.layout.row_ids)

    def find(self, row_id):
        """Object position of row_id in this block, or -1."""
        ids = self.layout.row_ids
        i = int(np.searchsorted(ids, row_id))
        if i < len(ids) and ids[i] == row_id:
            return i
        return -1

    def entries_at(self, pos):
        """(cols, vals) views of the object at position pos."""
        cached = self._row_cache.get(pos)
        if cached is not None:
            return cached
        ec = int(self.layout.entry_counts[pos])
        off = int(self.layout.offsets[pos]) + OBJ_HEADER_BYTES
        ent = np.frombuffer(self.payload.data, dtype=ENTRY_DT, count=ec, offset=off)
        out = (ent["col"], ent["val"])
        self._row_cache[pos] = out
        return out

    def fragment_info(self, pos):
        return (int(self.layout.frag_index[pos]), int(self.layout.frag_count[pos]))


def _load_block(stored, block_index):
    payload, n_obj = stored.read_block_payload(block_index)
    layout = stored.block_layout(block_index)
    if n_obj != len(layout.row_ids):
        raise RuntimeError(
            f"block {block_index}: header object count {n_obj} does not match "
            f"derived layout ({len(layout.row_ids)})")
    return DecodedBlock(block_index, payload, layout)


class BlockCache:
    """Shared LRU cache of latter-matrix blocks (the B2 buffer).

    Thread safe; at most one in-flight load per block, with later requesters
    waiting on the first.  Readers hold references into evicted payloads
    safely, so eviction never invalidates a row being consumed.
    """

    def __init__(self, stored, capacity_blocks, stats, counter="b2_loads"):
        if capacity_blocks < 1:
            raise ConfigError("latter-input cache must hold at least one block")
        self.stored = stored
        self.capacity = capacity_blocks
        self.stats = stats
        self.counter = counter
        self.load_seconds = 0.0
        self.peak_blocks = 0
        self._lock = threading.Lock()
        self._blocks = OrderedDict()
        self._inflight = {}

    def fetch(self, block_index):
        while True:
            with self._lock:
                blk = self._blocks.get(block_index)
                if blk is not None:
                    self._blocks.move_to_end(block_index)
                    return blk
                ev = self._inflight.get(block_index)
                if ev is None:
                    self._inflight[block_index] = threading.Event()
                    break
            ev.wait()
        try:
            t0 = time.perf_counter()
            blk = _load_block(self.stored, block_index)
            dt = time.perf_counter() - t0
            self.stats.add(self.counter)
        except BaseException:
            with self._lock:
                self._inflight.pop(block_index).set()
            raise
        with self._lock:
            self.load_seconds += dt
            self._blocks[block_index] = blk
            self._blocks.move_to_end(block_index)
            while len(self._blocks) > self.capacity:
                self._blocks.popitem(last=False)
                self.stats.add("b2_evictions")
            self.peak_blocks = max(self.peak_blocks, len(self._blocks))
            self._inflight.pop(block_index).set()
        return blk

    def resident_blocks(self):
        with self._lock:
            return len(self._blocks)

    def resident_bytes(self):
        return self.resident_blocks() * self.stored.block_size


class BlockCursor:
    """A single-block slot of the former-input buffer, owned by one worker."""

    def __init__(self, stored, stats, counter="b1_loads"):
        self.stored = stored
        self.stats = stats
        self.counter = counter
        self.current = None
        self.loads = 0
        self.load_seconds = 0.0

    def load(self, block_index):
        if self.current is not None and self.current.index == block_index:
            return self.current
        t0 = time.perf_counter()
        self.current = _load_block(self.stored, block_index)
        self.load_seconds += time.perf_counter() - t0
        self.loads += 1
        self.stats.add(self.counter)
        return self.current


class BufferPool:
    """The in-memory layer's row service for both input matrices.

    fetch_row consults the buffer index (cache for the latter side, the
    calling worker's cursor for the former side); on a miss it requests the
    block from the storage layer, reassembling split rows transparently.
    """

    def __init__(self, former, latter, plan, stats):
        self.former = former
        self.latter = latter
        self.plan = plan
        self.stats = stats
        self.cache = BlockCache(latter, max(1, plan.b2_bytes // latter.block_size), stats)
        self._cursors = {}
        self._cursor_lock = threading.Lock()

    def former_cursor(self, worker_id):
        with self._cursor_lock:
            cur = self._cursors.get(worker_id)
            if cur is None:
                if len(self._cursors) >= self.plan.threads:
                    raise ConfigError("more workers than planned former-buffer slots")
                cur = BlockCursor(self.former, self.stats)
                self._cursors[worker_id] = cur
            return cur

    def fetch_row(self, side, row_id, worker_id=0):
        """Assembled (cols, vals) for one row of either input matrix."""
        if side == "former":
            stored = self.former
            get_block = self.former_cursor(worker_id).load
        elif side == "latter":
            stored = self.latter
            get_block = self.cache.fetch
        else:
            raise ValueError(f"side must be 'former' or 'latter', got {side!r}")
        b0 = stored.table.locate(row_id)
        blk = get_block(b0)
        pos = blk.find(row_id)
        if pos < 0:
            raise RuntimeError(f"row {row_id} missing from block {b0}")
        frag_idx, frag_cnt = blk.fragment_info(pos)
        if frag_cnt == 1:
            return blk.entries_at(pos)
        # split row: fragments sit on consecutive blocks starting at b0
        parts = [blk.entries_at(pos)]
        for f in range(1, frag_cnt):
            nb = get_block(b0 + f)
            npos = nb.find(row_id)
            if npos < 0:
                raise RuntimeError(f"fragment {f} of row {row_id} missing from "
                                   f"block {b0 + f}")
            parts.append(nb.entries_at(npos))
        return (np.concatenate([p[0] for p in parts]),
                np.concatenate([p[1] for p in parts]))


@dataclass
class StagedPartial:
    """A completed per-fragment partial result waiting in the output buffer."""

    row_id: int
    frag: int
    seq: int
    cols: np.ndarray   # uint32, ascending (aggregated) or batch-ordered (raw)
    vals: np.ndarray
    aggregated: bool = True

    @property
    def nbytes(self):
        return INTERMEDIATE_ENTRY_BYTES * len(self.cols)


class OutputStage:
    """Per-worker share of the output buffer with overflow-to-spill staging.

    A partial that fits next to the currently staged ones is kept in memory.
    One that does not triggers an overflow: the staged set plus the incoming
    partial are flushed together as one spill run.  Overflow is a normal
    signal, not an error.
    """

    def __init__(self, share_bytes, spill_sink):
        self.share = share_bytes
        self.sink = spill_sink
        self.staged = []
        self.staged_bytes = 0
        self.peak_bytes = 0
        self.overflows = 0

    def stage(self, partial):
        if len(partial.cols) == 0:
            return
        size = partial.nbytes
        if self.staged_bytes + size > self.share:
            self.overflows += 1
            self.sink.write_run(self.staged + [partial])
            self.staged = []
            self.staged_bytes = 0
            self.peak_bytes = max(self.peak_bytes, size)
            return
        self.staged.append(partial)
        self.staged_bytes += size
        self.peak_bytes = max(self.peak_bytes, self.staged_bytes)

    def flush_staged(self):
        """Force the staged set out (used before a mid-row spill so the
        worker's spill stream stays ordered by row)."""
        if self.staged:
            self.sink.write_run(self.staged)
            self.staged = []
            self.staged_bytes = 0

    def drain(self):
        out = self.staged
        self.staged = []
        self.staged_bytes = 0
        return out
