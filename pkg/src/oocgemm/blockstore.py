"""Storage layer: matrices as files of fixed-size blocks of row objects.

File format (little-endian, fixed block size ``b`` back to back):

    block  := header | payload | zero padding to b
    header := magic u32 | block_index u32 | object_count u32 |
              payload_bytes u32 | crc32(payload) u32            (20 bytes)
    object := row_id u64 | fragment_index u32 | fragment_count u32 |
              entry_count u32                                   (20 bytes)
              entry_count x (col u64 | value f64)               (16 each)

Rows are packed in ascending row id.  A row that fits the remaining payload
is appended; otherwise the block is sealed.  A row larger than a whole
payload is cut into maximal fragments across consecutive blocks.  Empty rows
are stored as zero-entry objects so the per-block (first_row, last_row)
ranges cover every row id.

A sidecar ``<path>.meta.json`` carries dimensions, entry count, block size,
the object index table, and per-row entry counts.  Packing is a pure greedy
function of (row lengths, block size), so readers re-derive every object's
offset from the sidecar instead of rescanning object headers.
"""

from __future__ import annotations

import base64
import errno
import json
import os
import struct
import threading
import zlib
from dataclasses import dataclass

import numpy as np

from .core import SparseMatrix, SparseRow
from .errors import ConfigError, FormatError, OutOfStorageError, RowNotFoundError, StorageError

BLOCK_MAGIC = 0x4B4C4231  # "1BLK"
BLOCK_HEADER_BYTES = 20
OBJ_HEADER_BYTES = 20
ENTRY_BYTES = 16
ENTRY_DT = np.dtype([("col", "<u8"), ("val", "<f8")])
# smallest block able to hold one single-entry object
MIN_BLOCK_SIZE = BLOCK_HEADER_BYTES + OBJ_HEADER_BYTES + ENTRY_BYTES
DEFAULT_BLOCK_SIZE = 1 << 20

_BLOCK_HEADER = struct.Struct("<IIIII")
_OBJ_HEADER = struct.Struct("<QIII")

META_SUFFIX = ".meta.json"
FORMAT_NAME = "oocgemm-block-matrix"
FORMAT_VERSION = 1


def _write_failed(exc, nbytes):
    if isinstance(exc, OSError) and exc.errno == errno.ENOSPC:
        return OutOfStorageError("storage full while writing block file",
                                 bytes_attempted=nbytes)
    return StorageError(f"write failed after {nbytes} bytes: {exc}")


def _tofile(arr, f):
    arr.tofile(f)


class ObjectIndexTable:
    """Per-block (first_row, last_row) ranges, ordered and pinned in memory."""

    def __init__(self, first, last):
        self.first = np.asarray(first, dtype=np.int64)
        self.last = np.asarray(last, dtype=np.int64)
        if len(self.first) != len(self.last):
            raise ValueError("table arrays must have equal length")
        if (self.first > self.last).any():
            raise ValueError("table range with first_row > last_row")
        if len(self.first) > 1 and (np.diff(self.first) < 0).any():
            raise ValueError("table first_row values must be non-decreasing")

    def __len__(self):
        return len(self.first)

    def locate(self, row_id):
        """Smallest block index whose range contains row_id (fragment 0's block).

        Binary search over the sorted ranges; behaviourally identical to a
        linear scan of the table.
        """
        i = int(np.searchsorted(self.last, row_id, side="left"))
        if i < len(self.first) and self.first[i] <= row_id <= self.last[i]:
            return i
        raise RowNotFoundError(f"row {row_id} not covered by the object index table")

    def locate_linear(self, row_id):
        for i in range(len(self.first)):
            if self.first[i] <= row_id <= self.last[i]:
                return i
        raise RowNotFoundError(f"row {row_id} not covered by the object index table")

    def serialized_bytes(self):
        """Size of the table's JSON serialization inside the sidecar."""
        return len(json.dumps({"table_first": self.first.tolist(),
                               "table_last": self.last.tolist()}))


def locate_block(row_id, table):
    return table.locate(row_id)


@dataclass
class RowObject:
    """One decoded object: a whole row or one fragment of an oversized row."""

    row_id: int
    fragment_index: int
    fragment_count: int
    cols: np.ndarray
    vals: np.ndarray


@dataclass
class _Placement:
    block: int
    row_id: int
    frag_index: int
    frag_count: int
    entry_count: int
    offset: int       # payload-relative byte offset of the object header
    entry_start: int  # index into the matrix-wide row-major entry stream


@dataclass
class _BlockLayout:
    """Columnar view of one block's placements."""

    row_ids: np.ndarray
    frag_index: np.ndarray
    frag_count: np.ndarray
    entry_counts: np.ndarray
    offsets: np.ndarray


class LayoutBuilder:
    """Incremental greedy packer; the single source of truth for placement.

    ``step`` returns the placements for one row.  Readers reconstruct the
    identical layout from the sidecar row lengths via ``plan_layout``.
    """

    def __init__(self, block_size):
        if block_size < MIN_BLOCK_SIZE:
            raise ConfigError(
                f"block size {block_size} below minimum {MIN_BLOCK_SIZE} "
                "(header plus one single-entry object)")
        self.block_size = block_size
        self.payload_cap = block_size - BLOCK_HEADER_BYTES
        self.frag_cap = (self.payload_cap - OBJ_HEADER_BYTES) // ENTRY_BYTES
        self.block = 0
        self.offset = 0
        self.entry_pos = 0
        self.started = False  # True once any object has been placed

    def step(self, row_id, length):
        placements = []
        size = OBJ_HEADER_BYTES + ENTRY_BYTES * length
        if size <= self.payload_cap:
            if self.started and self.offset + size > self.payload_cap:
                self.block += 1
                self.offset = 0
            placements.append(_Placement(self.block, row_id, 0, 1, length,
                                         self.offset, self.entry_pos))
            self.offset += size
            self.started = True
            self.entry_pos += length
            return placements
        # oversized row: maximal fragments on consecutive fresh blocks
        if self.started and self.offset > 0:
            self.block += 1
            self.offset = 0
        frag_count = -(-length // self.frag_cap)
        remaining = length
        for f in range(frag_count):
            ec = min(self.frag_cap, remaining)
            placements.append(_Placement(self.block, row_id, f, frag_count, ec,
                                         0, self.entry_pos))
            remaining -= ec
            self.entry_pos += ec
            if f < frag_count - 1:
                self.block += 1
            else:
                self.offset = OBJ_HEADER_BYTES + ENTRY_BYTES * ec
        self.started = True
        return placements

    @property
    def n_blocks(self):
        return self.block + 1 if self.started else 0


def plan_layout(lengths, block_size):
    """Placements for a whole matrix, grouped per block.

    Returns (blocks, table) where blocks is a list of per-block placement
    lists and table is the ObjectIndexTable.
    """
    builder = LayoutBuilder(block_size)
    blocks = []
    for row_id, length in enumerate(np.asarray(lengths).tolist()):
        for p in builder.step(row_id, length):
            while len(blocks) <= p.block:
                blocks.append([])
            blocks[p.block].append(p)
    first = [b[0].row_id for b in blocks]
    last = [b[-1].row_id for b in blocks]
    return blocks, ObjectIndexTable(first, last)


def _encode_block(block_index, objects, payload_cap):
    """Assemble one block image from (placement, cols, vals) triples."""
    payload = np.zeros(payload_cap, dtype=np.uint8)
    used = 0
    mv = payload.data
    for p, cols, vals in objects:
        _OBJ_HEADER.pack_into(mv, p.offset, p.row_id, p.frag_index,
                              p.frag_count, p.entry_count)
        if p.entry_count:
            ent = np.empty(p.entry_count, dtype=ENTRY_DT)
            ent["col"] = cols
            ent["val"] = vals
            start = p.offset + OBJ_HEADER_BYTES
            payload[start:start + p.entry_count * ENTRY_BYTES] = ent.view(np.uint8)
        used = max(used, p.offset + OBJ_HEADER_BYTES + p.entry_count * ENTRY_BYTES)
    crc = zlib.crc32(payload[:used].tobytes())
    block = np.zeros(BLOCK_HEADER_BYTES + payload_cap, dtype=np.uint8)
    _BLOCK_HEADER.pack_into(block.data, 0, BLOCK_MAGIC, block_index,
                            len(objects), used, crc)
    block[BLOCK_HEADER_BYTES:] = payload
    return block


def _write_sidecar(path, n_rows, n_cols, n_entries, block_size, table, lengths):
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_rows": int(n_rows),
        "n_cols": int(n_cols),
        "n_entries": int(n_entries),
        "block_size": int(block_size),
        "n_blocks": len(table),
        "table_first": table.first.tolist(),
        "table_last": table.last.tolist(),
        "row_lengths_b64": base64.b64encode(
            np.asarray(lengths, dtype="<u4").tobytes()).decode("ascii"),
    }
    tmp = str(path) + META_SUFFIX + ".tmp"
    try:
        with open(tmp, "w") as f:
            json.dump(meta, f)
        os.replace(tmp, str(path) + META_SUFFIX)
    except OSError as e:
        raise _write_failed(e, 0) from e


def pack_matrix(matrix, block_size, path):
    """Serialize a SparseMatrix into a block file plus metadata sidecar."""
    writer = OutputWriter(path, block_size, matrix.n_rows, matrix.n_cols)
    for i in range(matrix.n_rows):
        cols, vals = matrix.row_arrays(i)
        writer.append_row(i, cols, vals)
    return writer.finalize()


class OutputWriter:
    """Streaming block-file writer; rows must arrive in ascending row id.

    Gaps are filled with empty rows so the stored matrix covers every row id;
    ``finalize`` pads trailing empty rows up to ``n_rows``.
    """

    def __init__(self, path, block_size, n_rows, n_cols, flush_bytes=32 << 20):
        self.path = str(path)
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.builder = LayoutBuilder(block_size)
        self.block_size = block_size
        self._lengths = []
        self._first = []
        self._last = []
        self._next_row = 0
        self._n_entries = 0
        self._finalized = False
        # the block currently being filled: list of (placement, cols, vals)
        self._open_block = None
        self._open_objects = []
        self._pending = []        # sealed block images not yet written
        self._pending_bytes = 0
        self._flush_bytes = flush_bytes
        self.bytes_written = 0
        self.write_count = 0
        try:
            self._file = open(self.path, "wb")
        except OSError as e:
            raise StorageError(f"cannot open {self.path} for writing: {e}") from e

    def _seal_open_block(self):
        if self._open_block is None:
            return
        image = _encode_block(self._open_block, self._open_objects,
                              self.builder.payload_cap)
        self._pending.append(image)
        self._pending_bytes += len(image)
        self._open_block = None
        self._open_objects = []
        if self._pending_bytes >= self._flush_bytes:
            self._flush_pending()

    def _flush_pending(self):
        if not self._pending:
            return
        buf = self._pending[0] if len(self._pending) == 1 else np.concatenate(self._pending)
        try:
            _tofile(buf, self._file)
        except OSError as e:
            raise _write_failed(e, self.bytes_written + len(buf)) from e
        self.bytes_written += len(buf)
        self.write_count += len(self._pending)
        self._pending = []
        self._pending_bytes = 0

    def append_row(self, row_id, cols, vals):
        if self._finalized:
            raise StorageError("writer already finalized")
        if row_id < self._next_row:
            raise ValueError(f"rows must be appended in ascending order: "
                             f"got {row_id} after {self._next_row - 1}")
        if row_id >= self.n_rows:
            raise ValueError(f"row id {row_id} out of range for {self.n_rows} rows")
        while self._next_row < row_id:
            self._place(self._next_row, np.empty(0, dtype=np.uint64), np.empty(0))
            self._next_row += 1
        self._place(row_id, cols, vals)
        self._next_row = row_id + 1

    def _place(self, row_id, cols, vals):
        length = len(cols)
        row_start = self._n_entries
        self._lengths.append(length)
        self._n_entries += length
        for p in self.builder.step(row_id, length):
            if p.block != self._open_block:
                self._seal_open_block()
                self._open_block = p.block
            lo = p.entry_start - row_start
            self._open_objects.append((p, cols[lo:lo + p.entry_count],
                                       vals[lo:lo + p.entry_count]))
            if p.block == len(self._first):
                self._first.append(row_id)
                self._last.append(row_id)
            else:
                self._last[p.block] = row_id

    def finalize(self):
        """Seal the last block, write the sidecar, and open the result."""
        if self._finalized:
            raise StorageError("writer already finalized")
        while self._next_row < self.n_rows:
            self._place(self._next_row, np.empty(0, dtype=np.uint64), np.empty(0))
            self._next_row += 1
        self._seal_open_block()
        self._flush_pending()
        self._file.close()
        self._finalized = True
        table = ObjectIndexTable(self._first, self._last)
        _write_sidecar(self.path, self.n_rows, self.n_cols, self._n_entries,
                       self.block_size, table, self._lengths)
        sm = StoredMatrix.open(self.path)
        sm.write_count = self.write_count
        return sm

    def abort(self):
        if not self._finalized:
            self._file.close()
            self._finalized = True


class StoredMatrix:
    """An on-disk matrix: block file, pinned object index table, metadata.

    Concurrent readers are permitted; the I/O counters are updated under a
    lock so totals stay exact.  Checksums are verified the first time each
    block is read by this handle.
    """

    def __init__(self, path, meta):
        self.path = str(path)
        self.n_rows = meta["n_rows"]
        self.n_cols = meta["n_cols"]
        self.n_entries = meta["n_entries"]
        self.block_size = meta["block_size"]
        self.n_blocks = meta["n_blocks"]
        self.table = ObjectIndexTable(meta["table_first"], meta["table_last"])
        self.row_lengths = np.frombuffer(
            base64.b64decode(meta["row_lengths_b64"]), dtype="<u4").astype(np.int64)
        if len(self.table) != self.n_blocks:
            raise FormatError("object index table length does not match block count")
        if len(self.row_lengths) != self.n_rows:
            raise FormatError("row length table does not match row count")
        self.read_count = 0
        self.write_count = 0
        self._lock = threading.Lock()
        self._fd = os.open(self.path, os.O_RDONLY)
        self._verified = set()
        self._layout = None
        self._layout_arrays = {}

    @classmethod
    def open(cls, path):
        try:
            with open(str(path) + META_SUFFIX) as f:
                meta = json.load(f)
        except OSError as e:
            raise StorageError(f"cannot open sidecar for {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise FormatError(f"corrupt sidecar for {path}: {e}") from e
        if meta.get("format") != FORMAT_NAME:
            raise FormatError(f"{path}: not a {FORMAT_NAME} sidecar")
        expected = meta["n_blocks"] * meta["block_size"]
        actual = os.path.getsize(path)
        if actual != expected:
            raise FormatError(f"{path}: file size {actual} != {expected} "
                              f"({meta['n_blocks']} blocks of {meta['block_size']})")
        return cls(path, meta)

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def layout(self):
        if self._layout is None:
            self._layout = plan_layout(self.row_lengths, self.block_size)[0]
        return self._layout

    def block_layout(self, block_index):
        """Array view of one block's object placements (derived, cached).

        Units re-run the same greedy packing over the sidecar row lengths, so
        no header scan is needed to find an object inside a block.
        """
        cached = self._layout_arrays.get(block_index)
        if cached is not None:
            return cached
        ps = self.layout[block_index]
        arrays = _BlockLayout(
            row_ids=np.fromiter((p.row_id for p in ps), np.int64, len(ps)),
            frag_index=np.fromiter((p.frag_index for p in ps), np.int32, len(ps)),
            frag_count=np.fromiter((p.frag_count for p in ps), np.int32, len(ps)),
            entry_counts=np.fromiter((p.entry_count for p in ps), np.int64, len(ps)),
            offsets=np.fromiter((p.offset for p in ps), np.int64, len(ps)),
        )
        self._layout_arrays[block_index] = arrays
        return arrays

    def file_bytes(self):
        return self.n_blocks * self.block_size

    def _count_read(self):
        with self._lock:
            self.read_count += 1

    def read_block_payload(self, block_index, verify=None):
        """Raw payload array of one block (header checked, one CRC pass per block)."""
        if not 0 <= block_index < self.n_blocks:
            raise ValueError(f"block index {block_index} out of range "
                             f"(matrix has {self.n_blocks} blocks)")
        raw = os.pread(self._fd, self.block_size, block_index * self.block_size)
        if len(raw) != self.block_size:
            raise FormatError(f"short read of block {block_index}")
        magic, idx, n_obj, payload_bytes, crc = _BLOCK_HEADER.unpack_from(raw, 0)
        if magic != BLOCK_MAGIC:
            raise FormatError(f"block {block_index}: bad magic {magic:#x}")
        if idx != block_index:
            raise FormatError(f"block {block_index}: header claims index {idx}")
        if payload_bytes > self.block_size - BLOCK_HEADER_BYTES:
            raise FormatError(f"block {block_index}: payload length out of range")
        if verify is None:
            verify = block_index not in self._verified
        if verify:
            actual = zlib.crc32(raw[BLOCK_HEADER_BYTES:BLOCK_HEADER_BYTES + payload_bytes])
            if actual != crc:
                raise FormatError(f"block {block_index}: checksum mismatch")
            self._verified.add(block_index)
        self._count_read()
        return np.frombuffer(raw, dtype=np.uint8, offset=BLOCK_HEADER_BYTES), n_obj

    def read_block(self, block_index):
        """Decode one block into RowObjects by scanning its object headers."""
        payload, n_obj = self.read_block_payload(block_index, verify=True)
        objects = []
        off = 0
        buf = payload.tobytes()
        for _ in range(n_obj):
            row_id, frag_idx, frag_cnt, ec = _OBJ_HEADER.unpack_from(buf, off)
            ent = np.frombuffer(buf, dtype=ENTRY_DT, count=ec, offset=off + OBJ_HEADER_BYTES)
            objects.append(RowObject(row_id, frag_idx, frag_cnt,
                                     ent["col"].astype(np.int64), ent["val"].copy()))
            off += OBJ_HEADER_BYTES + ENTRY_BYTES * ec
        return objects

    def unpack(self):
        """Rebuild the full SparseMatrix; intended for test-scale data."""
        rows = {}
        for b in range(self.n_blocks):
            for obj in self.read_block(b):
                rows.setdefault(obj.row_id, []).append(obj)
        parts = []
        for i in range(self.n_rows):
            frags = rows.get(i)
            if not frags:
                parts.append((np.empty(0, dtype=np.int64), np.empty(0)))
                continue
            frags.sort(key=lambda o: o.fragment_index)
            if frags[0].fragment_count != len(frags):
                raise FormatError(f"row {i}: expected {frags[0].fragment_count} "
                                  f"fragments, found {len(frags)}")
            parts.append((np.concatenate([f.cols for f in frags]),
                          np.concatenate([f.vals for f in frags])))
        return SparseMatrix.from_rows(self.n_rows, self.n_cols, parts)

    def fetch_row_direct(self, row_id):
        """Row straight from the file, bypassing caches (oracle for coherence tests)."""
        b0 = self.table.locate(row_id)
        pieces = []
        for b in range(b0, self.n_blocks):
            found = [o for o in self.read_block(b) if o.row_id == row_id]
            if not found:
                break
            pieces.extend(found)
            if pieces[-1].fragment_index == pieces[-1].fragment_count - 1:
                break
        pieces.sort(key=lambda o: o.fragment_index)
        if not pieces:
            raise RowNotFoundError(f"row {row_id} not found")
        return (np.concatenate([p.cols for p in pieces]),
                np.concatenate([p.vals for p in pieces]))

    def __repr__(self):
        return (f"StoredMatrix({self.n_rows}x{self.n_cols}, nnz={self.n_entries}, "
                f"{self.n_blocks} blocks of {self.block_size}B at {self.path!r})")
