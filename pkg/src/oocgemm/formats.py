"""Dataset ingestion and export: Matrix Market coordinate files and
whitespace edge lists, bridging public graph datasets into the block store.

Matrix Market support covers coordinate bodies with real, integer, or
pattern fields and general or symmetric symmetry.  Pattern entries take
``value_default``; symmetric bodies are expanded to both triangles when
``symmetrize`` is set.  Duplicate coordinates are summed (the assembled-
matrix convention) and explicit zeros are dropped on ingest by default.

Edge lists are ``src dst [weight]`` lines with ``#`` comments; ids are taken
literally, so the matrix is square with dimension max id + 1.

Files larger than memory go through ``ingest_file``: chunks are parsed,
sorted, spilled as temporary runs, and merged into the block writer.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .blockstore import DEFAULT_BLOCK_SIZE, OutputWriter
from .core import SparseMatrix
from .engine import SpillStream, SpillWriter, merge_spills
from .buffers import IoStats, StagedPartial
from .errors import FormatError

MM_HEADER_PREFIX = "%%matrixmarket"


@dataclass
class IngestOptions:
    one_indexed: bool = False          # edge lists only; MM is 1-indexed by format
    symmetrize: bool = False
    drop_explicit_zeros: bool = True
    value_default: float = 1.0
    transpose: bool = False


def _open_text(source):
    if hasattr(source, "read"):
        return source, False
    return open(source, "r"), True


class _CooChunks:
    """Accumulates coordinate triples as scalar lists."""

    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, r, c, v):
        self.rows.append(r)
        self.cols.append(c)
        self.vals.append(v)

    def arrays(self):
        return (np.asarray(self.rows, dtype=np.int64),
                np.asarray(self.cols, dtype=np.int64),
                np.asarray(self.vals, dtype=np.float64))


def _apply_options(rows, cols, vals, opts, shift):
    if shift:
        rows = rows - 1
        cols = cols - 1
    if opts.transpose:
        rows, cols = cols, rows
    if opts.drop_explicit_zeros and len(vals):
        keep = vals != 0.0
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
    return rows, cols, vals


def parse_matrix_market(source, opts=None):
    """Parse a Matrix Market coordinate body into a SparseMatrix."""
    opts = opts or IngestOptions()
    f, owned = _open_text(source)
    try:
        header = f.readline()
        tokens = header.strip().lower().split()
        if len(tokens) < 4 or tokens[0] != "%%matrixmarket" or tokens[1] != "matrix":
            raise FormatError("missing '%%MatrixMarket matrix' header", line=1)
        if tokens[2] != "coordinate":
            raise FormatError(f"unsupported layout {tokens[2]!r} "
                              "(only coordinate bodies are supported)", line=1)
        value_type = tokens[3]
        if value_type not in ("real", "integer", "pattern"):
            raise FormatError(f"unsupported field type {value_type!r}", line=1)
        symmetry = tokens[4] if len(tokens) > 4 else "general"
        if symmetry not in ("general", "symmetric"):
            raise FormatError(f"unsupported symmetry {symmetry!r}", line=1)
        pattern = value_type == "pattern"

        lineno = 1
        dims = None
        n_rows = n_cols = declared = 0
        chunks = _CooChunks()
        count = 0
        for raw in f:
            lineno += 1
            line = raw.strip()
            if not line or line.startswith("%"):
                continue
            parts = line.split()
            if dims is None:
                if len(parts) != 3:
                    raise FormatError("size line must be 'rows cols entries'",
                                      line=lineno)
                try:
                    n_rows, n_cols, declared = (int(p) for p in parts)
                except ValueError:
                    raise FormatError("non-integer size line", line=lineno) from None
                dims = (n_rows, n_cols)
                continue
            want = 2 if pattern else 3
            if len(parts) < want:
                raise FormatError(f"expected {want} fields, got {len(parts)}",
                                  line=lineno)
            try:
                i, j = int(parts[0]), int(parts[1])
                v = opts.value_default if pattern else float(parts[2])
            except ValueError:
                raise FormatError(f"non-numeric coordinate entry {line!r}",
                                  line=lineno) from None
            if not (1 <= i <= n_rows and 1 <= j <= n_cols):
                raise FormatError(f"coordinate ({i}, {j}) outside declared "
                                  f"{n_rows}x{n_cols}", line=lineno)
            chunks.add(i, j, v)
            count += 1
            if symmetry == "symmetric" and opts.symmetrize and i != j:
                chunks.add(j, i, v)
        if dims is None:
            raise FormatError("missing size line", line=lineno)
        if count != declared:
            raise FormatError(f"declared {declared} entries, found {count}",
                              line=lineno)
        rows, cols, vals = chunks.arrays()
        if opts.transpose:
            n_rows, n_cols = n_cols, n_rows
        rows, cols, vals = _apply_options(rows, cols, vals, opts, shift=True)
        return SparseMatrix.from_coo(n_rows, n_cols, rows, cols, vals,
                                     drop_zeros=opts.drop_explicit_zeros)
    finally:
        if owned:
            f.close()


def parse_edge_list(source, opts=None):
    """Parse 'src dst [weight]' lines; dimensions are max id + 1."""
    opts = opts or IngestOptions()
    f, owned = _open_text(source)
    try:
        chunks = _CooChunks()
        lineno = 0
        max_id = -1
        for raw in f:
            lineno += 1
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise FormatError("edge line needs at least 'src dst'", line=lineno)
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise FormatError(f"non-integer node id in {line!r}",
                                  line=lineno) from None
            try:
                v = float(parts[2]) if len(parts) > 2 else 1.0
            except ValueError:
                raise FormatError(f"non-numeric weight in {line!r}",
                                  line=lineno) from None
            if opts.one_indexed:
                i, j = i - 1, j - 1
            if i < 0 or j < 0:
                raise FormatError(f"negative node id in {line!r}", line=lineno)
            chunks.add(i, j, v)
            max_id = max(max_id, i, j)
            if opts.symmetrize and i != j:
                chunks.add(j, i, v)
        n = max_id + 1
        rows, cols, vals = chunks.arrays()
        rows, cols, vals = _apply_options(rows, cols, vals, opts, shift=False)
        return SparseMatrix.from_coo(n, n, rows, cols, vals,
                                     drop_zeros=opts.drop_explicit_zeros)
    finally:
        if owned:
            f.close()


def export_coordinate(matrix, stream):
    """Write Matrix Market coordinate real general, entries sorted (row, col)."""
    stream.write("%%MatrixMarket matrix coordinate real general\n")
    stream.write(f"{matrix.n_rows} {matrix.n_cols} {matrix.nnz}\n")
    for i in range(matrix.n_rows):
        cols, vals = matrix.row_arrays(i)
        for c, v in zip(cols.tolist(), vals.tolist()):
            stream.write(f"{i + 1} {c + 1} {v:.17g}\n")


def export_edge_list(matrix, stream):
    """Write 'src dst weight' lines, sorted (row, col), 0-indexed."""
    stream.write(f"# {matrix.n_rows} x {matrix.n_cols}, {matrix.nnz} entries\n")
    for i in range(matrix.n_rows):
        cols, vals = matrix.row_arrays(i)
        for c, v in zip(cols.tolist(), vals.tolist()):
            stream.write(f"{i} {c} {v:.17g}\n")


def sniff_format(path):
    """'matrixmarket' or 'edgelist' by inspecting the first line."""
    with open(path, "r") as f:
        first = f.readline().strip().lower()
    return "matrixmarket" if first.startswith(MM_HEADER_PREFIX) else "edgelist"


# ---------------------------------------------------------------------------
# streaming ingestion for files larger than memory
# ---------------------------------------------------------------------------

def _edge_line_triples(f, opts, start_line=0):
    lineno = start_line
    for raw in f:
        lineno += 1
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise FormatError("edge line needs at least 'src dst'", line=lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
            v = float(parts[2]) if len(parts) > 2 else 1.0
        except ValueError:
            raise FormatError(f"bad edge line {line!r}", line=lineno) from None
        if opts.one_indexed:
            i, j = i - 1, j - 1
        yield i, j, v
        if opts.symmetrize and i != j:
            yield j, i, v


def ingest_file(path, out_path, opts=None, block_size=DEFAULT_BLOCK_SIZE,
                chunk_entries=4_000_000, fmt=None):
    """Stream a text dataset into a stored matrix with bounded memory.

    Chunks of ``chunk_entries`` triples are sorted by (row, col), partially
    summed, and spilled as sorted runs; a k-way merge feeds the block
    writer.  Small files short-circuit through the in-memory parser.
    """
    opts = opts or IngestOptions()
    fmt = fmt or sniff_format(path)
    if fmt == "matrixmarket":
        # header gives exact dimensions; chunked path below covers edge lists,
        # whose dimensions need the full scan anyway
        m = parse_matrix_market(path, opts)
        from .blockstore import pack_matrix
        return pack_matrix(m, block_size, out_path)
    if fmt != "edgelist":
        raise FormatError(f"unknown ingest format {fmt!r}")

    stats = IoStats()
    tmpdir = tempfile.mkdtemp(prefix="ingest-",
                              dir=os.path.dirname(os.path.abspath(out_path)) or ".")
    # one sorted run file per chunk: rows are monotonic inside a chunk only
    chunk_paths = []
    max_id = -1
    buf_r, buf_c, buf_v = [], [], []
    n_buf = 0

    def flush_chunk():
        nonlocal buf_r, buf_c, buf_v, n_buf
        if not n_buf:
            return
        r = np.asarray(buf_r, dtype=np.int64)
        c = np.asarray(buf_c, dtype=np.int64)
        v = np.asarray(buf_v, dtype=np.float64)
        order = np.lexsort((c, r))
        r, c, v = r[order], c[order], v[order]
        # partial in-chunk aggregation keeps runs small
        boundary = np.concatenate(([True], (np.diff(r) != 0) | (np.diff(c) != 0)))
        starts = np.flatnonzero(boundary)
        rr, cc = r[starts], c[starts]
        vv = np.add.reduceat(v, starts)
        seq = len(chunk_paths)
        groups = []
        row_breaks = np.concatenate((np.flatnonzero(np.diff(rr)) + 1, [len(rr)]))
        lo = 0
        for hi in row_breaks.tolist():
            groups.append(StagedPartial(int(rr[lo]), 0, seq,
                                        cc[lo:hi].astype(np.uint32), vv[lo:hi],
                                        aggregated=True))
            lo = hi
        spill = SpillWriter(os.path.join(tmpdir, f"chunk-{seq}.spill"), stats, None)
        spill.write_run(groups)
        spill.close()
        chunk_paths.append(spill.path)
        buf_r, buf_c, buf_v = [], [], []
        n_buf = 0

    try:
        with open(path, "r") as f:
            for i, j, v in _edge_line_triples(f, opts):
                if opts.transpose:
                    i, j = j, i
                if i < 0 or j < 0:
                    raise FormatError(f"negative node id ({i}, {j})")
                if opts.drop_explicit_zeros and v == 0.0:
                    continue
                buf_r.append(i)
                buf_c.append(j)
                buf_v.append(v)
                max_id = max(max_id, i, j)
                n_buf += 1
                if n_buf >= chunk_entries:
                    flush_chunk()
        flush_chunk()
        n = max_id + 1
        writer = OutputWriter(out_path, block_size, n, n)
        merge_spills(chunk_paths, [], _ZeroDropper(writer, opts.drop_explicit_zeros), n)
        return writer.finalize()
    finally:
        for p in chunk_paths:
            try:
                os.unlink(p)
            except OSError:
                pass
        try:
            os.rmdir(tmpdir)
        except OSError:
            pass


class _ZeroDropper:
    """Strips summed-to-zero entries on the way into the writer (ingest rule)."""

    def __init__(self, writer, enabled):
        self._writer = writer
        self._enabled = enabled

    def append_row(self, row_id, cols, vals):
        if self._enabled and len(vals):
            keep = vals != 0.0
            cols, vals = cols[keep], vals[keep]
        self._writer.append_row(row_id, cols, vals)
