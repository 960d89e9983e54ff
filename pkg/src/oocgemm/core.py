"""In-memory sparse matrices and the row-scaled product primitive.

A sparse matrix is held in compressed row form (``indptr``/``cols``/``vals``)
so every row is a pair of contiguous array slices.  Output values of exactly
0.0 produced by cancellation are kept: the nonzero pattern of a product is
then a function of the input patterns alone, which lets the engine assert
bit-identical outputs across memory caps and thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

# Column ids must pack into 32 bits next to a batch index for the sort-based
# aggregation kernel; matrices wider than this are rejected at construction.
MAX_INDEX = 2**32 - 1

_COL = np.int64
_VAL = np.float64


@dataclass
class SparseRow:
    """One matrix row: parallel arrays of strictly increasing column ids and values."""

    row_id: int
    cols: np.ndarray
    vals: np.ndarray

    @classmethod
    def from_pairs(cls, row_id, pairs):
        cols = np.asarray([c for c, _ in pairs], dtype=_COL)
        vals = np.asarray([v for _, v in pairs], dtype=_VAL)
        return cls(row_id, cols, vals)

    def pairs(self):
        return list(zip(self.cols.tolist(), self.vals.tolist()))

    @property
    def nnz(self):
        return len(self.cols)

    def validate(self, n_cols=None):
        if len(self.cols) != len(self.vals):
            raise ValueError("cols and vals length mismatch")
        if len(self.cols) > 1 and not (np.diff(self.cols) > 0).all():
            raise ValueError(f"row {self.row_id}: columns not strictly increasing")
        if len(self.cols) and self.cols[0] < 0:
            raise ValueError(f"row {self.row_id}: negative column id")
        if n_cols is not None and len(self.cols) and self.cols[-1] >= n_cols:
            raise ValueError(f"row {self.row_id}: column id >= {n_cols}")


class SparseMatrix:
    """Row-major sparse matrix over 64-bit reals (CSR storage).

    Rows cover ids ``0..n_rows-1`` exactly once; empty rows are represented
    by empty slices.  Instances are immutable by convention and safe to share
    across threads.
    """

    def __init__(self, n_rows, n_cols, indptr, cols, vals, validate=True):
        if n_rows < 0 or n_cols < 0:
            raise ValueError("negative dimension")
        if n_cols > MAX_INDEX or n_rows > MAX_INDEX:
            raise ValueError(f"dimension exceeds supported maximum {MAX_INDEX}")
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=_COL)
        self.vals = np.asarray(vals, dtype=_VAL)
        if validate:
            self._validate()

    def _validate(self):
        if len(self.indptr) != self.n_rows + 1:
            raise ValueError("indptr length must be n_rows + 1")
        if self.indptr[0] != 0 or self.indptr[-1] != len(self.cols):
            raise ValueError("indptr endpoints inconsistent with entry count")
        if (np.diff(self.indptr) < 0).any():
            raise ValueError("indptr must be non-decreasing")
        if len(self.cols) != len(self.vals):
            raise ValueError("cols and vals length mismatch")
        if len(self.cols):
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise ValueError("column id out of range")
            # strictly increasing inside each row
            same_row = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
            if len(same_row) > 1:
                adjacent = same_row[1:] == same_row[:-1]
                if not (np.diff(self.cols)[adjacent] > 0).all():
                    raise ValueError("columns not strictly increasing within a row")

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_rows(cls, n_rows, n_cols, rows, validate=True):
        """Build from an iterable of (cols, vals) pairs or SparseRows, ascending by row."""
        parts_c, parts_v, lengths = [], [], []
        for r in rows:
            if isinstance(r, SparseRow):
                c, v = r.cols, r.vals
            else:
                c, v = r
            parts_c.append(np.asarray(c, dtype=_COL))
            parts_v.append(np.asarray(v, dtype=_VAL))
            lengths.append(len(parts_c[-1]))
        if len(lengths) != n_rows:
            raise ValueError(f"expected {n_rows} rows, got {len(lengths)}")
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        cols = np.concatenate(parts_c) if parts_c else np.empty(0, dtype=_COL)
        vals = np.concatenate(parts_v) if parts_v else np.empty(0, dtype=_VAL)
        return cls(n_rows, n_cols, indptr, cols, vals, validate=validate)

    @classmethod
    def from_coo(cls, n_rows, n_cols, rows, cols, vals, drop_zeros=True):
        """Assemble from coordinate triples; duplicate coordinates are summed.

        ``drop_zeros`` removes entries whose assembled value is exactly zero,
        which is the ingestion rule: stored inputs never carry explicit zeros.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=_VAL)
        if len(rows):
            if rows.min() < 0 or rows.max() >= n_rows:
                raise ValueError("row id out of range")
            if cols.min() < 0 or cols.max() >= n_cols:
                raise ValueError("column id out of range")
            key = rows.astype(np.uint64) * np.uint64(max(n_cols, 1)) + cols.astype(np.uint64)
            order = np.argsort(key, kind="stable")
            key = key[order]
            vals = vals[order]
            uniq, starts = np.unique(key, return_index=True)
            sums = np.add.reduceat(vals, starts) if len(vals) else vals
            rows = (uniq // np.uint64(max(n_cols, 1))).astype(np.int64)
            cols = (uniq % np.uint64(max(n_cols, 1))).astype(np.int64)
            vals = sums
            if drop_zeros:
                keep = vals != 0.0
                rows, cols, vals = rows[keep], cols[keep], vals[keep]
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
        return cls(n_rows, n_cols, indptr, cols, vals, validate=False)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    @classmethod
    def empty(cls, n_rows, n_cols):
        return cls(n_rows, n_cols, np.zeros(n_rows + 1, dtype=np.int64),
                   np.empty(0, dtype=_COL), np.empty(0, dtype=_VAL))

    # -- access ------------------------------------------------------------

    @property
    def nnz(self):
        return len(self.cols)

    def row_arrays(self, i):
        """Views of row i's (cols, vals)."""
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.cols[lo:hi], self.vals[lo:hi]

    def row(self, i):
        c, v = self.row_arrays(i)
        return SparseRow(i, c, v)

    def iter_rows(self):
        for i in range(self.n_rows):
            yield self.row(i)

    def row_lengths(self):
        return np.diff(self.indptr)

    def to_dense(self):
        out = np.zeros((self.n_rows, self.n_cols))
        row_of = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        out[row_of, self.cols] = self.vals
        return out

    def transpose(self):
        row_of = np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.indptr))
        return SparseMatrix.from_coo(self.n_cols, self.n_rows, self.cols, row_of,
                                     self.vals, drop_zeros=False)

    # -- comparison --------------------------------------------------------

    def equals(self, other):
        """Entry-exact equality including retained zeros and structure."""
        return (self.n_rows == other.n_rows and self.n_cols == other.n_cols
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.cols, other.cols)
                and np.array_equal(self.vals, other.vals))

    def allclose(self, other, tol=1e-9):
        """Same structure, values within absolute tolerance per entry."""
        return (self.n_rows == other.n_rows and self.n_cols == other.n_cols
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.cols, other.cols)
                and (np.abs(self.vals - other.vals) <= tol).all())

    def __repr__(self):
        return f"SparseMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz})"


# ---------------------------------------------------------------------------
# aggregation kernel
# ---------------------------------------------------------------------------

def merge_entry_batches(batches, n_cols=None):
    """Column-wise sum a sequence of (scale, cols, vals) term batches.

    Returns (cols, vals) with cols uint32 strictly increasing.  Batch order is
    preserved for equal columns, so summation order per column follows the
    order terms were produced.  Entries whose sum is exactly zero are kept.

    Two equivalent strategies: a dense scatter-add when the batch volume
    rivals the column range, otherwise pack each column id above a running
    element index into one 64-bit key and value-sort (argsort is an order of
    magnitude slower than value sort for this).
    """
    total = sum(len(b[1]) for b in batches)
    if total == 0:
        return np.empty(0, dtype=np.uint32), np.empty(0, dtype=_VAL)
    cols = np.empty(total, dtype=np.uint32)
    vals = np.empty(total, dtype=_VAL)
    pos = 0
    for s, c, v in batches:
        n = len(c)
        cols[pos:pos + n] = c
        if s == 1.0:
            vals[pos:pos + n] = v
        else:
            np.multiply(v, s, out=vals[pos:pos + n])
        pos += n

    if n_cols is not None and total >= n_cols // 4 and n_cols <= MAX_INDEX:
        sums = np.bincount(cols, weights=vals, minlength=n_cols)
        touched = np.flatnonzero(np.bincount(cols, minlength=n_cols))
        return touched.astype(np.uint32), sums[touched]

    key = (cols.astype(np.uint64) << np.uint64(32)) | np.arange(total, dtype=np.uint64)
    key.sort()
    perm = (key & np.uint64(0xFFFFFFFF)).astype(np.intp)
    cols_sorted = (key >> np.uint64(32)).astype(np.uint32)
    vals_sorted = vals[perm]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(cols_sorted)) + 1))
    return cols_sorted[starts], np.add.reduceat(vals_sorted, starts)


def sort_batches_stable(batches):
    """Concatenate (scale, cols, vals) batches sorted by column, duplicates kept.

    Equal columns stay in batch order.  Used by the no-aggregation ablation,
    where intermediates are flushed as raw term triples.
    """
    total = sum(len(b[1]) for b in batches)
    cols = np.empty(total, dtype=np.uint32)
    vals = np.empty(total, dtype=_VAL)
    pos = 0
    for s, c, v in batches:
        n = len(c)
        cols[pos:pos + n] = c
        if s == 1.0:
            vals[pos:pos + n] = v
        else:
            np.multiply(v, s, out=vals[pos:pos + n])
        pos += n
    if total == 0:
        return cols, vals
    key = (cols.astype(np.uint64) << np.uint64(32)) | np.arange(total, dtype=np.uint64)
    key.sort()
    perm = (key & np.uint64(0xFFFFFFFF)).astype(np.intp)
    return (key >> np.uint64(32)).astype(np.uint32), vals[perm]


@dataclass
class Accumulator:
    """Running column-indexed sums for one output row.

    Logically a map from column id to a value; each column appears at most
    once.  Incoming batches are buffered and folded by ``merge_entry_batches``
    when inspected, so bulk use runs at array speed while the observable
    behaviour stays plain hash-style aggregation.
    """

    n_cols: int | None = None
    _merged_cols: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.uint32))
    _merged_vals: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=_VAL))
    _pending: list = field(default_factory=list)
    _pending_n: int = 0

    def accumulate(self, row):
        """acc[c] += v for every (c, v) in the row."""
        self.add_scaled(1.0, row.cols, row.vals)

    def add_scaled(self, scale, cols, vals):
        if scale == 0.0 or len(cols) == 0:
            return
        self._pending.append((scale, cols, vals))
        self._pending_n += len(cols)
        # bound the number of live array references between folds
        if len(self._pending) > 64 and self._pending_n > 4 * max(len(self._merged_cols), 1024):
            self._compact()

    def _compact(self):
        if not self._pending:
            return
        batches = []
        if len(self._merged_cols):
            batches.append((1.0, self._merged_cols, self._merged_vals))
        batches.extend(self._pending)
        self._merged_cols, self._merged_vals = merge_entry_batches(batches, self.n_cols)
        self._pending = []
        self._pending_n = 0

    def entry_count(self):
        self._compact()
        return len(self._merged_cols)

    def get(self, col, default=None):
        self._compact()
        i = np.searchsorted(self._merged_cols, col)
        if i < len(self._merged_cols) and self._merged_cols[i] == col:
            return float(self._merged_vals[i])
        return default

    def __contains__(self, col):
        return self.get(col) is not None

    def nbytes(self):
        """Serialized size of current contents at 16 bytes per entry."""
        return 16 * (len(self._merged_cols) + self._pending_n)

    def drain(self):
        """Return (cols, vals) sorted by column and reset.  Zero sums are kept."""
        self._compact()
        cols, vals = self._merged_cols, self._merged_vals
        self._merged_cols = np.empty(0, dtype=np.uint32)
        self._merged_vals = np.empty(0, dtype=_VAL)
        return cols, vals

    def items(self):
        self._compact()
        return list(zip(self._merged_cols.tolist(), self._merged_vals.tolist()))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def scale_row(s, row):
    """One term of the row product: every value multiplied by s.

    A zero scale yields an empty row, since zero terms contribute nothing
    to the output sum.
    """
    if s == 0.0:
        return SparseRow(row.row_id, np.empty(0, dtype=_COL), np.empty(0, dtype=_VAL))
    return SparseRow(row.row_id, row.cols, row.vals * s)


def accumulate(acc, row):
    """Fold a sorted row into the accumulator; returns the accumulator."""
    acc.accumulate(row)
    return acc


def _check_dims(a, b):
    if a.n_cols != b.n_rows:
        raise DimensionError(
            f"cannot multiply {a.n_rows}x{a.n_cols} by {b.n_rows}x{b.n_cols}")


def spgemm_reference(a, b):
    """Dense brute-force product used as the independent test oracle.

    Densifies both operands and multiplies.  An output entry is kept when at
    least one term contributed to it, so cancellation zeros survive exactly
    like in the sparse path; entries nothing contributed to are dropped.
    """
    _check_dims(a, b)
    ad, bd = a.to_dense(), b.to_dense()
    values = ad @ bd
    contributed = (np.abs(ad) @ np.abs(bd)) > 0
    rows = []
    for i in range(a.n_rows):
        ks = np.flatnonzero(contributed[i])
        rows.append((ks.astype(_COL), values[i, ks]))
    return SparseMatrix.from_rows(a.n_rows, b.n_cols, rows, validate=False)


def spgemm_in_memory(a, b):
    """Pure in-memory row product: out(i,:) = sum_j a(i,j) * b(j,:)."""
    _check_dims(a, b)
    rows = []
    for i in range(a.n_rows):
        acols, avals = a.row_arrays(i)
        acc = Accumulator(n_cols=b.n_cols)
        for j, s in zip(acols.tolist(), avals.tolist()):
            bcols, bvals = b.row_arrays(j)
            acc.add_scaled(s, bcols, bvals)
        cols, vals = acc.drain()
        rows.append((cols.astype(_COL), vals))
    return SparseMatrix.from_rows(a.n_rows, b.n_cols, rows, validate=False)
