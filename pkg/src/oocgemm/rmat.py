"""Recursive-matrix synthetic graph generator for power-law benchmarks.

Each edge sample descends the adjacency matrix quadtree: at every one of the
``scale`` levels a quadrant is drawn with probabilities (a, b, c, d), fixing
one row bit and one column bit.  The result is a 2^scale square matrix with
``edge_factor * 2^scale`` samples; duplicate samples merge into a single
entry whose value is the multiplicity, and self-loops are kept, so the
sample-count invariant  sum(values) == samples  always holds.

Generation is chunked, and each chunk draws from PCG64 seeded with
SeedSequence(seed, spawn_key=(chunk,)).  Chunks are therefore independent
streams: the output is identical whether chunks run serially or in
parallel, for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import SparseMatrix
from .errors import ConfigError

GENERATOR_CHUNK = 1 << 20

PRESETS = {
    "graph500": dict(edge_factor=16.0, a=0.57, b=0.19, c=0.19, d=0.05),
    "ssca": dict(edge_factor=8.0, a=0.6, b=0.4 / 3, c=0.4 / 3, d=0.4 / 3),
    "er": dict(edge_factor=16.0, a=0.25, b=0.25, c=0.25, d=0.25),
}


@dataclass(frozen=True)
class RmatParams:
    benchmark: str
    scale: int
    edge_factor: float
    a: float
    b: float
    c: float
    d: float
    seed: int = 0

    def __post_init__(self):
        if self.scale < 0:
            raise ConfigError("scale must be non-negative")
        if self.edge_factor <= 0:
            raise ConfigError("edge factor must be positive")
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ConfigError("skew parameters must be non-negative")
        total = self.a + self.b + self.c + self.d
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"skew parameters must sum to 1, got {total}")

    @property
    def node_count(self):
        return 1 << self.scale

    @property
    def sample_count(self):
        return int(round(self.edge_factor * self.node_count))

    @classmethod
    def preset(cls, name, scale, seed=0, edge_factor=None, skew=None):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        kw = dict(PRESETS[name])
        if edge_factor is not None:
            kw["edge_factor"] = float(edge_factor)
        if skew is not None:
            kw["a"], kw["b"], kw["c"], kw["d"] = skew
        return cls(benchmark=name, scale=scale, seed=seed, **kw)


def _sample_chunk(params, chunk_index, count):
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=params.seed, spawn_key=(chunk_index,)))
    rows = np.zeros(count, dtype=np.uint64)
    cols = np.zeros(count, dtype=np.uint64)
    p_top = params.a + params.b          # row bit stays 0
    p_left_given_top = params.a          # thresholds on one uniform draw
    p_left_given_bottom = params.a + params.b + params.c
    one = np.uint64(1)
    for _ in range(params.scale):
        r = rng.random(count)
        bottom = r >= p_top
        left_edge = np.where(bottom, r < p_left_given_bottom, r < p_left_given_top)
        rows = (rows << one) | bottom.astype(np.uint64)
        cols = (cols << one) | (~left_edge).astype(np.uint64)
    return rows, cols


def generate(params, chunk=GENERATOR_CHUNK):
    """Sample the full edge list and assemble the sparse matrix."""
    n = params.node_count
    total = params.sample_count
    parts_r, parts_c = [], []
    chunk_index = 0
    remaining = total
    while remaining > 0:
        m = min(chunk, remaining)
        r, c = _sample_chunk(params, chunk_index, m)
        parts_r.append(r)
        parts_c.append(c)
        chunk_index += 1
        remaining -= m
    if parts_r:
        rows = np.concatenate(parts_r)
        cols = np.concatenate(parts_c)
    else:
        rows = np.empty(0, dtype=np.uint64)
        cols = np.empty(0, dtype=np.uint64)
    # merge duplicate samples: value = multiplicity
    key = (rows << np.uint64(params.scale)) | cols
    uniq, counts = np.unique(key, return_counts=True)
    mask = np.uint64(n - 1) if n > 1 else np.uint64(0)
    out_rows = (uniq >> np.uint64(params.scale)).astype(np.int64)
    out_cols = (uniq & mask).astype(np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(out_rows, minlength=n), out=indptr[1:])
    return SparseMatrix(n, n, indptr, out_cols, counts.astype(np.float64),
                        validate=False)


def degree_histogram(matrix):
    """Exact out-degree histogram as (degree, node_count) pairs."""
    degrees = matrix.row_lengths()
    if len(degrees) == 0:
        return []
    counts = np.bincount(degrees)
    return [(int(d), int(c)) for d, c in enumerate(counts) if c > 0]


def degree_tail_slope(histogram):
    """Least-squares slope of log(count) against log(degree) over degrees >= 1.

    Negative slopes with magnitude well above zero indicate the power-law
    shape the skewed presets are expected to produce.
    """
    pts = [(d, c) for d, c in histogram if d >= 1]
    if len(pts) < 2:
        raise ValueError("histogram has fewer than two nonzero-degree buckets")
    x = np.log([d for d, _ in pts])
    y = np.log([c for _, c in pts])
    return float(np.polyfit(x, y, 1)[0])
