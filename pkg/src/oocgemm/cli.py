"""Command-line driver: gen, convert, multiply, verify, bench.

Every flag has an environment fallback with the OOCGEMM_ prefix (for
example --memory / OOCGEMM_MEMORY).  Exit codes: 0 success, 1 failure,
2 configuration error, 3 format error, 4 out of storage.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import tempfile
import time

import numpy as np

from . import report as report_mod
from .blockstore import DEFAULT_BLOCK_SIZE, StoredMatrix, pack_matrix
from .core import spgemm_reference
from .engine import ENV_PREFIX, EngineConfig, multiply, parse_size, set_strategy_toggles
from .errors import ConfigError, Error, FormatError, OutOfStorageError
from .formats import (
    IngestOptions,
    export_coordinate,
    export_edge_list,
    ingest_file,
    parse_edge_list,
    parse_matrix_market,
    sniff_format,
)
from .rmat import PRESETS, RmatParams, generate

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_OOS = 4

VARIANTS = {
    "none": (False, False),
    "balance": (True, False),
    "agg": (False, True),
    "both": (True, True),
}


def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def _add_engine_flags(p):
    p.add_argument("--memory", default=_env("MEMORY", "256MiB"),
                   help="memory budget for the three buffers (default 256MiB)")
    p.add_argument("--block-size", default=_env("BLOCK_SIZE", "1MiB"),
                   help="block size for written matrices (default 1MiB)")
    p.add_argument("--threads", type=int, default=int(_env("THREADS", "4")),
                   help="worker thread count (default 4)")
    p.add_argument("--alpha", type=float, default=float(_env("ALPHA", "0.125")),
                   help="output staging fraction of max_row (default 0.125)")
    p.add_argument("--no-block-balance", action="store_true",
                   default=_env("NO_BLOCK_BALANCE") is not None,
                   help="deal whole rows round-robin instead of blocks (ablation)")
    p.add_argument("--no-partial-agg", action="store_true",
                   default=_env("NO_PARTIAL_AGG") is not None,
                   help="stage raw intermediates without column merging (ablation)")
    p.add_argument("--spill-dir", default=_env("SPILL_DIR"),
                   help="directory for spill runs (default: beside the output)")


def _engine_config(args, output_path):
    return EngineConfig(
        memory_capacity_bytes=parse_size(args.memory),
        block_size_bytes=parse_size(args.block_size),
        threads=args.threads,
        alpha=args.alpha,
        block_based_allocation=not args.no_block_balance,
        partial_aggregation=not args.no_partial_agg,
        spill_directory=args.spill_dir,
        output_path=str(output_path),
    )


def _sha256(path, chunk=1 << 22):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            block = f.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def _parse_skew(text):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 4:
        raise ConfigError("--skew needs four comma-separated values a,b,c,d")
    return tuple(parts)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    skew = _parse_skew(args.skew) if args.skew else None
    params = RmatParams.preset(args.preset, args.scale, seed=args.seed,
                               edge_factor=args.edge_factor, skew=skew)
    t0 = time.perf_counter()
    m = generate(params)
    sm = pack_matrix(m, parse_size(args.block_size), args.out)
    print(f"preset={params.benchmark} scale={params.scale} seed={params.seed}")
    print(f"nodes={params.node_count} samples={params.sample_count} "
          f"entries={m.nnz}")
    print(f"blocks={sm.n_blocks} block_size={sm.block_size} "
          f"file_bytes={sm.file_bytes()} seconds={time.perf_counter() - t0:.2f}")
    print(f"out={sm.path}")
    return EXIT_OK


def cmd_convert(args):
    opts = IngestOptions(one_indexed=args.one_indexed,
                         symmetrize=args.symmetrize,
                         drop_explicit_zeros=not args.keep_zeros,
                         value_default=args.value_default,
                         transpose=args.transpose)
    src_fmt = args.src_format
    if src_fmt == "auto":
        src_fmt = "blocks" if os.path.exists(args.input + ".meta.json") \
            else sniff_format(args.input)
    if args.to == "blocks":
        if src_fmt == "blocks":
            raise ConfigError("input is already a block matrix")
        sm = ingest_file(args.input, args.out, opts,
                         block_size=parse_size(args.block_size),
                         chunk_entries=args.chunk_entries, fmt=src_fmt)
        print(f"ingested {src_fmt} -> {sm.path} "
              f"({sm.n_rows}x{sm.n_cols}, {sm.n_entries} entries, "
              f"{sm.n_blocks} blocks)")
        return EXIT_OK
    # export paths load through the parser or the block store
    if src_fmt == "blocks":
        m = StoredMatrix.open(args.input).unpack()
    elif src_fmt == "matrixmarket":
        m = parse_matrix_market(args.input, opts)
    else:
        m = parse_edge_list(args.input, opts)
    with open(args.out, "w") as f:
        if args.to == "matrixmarket":
            export_coordinate(m, f)
        else:
            export_edge_list(m, f)
    print(f"exported {args.to} -> {args.out} ({m.n_rows}x{m.n_cols}, {m.nnz} entries)")
    return EXIT_OK


def _materialize_transpose(b_path, block_size, out_dir):
    sm = StoredMatrix.open(b_path)
    transposed = sm.unpack().transpose()
    path = os.path.join(out_dir, os.path.basename(b_path) + ".T")
    return pack_matrix(transposed, block_size, path)


def cmd_multiply(args):
    if args.square and args.b is not None:
        raise ConfigError("--square takes a single input matrix")
    if not args.square and args.b is None:
        raise ConfigError("need a second matrix, or --square")
    cfg = _engine_config(args, args.out)
    b_path = args.a if args.square else args.b
    if args.transpose:
        sm = _materialize_transpose(b_path, cfg.block_size_bytes,
                                    os.path.dirname(os.path.abspath(args.out)) or ".")
        b_path = sm.path
    out, rep = multiply(args.a, b_path, cfg)
    checksum = _sha256(out.path)
    print(f"out={out.path} rows={rep.output_rows} cols={rep.output_cols} "
          f"entries={rep.output_entries}")
    print(f"wall_seconds={rep.wall_seconds:.3f} b2_loads={rep.io['b2_loads']} "
          f"spill_runs={rep.io['spill_runs']} "
          f"spill_flush_bytes={rep.io['spill_flush_bytes']}")
    print(f"per_thread_blocks={rep.per_thread_blocks}")
    print(f"output_sha256={checksum}")
    if args.report_dir:
        text_path, tsv_path = report_mod.write_multiply_report(
            args.report_dir, cfg, rep, checksum,
            label=args.report_label)
        print(f"report={text_path} data={tsv_path}")
    return EXIT_OK


def cmd_verify(args):
    a = StoredMatrix.open(args.a)
    b = StoredMatrix.open(args.b)
    c = StoredMatrix.open(args.c)
    for name, sm in (("a", a), ("b", b)):
        if sm.n_entries > args.max_entries:
            raise ConfigError(
                f"input {name} has {sm.n_entries} entries, above the "
                f"--max-entries guard {args.max_entries}; the oracle densifies")
    dense_cells = max(a.n_rows * a.n_cols, b.n_rows * b.n_cols,
                      a.n_rows * b.n_cols)
    if dense_cells > 200_000_000:
        raise ConfigError(f"dense oracle would allocate {dense_cells} cells")
    want = spgemm_reference(a.unpack(), b.unpack())
    got = c.unpack()
    ok = got.equals(want) if args.tol == 0 else got.allclose(want, args.tol)
    print(f"verify: {'PASS' if ok else 'FAIL'} "
          f"({got.nnz} entries vs oracle {want.nnz})")
    return EXIT_OK if ok else EXIT_FAIL


def _bench_dataset(args, scale, out_dir):
    label = f"{args.preset}-s{scale}-seed{args.seed}"
    path = os.path.join(out_dir, label + ".blk")
    if not os.path.exists(path + ".meta.json"):
        params = RmatParams.preset(args.preset, scale, seed=args.seed,
                                   edge_factor=args.edge_factor)
        pack_matrix(generate(params), parse_size(args.block_size), path)
    return label, path


def cmd_bench(args):
    os.makedirs(args.out_dir, exist_ok=True)
    scales = [int(s) for s in args.scales.split(",")]
    alphas = [float(x) for x in args.alphas.split(",")] if args.alphas else [args.alpha]
    memories = ([parse_size(x) for x in args.memories.split(",")]
                if args.memories else [parse_size(args.memory)])
    threads_list = ([int(x) for x in args.threads_list.split(",")]
                    if args.threads_list else [args.threads])
    variants = args.variants.split(",") if args.variants else ["both"]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")

    rows = []
    for scale in scales:
        label, path = _bench_dataset(args, scale, args.out_dir)
        for mem in memories:
            for alpha in alphas:
                for t in threads_list:
                    for variant in variants:
                        bb, pa = VARIANTS[variant]
                        cfg = EngineConfig(
                            memory_capacity_bytes=mem,
                            block_size_bytes=parse_size(args.block_size),
                            threads=t, alpha=alpha,
                            spill_directory=args.spill_dir,
                            output_path=os.path.join(args.out_dir, "bench-out.blk"))
                        cfg = set_strategy_toggles(cfg, bb, pa)
                        runs = []
                        rep = None
                        for _ in range(args.repeat):
                            t0 = time.perf_counter()
                            out, rep = multiply(path, path, cfg)
                            runs.append(time.perf_counter() - t0)
                            out.close()
                        row = report_mod.bench_row(args.suite, label, scale,
                                                   variant, cfg, rep, runs)
                        rows.append(row)
                        print(f"{label} variant={variant} t={t} C={mem} "
                              f"alpha={alpha} mean={row['mean_seconds']}s "
                              f"spill={row['spill_flush_bytes']}B")
    tsv = os.path.join(args.out_dir, "bench.tsv")
    report_mod.write_tsv(tsv, rows)
    with open(os.path.join(args.out_dir, "bench.txt"), "w") as f:
        f.write(f"benchmark suite: {args.suite}\n")
        f.write(f"preset={args.preset} seed={args.seed} repeat={args.repeat}\n")
        f.write(f"cells: {len(rows)}\n")
        for row in rows:
            f.write(f"  {row['dataset']} variant={row['variant']} "
                    f"t={row['threads']} C={row['memory_bytes']} "
                    f"alpha={row['alpha']} mean={row['mean_seconds']}s\n")
    figures = report_mod.render_suite_figures(args.suite, rows, args.out_dir)
    print(f"data={tsv}")
    for fig in figures:
        print(f"figure={fig}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="oocgemm",
        description="Out-of-core sparse matrix multiplication on block storage")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic power-law matrix")
    g.add_argument("--preset", choices=sorted(PRESETS), default="graph500")
    g.add_argument("--scale", type=int, required=True)
    g.add_argument("--seed", type=int, default=int(_env("SEED", "0")))
    g.add_argument("--edge-factor", type=float, default=None,
                   help="override the preset's edge factor")
    g.add_argument("--skew", default=None, help="a,b,c,d quadrant probabilities")
    g.add_argument("--block-size", default=_env("BLOCK_SIZE", "1MiB"))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("convert", help="ingest or export matrix files")
    c.add_argument("input")
    c.add_argument("--out", required=True)
    c.add_argument("--from", dest="src_format", default="auto",
                   choices=["auto", "matrixmarket", "edgelist", "blocks"])
    c.add_argument("--to", default="blocks",
                   choices=["blocks", "matrixmarket", "edgelist"])
    c.add_argument("--one-indexed", action="store_true")
    c.add_argument("--symmetrize", action="store_true")
    c.add_argument("--keep-zeros", action="store_true",
                   help="keep explicit zero entries instead of dropping them")
    c.add_argument("--value-default", type=float, default=1.0)
    c.add_argument("--transpose", action="store_true")
    c.add_argument("--block-size", default=_env("BLOCK_SIZE", "1MiB"))
    c.add_argument("--chunk-entries", type=int, default=4_000_000)
    c.set_defaults(func=cmd_convert)

    m = sub.add_parser("multiply", help="multiply two stored matrices")
    m.add_argument("a")
    m.add_argument("b", nargs="?")
    m.add_argument("--square", action="store_true",
                   help="use the first matrix on both sides")
    m.add_argument("--transpose", action="store_true",
                   help="materialize the second operand's transpose first")
    m.add_argument("--out", required=True)
    m.add_argument("--report-dir", default=None)
    m.add_argument("--report-label", default="run")
    _add_engine_flags(m)
    m.set_defaults(func=cmd_multiply)

    v = sub.add_parser("verify", help="check a stored product against the dense oracle")
    v.add_argument("a")
    v.add_argument("b")
    v.add_argument("c")
    v.add_argument("--max-entries", type=int, default=1_000_000,
                   help="refuse larger inputs (the oracle densifies)")
    v.add_argument("--tol", type=float, default=0.0,
                   help="per-entry tolerance; 0 means exact")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="sweep configurations and report")
    b.add_argument("--suite", default="scaling",
                   choices=sorted(report_mod.SUITE_FIGURES) + ["custom"])
    b.add_argument("--preset", choices=sorted(PRESETS), default="graph500")
    b.add_argument("--scales", default="10", help="comma-separated scale factors")
    b.add_argument("--seed", type=int, default=int(_env("SEED", "0")))
    b.add_argument("--edge-factor", type=float, default=None)
    b.add_argument("--repeat", type=int, default=int(_env("REPEAT", "5")),
                   help="repetitions per cell (default 5)")
    b.add_argument("--memories", default=None,
                   help="comma-separated memory budgets to sweep")
    b.add_argument("--alphas", default=None,
                   help="comma-separated alpha values to sweep")
    b.add_argument("--threads-list", default=None,
                   help="comma-separated thread counts to sweep")
    b.add_argument("--variants", default=None,
                   help=f"comma-separated from {sorted(VARIANTS)}")
    b.add_argument("--out-dir", required=True)
    _add_engine_flags(b)
    b.set_defaults(func=cmd_bench)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OutOfStorageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OOS
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except Error as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
