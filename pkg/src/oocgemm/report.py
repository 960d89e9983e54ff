"""Run reports: a self-describing text document, delimited plot data, and
rendered figures.

Every benchmark cell becomes one TSV row with a fixed, documented schema so
downstream plotting needs no bespoke parsing; the figure renderers consume
those same rows and write PNG files next to the data.
"""

from __future__ import annotations

import json
import os

REPORT_COLUMNS = [
    "suite", "dataset", "scale", "variant", "threads", "memory_bytes",
    "alpha", "block_size", "b1_bytes", "b2_bytes", "bout_bytes",
    "repetitions", "mean_seconds", "run_seconds",
    "b1_loads", "b2_loads", "b2_evictions",
    "spill_runs", "spill_flush_bytes", "spill_read_bytes",
    "output_write_bytes", "output_entries",
    "per_thread_blocks", "per_thread_entries",
    "peak_staged_bytes", "max_row_bytes",
]


def bench_row(suite, dataset, scale, variant, cfg, report, run_seconds):
    mean = sum(run_seconds) / len(run_seconds)
    return {
        "suite": suite,
        "dataset": dataset,
        "scale": scale,
        "variant": variant,
        "threads": cfg.threads,
        "memory_bytes": cfg.memory_capacity_bytes,
        "alpha": cfg.alpha,
        "block_size": cfg.block_size_bytes,
        "b1_bytes": report.plan["b1_bytes"],
        "b2_bytes": report.plan["b2_bytes"],
        "bout_bytes": report.plan["bout_bytes"],
        "repetitions": len(run_seconds),
        "mean_seconds": round(mean, 6),
        "run_seconds": ";".join(f"{s:.6f}" for s in run_seconds),
        "b1_loads": report.io["b1_loads"],
        "b2_loads": report.io["b2_loads"],
        "b2_evictions": report.io["b2_evictions"],
        "spill_runs": report.io["spill_runs"],
        "spill_flush_bytes": report.io["spill_flush_bytes"],
        "spill_read_bytes": report.io["spill_read_bytes"],
        "output_write_bytes": report.io["output_write_bytes"],
        "output_entries": report.output_entries,
        "per_thread_blocks": ";".join(str(c) for c in report.per_thread_blocks),
        "per_thread_entries": ";".join(str(c) for c in report.per_thread_entries),
        "peak_staged_bytes": report.peak_staged_bytes,
        "max_row_bytes": report.max_row_bytes,
    }


def write_tsv(path, rows, columns=None):
    columns = columns or REPORT_COLUMNS
    with open(path, "w") as f:
        f.write("\t".join(columns) + "\n")
        for row in rows:
            f.write("\t".join(str(row.get(c, "")) for c in columns) + "\n")


def read_tsv(path):
    with open(path) as f:
        header = f.readline().rstrip("\n").split("\t")
        return [dict(zip(header, line.rstrip("\n").split("\t"))) for line in f]


def multiply_report_text(cfg, report, checksum=None, label=""):
    """Human-readable run summary with stable 'key: value' lines."""
    lines = [
        "multiply report" + (f" ({label})" if label else ""),
        "=" * 40,
        f"output_path: {cfg.output_path}",
        f"threads: {cfg.threads}",
        f"memory_capacity_bytes: {cfg.memory_capacity_bytes}",
        f"block_size_bytes: {cfg.block_size_bytes}",
        f"alpha: {cfg.alpha}",
        f"block_based_allocation: {cfg.block_based_allocation}",
        f"partial_aggregation: {cfg.partial_aggregation}",
        "",
        f"wall_seconds: {report.wall_seconds:.6f}",
    ]
    for phase, secs in report.phase_seconds.items():
        lines.append(f"phase_seconds.{phase}: {secs:.6f}")
    lines.append("")
    for key, value in sorted(report.io.items()):
        lines.append(f"io.{key}: {value}")
    lines += [
        "",
        f"buffer.b1_bytes: {report.plan['b1_bytes']}",
        f"buffer.b2_bytes: {report.plan['b2_bytes']}",
        f"buffer.bout_bytes: {report.plan['bout_bytes']}",
        f"buffer.worker_share: {report.plan['worker_share']}",
        f"max_row_bytes: {report.max_row_bytes}",
        f"peak_staged_bytes: {report.peak_staged_bytes}",
        f"peak_cache_blocks: {report.peak_cache_blocks}",
        "",
        f"workload.policy: {report.policy}",
        f"workload.per_thread_blocks: {report.per_thread_blocks}",
        f"workload.per_thread_entries: {report.per_thread_entries}",
        f"workload.per_thread_rows: {report.per_thread_rows}",
        "",
        f"output_rows: {report.output_rows}",
        f"output_cols: {report.output_cols}",
        f"output_entries: {report.output_entries}",
    ]
    if checksum:
        lines.append(f"output_sha256: {checksum}")
    return "\n".join(lines) + "\n"


def write_multiply_report(report_dir, cfg, report, checksum=None, label="run"):
    os.makedirs(report_dir, exist_ok=True)
    text_path = os.path.join(report_dir, f"{label}.txt")
    with open(text_path, "w") as f:
        f.write(multiply_report_text(cfg, report, checksum, label))
    row = bench_row("single", label, "", "custom", cfg, report,
                    [report.wall_seconds])
    tsv_path = os.path.join(report_dir, f"{label}.tsv")
    write_tsv(tsv_path, [row])
    return text_path, tsv_path


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _f(row, key):
    return float(row[key])


def render_scaling(rows, path):
    """Execution time against graph scale, one line per thread count."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    by_threads = {}
    for r in rows:
        by_threads.setdefault(int(r["threads"]), []).append(r)
    for t, series in sorted(by_threads.items()):
        series.sort(key=lambda r: int(r["scale"]))
        ax.plot([int(r["scale"]) for r in series],
                [_f(r, "mean_seconds") for r in series],
                marker="o", label=f"t={t}")
    ax.set_xlabel("graph scale factor")
    ax.set_ylabel("execution time (s)")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_variants(rows, path):
    """Execution time per strategy-toggle variant."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = [r["variant"] for r in rows]
    ax.bar(labels, [_f(r, "mean_seconds") for r in rows], color="steelblue")
    ax.set_ylabel("execution time (s)")
    ax.set_xlabel("variant")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_spill(rows, path):
    """Spilled intermediate bytes with aggregation off vs on."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = [r["variant"] for r in rows]
    ax.bar(labels, [_f(r, "spill_flush_bytes") / max(1.0, 2**20) for r in rows],
           color="firebrick")
    ax.set_ylabel("spilled intermediates (MiB)")
    ax.set_xlabel("variant")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_alpha(rows, path):
    """Execution time against the staging-buffer fraction."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    by_mem = {}
    for r in rows:
        by_mem.setdefault(int(r["memory_bytes"]), []).append(r)
    for mem, series in sorted(by_mem.items()):
        series.sort(key=lambda r: float(r["alpha"]))
        ax.plot([100 * float(r["alpha"]) for r in series],
                [_f(r, "mean_seconds") for r in series],
                marker="s", label=f"C={mem >> 20}MiB")
    ax.set_xlabel("alpha (%)")
    ax.set_ylabel("execution time (s)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_b1(rows, path):
    """Execution time against the former-input buffer size."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    by_threads = {}
    for r in rows:
        by_threads.setdefault(int(r["threads"]), []).append(r)
    for t, series in sorted(by_threads.items()):
        series.sort(key=lambda r: int(r["b1_bytes"]))
        ax.plot([int(r["b1_bytes"]) / 2**20 for r in series],
                [_f(r, "mean_seconds") for r in series],
                marker="^", label=f"t={t}")
    ax.set_xlabel("former-input buffer (MiB)")
    ax.set_ylabel("execution time (s)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


SUITE_FIGURES = {
    "scaling": [("scaling.png", render_scaling)],
    "ablation": [("variants.png", render_variants), ("spill_io.png", render_spill)],
    "alpha": [("alpha.png", render_alpha)],
    "b1": [("b1.png", render_b1)],
}


def render_suite_figures(suite, rows, out_dir):
    made = []
    for name, renderer in SUITE_FIGURES.get(suite, []):
        made.append(renderer(rows, os.path.join(out_dir, name)))
    return made
