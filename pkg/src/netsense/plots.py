"""Render benchmark figures from the CSV outputs.

Figures land next to the delimited files they are drawn from; the CSVs stay
the canonical record, the PNGs are the quick look.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def render_scaling_figure(bench_csv: Path, out_png: Path) -> Path | None:
    rows = _read_csv(bench_csv)
    if not rows:
        return None
    workers = [int(r["workers"]) for r in rows]
    warm = [float(r["warm_rps"]) for r in rows]
    rate = float(rows[0]["rate_rps"])

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(workers, warm, "o-", label="measured (warm)")
    if rate > 0:
        ax.plot(workers, [w * rate for w in workers], "k--", alpha=0.6,
                label="ideal (workers x rate)")
    ax.set_xlabel("workers")
    ax.set_ylabel("coordinator throughput (pairs/s)")
    ax.set_title("Coordinator throughput vs worker count")
    ax.set_xticks(workers)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_stage_figure(stages_csv: Path, out_png: Path) -> Path | None:
    rows = [r for r in _read_csv(stages_csv) if float(r["median_rps"]) > 0]
    if not rows:
        return None
    stages = [r["stage"] for r in rows]
    rps = [float(r["median_rps"]) for r in rows]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(stages, rps, color=["#4472c4", "#ed7d31", "#70ad47"][: len(stages)])
    ax.set_yscale("log")
    ax.set_ylabel("median throughput (pairs/s)")
    ax.set_title("Median per-stage throughput")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_resource_figure(resources_csv: Path, out_png: Path) -> Path | None:
    rows = _read_csv(resources_csv)
    if not rows:
        return None
    t0 = min(float(r["ts"]) for r in rows)
    by_role: dict[str, tuple[list, list, list]] = {}
    for r in rows:
        t, cpu, rss = by_role.setdefault(r["role"], ([], [], []))
        t.append(float(r["ts"]) - t0)
        cpu.append(float(r["cpu_percent"]))
        rss.append(int(r["rss_bytes"]) / 2**20)

    fig, (ax_cpu, ax_rss) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for role, (t, cpu, rss) in sorted(by_role.items()):
        ax_cpu.plot(t, cpu, label=role, alpha=0.8)
        ax_rss.plot(t, rss, label=role, alpha=0.8)
    ax_cpu.set_ylabel("CPU %")
    ax_rss.set_ylabel("RSS (MiB)")
    ax_rss.set_xlabel("time (s)")
    ax_cpu.set_title("Cluster resource usage")
    ax_cpu.grid(alpha=0.3)
    ax_rss.grid(alpha=0.3)
    ax_cpu.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_bench_figures(out_dir: Path) -> list[Path]:
    """Render every figure the bench CSVs support; returns written paths."""
    out_dir = Path(out_dir)
    written = []
    bench_csv = out_dir / "bench.csv"
    if bench_csv.exists():
        p = render_scaling_figure(bench_csv, out_dir / "bench_scaling.png")
        if p:
            written.append(p)
    stages_csv = out_dir / "stages.csv"
    if stages_csv.exists():
        p = render_stage_figure(stages_csv, out_dir / "stage_throughput.png")
        if p:
            written.append(p)
    resource_files = sorted(out_dir.glob("run_w*/resources.csv"))
    if resource_files:
        p = render_resource_figure(resource_files[-1],
                                   out_dir / "resource_usage.png")
        if p:
            written.append(p)
    return written
