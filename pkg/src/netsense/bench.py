"""Benchmark harness: spawn a local worker/coordinator cluster and report.

The harness owns no matrix state; it launches one coordinator plus N worker
processes, holds the workers at a start barrier until all of them finished
importing and binding (so measurement windows line up even on a loaded
machine), samples per-process CPU%/RSS while the cluster runs, and distills
the run into ``bench.csv`` / ``stages.csv`` rows plus rendered figures.

Two throughput numbers are reported per run:

* ``coordinator_rps``: finished-global pair mass over the configured
  duration (the headline scaling metric);
* ``warm_rps``: the same mass rate measured between the first and last
  global finalize events, which drops the one-window warmup and is what
  the scaling-linearity check uses.
"""

from __future__ import annotations

import csv
import json
import statistics
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import psutil

from .config import DESK_PROFILE, PipelineConfig

BENCH_CSV_HEADER = (
    "workers,duration_s,rate_rps,n_v,n_b,n_g,strategy,transport,"
    "globals,coordinator_rps,warm_rps,injected_pairs,global_pairs,"
    "pending_pairs,leftover_pairs,conserved"
)
STAGES_CSV_HEADER = "stage,median_rps,samples"
RESOURCES_CSV_HEADER = "ts,role,pid,cpu_percent,rss_bytes"

STAGE_NAMES = ("construction", "aggregation", "analytics")

READY_MARKER = "ready.marker"
START_MARKER = "start.marker"


class BenchError(RuntimeError):
    pass


@dataclass
class BenchConfig:
    workers: list[int] = field(default_factory=lambda: [1])
    duration: float | None = 30.0
    total: int | None = None
    rate: float = DESK_PROFILE["rate"]
    n_v: int = DESK_PROFILE["n_v"]
    n_b: int = DESK_PROFILE["n_b"]
    ng_over_na: int = DESK_PROFILE["ng_over_na"]
    strategy: str = "batch"
    transport: str = "message_passing"
    seed: int = 1
    retention: str = "keep"
    sample_interval: float = 0.5
    out_dir: Path = Path("bench_out")
    figures: bool = True

    def __post_init__(self):
        if isinstance(self.workers, int):
            self.workers = [self.workers]
        if any(w < 1 for w in self.workers):
            raise ValueError("worker counts must be >= 1")
        if self.duration is None and self.total is None:
            raise ValueError("need a duration or a total pair cap")
        self.out_dir = Path(self.out_dir)


@dataclass
class RunResult:
    workers: int
    duration_s: float
    rate_rps: float
    n_v: int
    n_b: int
    n_g: int
    strategy: str
    transport: str
    globals_produced: int
    coordinator_rps: float
    warm_rps: float
    injected_pairs: int
    global_pairs: int
    pending_pairs: int
    leftover_pairs: int
    conserved: bool
    poison_messages: int
    stage_medians: dict
    resources: dict
    run_dir: str

    def csv_row(self) -> str:
        return (
            f"{self.workers},{self.duration_s:.3f},{self.rate_rps:.1f},"
            f"{self.n_v},{self.n_b},{self.n_g},{self.strategy},"
            f"{self.transport},{self.globals_produced},"
            f"{self.coordinator_rps:.3f},{self.warm_rps:.3f},"
            f"{self.injected_pairs},{self.global_pairs},{self.pending_pairs},"
            f"{self.leftover_pairs},{int(self.conserved)}"
        )


@dataclass
class BenchReport:
    config: dict
    runs: list[RunResult]
    bench_csv: str
    stages_csv: str

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "runs": [asdict(r) for r in self.runs],
            "bench_csv": self.bench_csv,
            "stages_csv": self.stages_csv,
        }


class ResourceSampler:
    """Polls CPU%/RSS of the cluster processes at a fixed interval."""

    def __init__(self, procs: dict[str, subprocess.Popen], path: Path,
                 interval: float):
        self.path = path
        self.interval = interval
        self._handles = {}
        for role, proc in procs.items():
            try:
                p = psutil.Process(proc.pid)
                p.cpu_percent(None)  # prime the delta counter
                self._handles[role] = p
            except psutil.Error:
                pass
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def start(self):
        self._thread.start()

    def _loop(self):
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(RESOURCES_CSV_HEADER + "\n")
            while not self._stop.wait(self.interval):
                now = time.time()
                for role, p in self._handles.items():
                    try:
                        cpu = p.cpu_percent(None)
                        rss = p.memory_info().rss
                    except psutil.Error:
                        continue
                    fh.write(f"{now:.3f},{role},{p.pid},{cpu:.2f},{rss}\n")
                fh.flush()

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=5)


def _worker_cmd(cfg: BenchConfig, rank: int, run_dir: Path) -> list[str]:
    cmd = [
        sys.executable, "-m", "netsense", "worker",
        "--rank", str(rank),
        "--nv", str(cfg.n_v), "--nb", str(cfg.n_b),
        "--ng-over-na", str(cfg.ng_over_na),
        "--strategy", cfg.strategy,
        "--transport", "mp" if cfg.transport == "message_passing" else "sfs",
        "--spool-root", str(run_dir / "spool"),
        "--msg-root", str(run_dir / "msgs"),
        "--rate", str(cfg.rate),
        "--seed", str(cfg.seed + rank),
        "--retention", cfg.retention,
        "--barrier", str(run_dir / START_MARKER),
    ]
    if cfg.duration is not None:
        cmd += ["--duration", str(cfg.duration)]
    if cfg.total is not None:
        cmd += ["--total", str(cfg.total)]
    return cmd


def _coordinator_cmd(cfg: BenchConfig, workers: int, run_dir: Path,
                     idle_timeout: float) -> list[str]:
    return [
        sys.executable, "-m", "netsense", "coordinator",
        "--workers", str(workers),
        "--nv", str(cfg.n_v), "--nb", str(cfg.n_b),
        "--ng-over-na", str(cfg.ng_over_na),
        "--strategy", cfg.strategy,
        "--transport", "mp" if cfg.transport == "message_passing" else "sfs",
        "--spool-root", str(run_dir / "spool"),
        "--msg-root", str(run_dir / "msgs"),
        "--idle-timeout", str(idle_timeout),
    ]


def _tail(path: Path, lines: int = 30) -> str:
    try:
        return "\n".join(path.read_text("utf-8").splitlines()[-lines:])
    except OSError:
        return "<no log>"


def run_single(cfg: BenchConfig, workers: int, run_dir: Path) -> RunResult:
    """One cluster run at a fixed worker count."""
    run_dir.mkdir(parents=True, exist_ok=True)
    logs = run_dir / "logs"
    logs.mkdir(exist_ok=True)
    spool = run_dir / "spool"

    grace = 120.0
    budget = cfg.duration if cfg.duration is not None else max(
        60.0, (cfg.total or 0) / max(cfg.rate, 1.0)
    )
    idle_timeout = budget + grace

    procs: dict[str, subprocess.Popen] = {}
    log_files = {}

    def spawn(role: str, cmd: list[str]):
        log = open(logs / f"{role}.log", "w", encoding="utf-8")
        log_files[role] = log
        procs[role] = subprocess.Popen(cmd, stdout=log, stderr=subprocess.STDOUT)

    try:
        spawn("coordinator", _coordinator_cmd(cfg, workers, run_dir, idle_timeout))
        for rank in range(1, workers + 1):
            spawn(f"worker_{rank}", _worker_cmd(cfg, rank, run_dir))

        # Wait for every worker to reach its ready marker, then release them
        # together so all measurement windows share the same start/stop edges.
        deadline = time.monotonic() + 90
        ready = [spool / str(r) / READY_MARKER for r in range(1, workers + 1)]
        while not all(p.exists() for p in ready):
            for role, proc in procs.items():
                if proc.poll() not in (None, 0):
                    raise BenchError(
                        f"{role} exited rc={proc.returncode} before start:\n"
                        + _tail(logs / f"{role}.log")
                    )
            if time.monotonic() > deadline:
                raise BenchError("workers never reached the start barrier")
            time.sleep(0.02)
        (run_dir / START_MARKER).touch()

        sampler = ResourceSampler(procs, run_dir / "resources.csv",
                                  cfg.sample_interval)
        sampler.start()
        try:
            for rank in range(1, workers + 1):
                role = f"worker_{rank}"
                rc = procs[role].wait(timeout=budget + grace)
                if rc != 0:
                    raise BenchError(f"{role} rc={rc}:\n" + _tail(logs / f"{role}.log"))
            rc = procs["coordinator"].wait(timeout=grace + 60)
            if rc != 0:
                raise BenchError(
                    f"coordinator rc={rc}:\n" + _tail(logs / "coordinator.log")
                )
        finally:
            sampler.stop()
    except Exception:
        for proc in procs.values():
            if proc.poll() is None:
                proc.kill()
        raise
    finally:
        for log in log_files.values():
            log.close()
        for proc in procs.values():
            if proc.poll() is None:
                proc.wait(timeout=10)

    return _collect(cfg, workers, run_dir)


def _collect(cfg: BenchConfig, workers: int, run_dir: Path) -> RunResult:
    spool = run_dir / "spool"
    coord = json.loads((spool / "0" / "coordinator_stats.json").read_text("utf-8"))
    if coord.get("idle_timeout_hit"):
        raise BenchError("coordinator hit its idle timeout; run incomplete")

    injected = leftover = 0
    elapsed = []
    for rank in range(1, workers + 1):
        ws = json.loads((spool / str(rank) / "worker_stats.json").read_text("utf-8"))
        injected += ws["injected_pairs"]
        leftover += ws["leftover_buffer_pairs"] + ws["leftover_base_pairs"]
        elapsed.append(ws["elapsed_seconds"])

    pcfg = PipelineConfig(n_v=cfg.n_v, n_b=cfg.n_b, ng_over_na=cfg.ng_over_na,
                          strategy=cfg.strategy, transport=cfg.transport,
                          spool_dir=spool, msg_root=run_dir / "msgs", rank=1)
    n_g = pcfg.n_g
    g = coord["globals_produced"]
    duration = cfg.duration if cfg.duration is not None else max(elapsed)
    rps = g * n_g / duration if duration > 0 else 0.0
    warm = _warm_rps(spool / "0" / "metrics.csv", n_g)

    accounted = coord["global_pairs"] + coord["pending_pairs"] + leftover
    return RunResult(
        workers=workers,
        duration_s=duration,
        rate_rps=cfg.rate,
        n_v=cfg.n_v,
        n_b=cfg.n_b,
        n_g=n_g,
        strategy=cfg.strategy,
        transport=cfg.transport,
        globals_produced=g,
        coordinator_rps=rps,
        warm_rps=warm,
        injected_pairs=injected,
        global_pairs=coord["global_pairs"],
        pending_pairs=coord["pending_pairs"],
        leftover_pairs=leftover,
        conserved=(injected == accounted),
        poison_messages=coord["poison_messages"],
        stage_medians=_stage_medians([spool]),
        resources=_resource_summary(run_dir / "resources.csv"),
        run_dir=str(run_dir),
    )


def _warm_rps(metrics_csv: Path, n_g: int) -> float:
    """Pair mass per second between the first and last global finalize."""
    try:
        rows = list(csv.DictReader(open(metrics_csv, encoding="utf-8")))
    except OSError:
        return 0.0
    if len(rows) < 2:
        return 0.0
    t0 = float(rows[0]["timestamp"])
    t1 = float(rows[-1]["timestamp"])
    if t1 <= t0:
        return 0.0
    return (len(rows) - 1) * n_g / (t1 - t0)


def _stage_medians(spools: list[Path]) -> dict:
    """Median per-stage throughput pooled over every process stage log."""
    samples: dict[str, list[float]] = {s: [] for s in STAGE_NAMES}
    for spool in spools:
        for stages_file in spool.glob("*/stages.csv"):
            with open(stages_file, encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    secs = float(row["seconds"])
                    if secs <= 0:
                        continue
                    stage = row["stage"]
                    if stage in samples:
                        samples[stage].append(int(row["pairs"]) / secs)
    return {
        stage: {
            "median_rps": statistics.median(vals) if vals else 0.0,
            "samples": len(vals),
        }
        for stage, vals in samples.items()
    }


def _resource_summary(resources_csv: Path) -> dict:
    by_role: dict[str, dict] = {}
    try:
        with open(resources_csv, encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                entry = by_role.setdefault(
                    row["role"], {"max_rss_bytes": 0, "cpu_samples": []}
                )
                entry["max_rss_bytes"] = max(entry["max_rss_bytes"],
                                             int(row["rss_bytes"]))
                entry["cpu_samples"].append(float(row["cpu_percent"]))
    except OSError:
        return {}
    return {
        role: {
            "max_rss_bytes": e["max_rss_bytes"],
            "mean_cpu_percent": (
                sum(e["cpu_samples"]) / len(e["cpu_samples"])
                if e["cpu_samples"] else 0.0
            ),
        }
        for role, e in by_role.items()
    }


def run_bench(cfg: BenchConfig) -> BenchReport:
    """Run the configured cluster(s) and write bench.csv/stages.csv/figures."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for w in cfg.workers:
        runs.append(run_single(cfg, w, cfg.out_dir / f"run_w{w}"))

    bench_csv = cfg.out_dir / "bench.csv"
    with open(bench_csv, "w", encoding="utf-8") as fh:
        fh.write(BENCH_CSV_HEADER + "\n")
        for r in runs:
            fh.write(r.csv_row() + "\n")

    stages_csv = cfg.out_dir / "stages.csv"
    pooled = _stage_medians([Path(r.run_dir) / "spool" for r in runs])
    with open(stages_csv, "w", encoding="utf-8") as fh:
        fh.write(STAGES_CSV_HEADER + "\n")
        for stage in STAGE_NAMES:
            m = pooled[stage]
            fh.write(f"{stage},{m['median_rps']:.3f},{m['samples']}\n")

    report = BenchReport(
        config={k: str(v) if isinstance(v, Path) else v
                for k, v in asdict(cfg).items()},
        runs=runs,
        bench_csv=str(bench_csv),
        stages_csv=str(stages_csv),
    )
    (cfg.out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2), "utf-8"
    )

    if cfg.figures:
        from . import plots

        plots.render_bench_figures(cfg.out_dir)
    return report


def format_report(report: BenchReport) -> str:
    lines = ["bench summary:"]
    for r in report.runs:
        lines.append(
            f"  workers={r.workers} globals={r.globals_produced} "
            f"coordinator_rps={r.coordinator_rps:.0f} warm_rps={r.warm_rps:.0f} "
            f"injected={r.injected_pairs} conserved={r.conserved}"
        )
    for stage, m in report.runs[-1].stage_medians.items():
        lines.append(
            f"  stage {stage}: median {m['median_rps']:.0f} pairs/s "
            f"({m['samples']} samples)"
        )
    lines.append(f"  rows: {report.bench_csv}")
    return "\n".join(lines)
