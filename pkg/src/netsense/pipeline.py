"""Worker-side pipeline: buffer pairs, cut base matrices, aggregate locally.

Structure mirrors the runtime split: a BaseCutter owns the in-memory pair
buffer and cuts a base matrix every n_v pairs; a LocalAggregator folds n_b
bases into each local aggregate using either the batch (deserialize all,
hierarchical sum) or the incremental (running in-place sum) strategy.  Both
strategies produce byte-identical local aggregates for the same bases.

WorkerPipeline drives the two synchronously (used by tests and by callers
that want inline control); WorkerRuntime runs aggregation on its own thread
behind a bounded descriptor queue so ingest latency stays flat between cuts,
with producers blocking rather than dropping pairs when aggregation lags.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import dbtm
from .analytics import AnalyticsLog, compute_quantities
from .config import PipelineConfig
from .matrix import TrafficMatrix

LEVEL_BASE = "base"
LEVEL_LOCAL = "local"
LEVEL_GLOBAL = "global"


class PipelineFault(RuntimeError):
    """A base or local aggregate could not be processed; names the seq."""


@dataclass(frozen=True)
class AggregateDescriptor:
    rank: int
    level: str
    seq: int
    pair_count: int
    path: Path | None = None


class StageLog:
    """CSV log of per-stage timing samples: ts,stage,pairs,seconds."""

    HEADER = "ts,stage,pairs,seconds"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists()
        self._fh = open(self.path, "a", encoding="utf-8")
        self._lock = threading.Lock()
        if new:
            self._fh.write(self.HEADER + "\n")

    def sample(self, stage: str, pairs: int, seconds: float) -> None:
        with self._lock:
            self._fh.write(f"{time.time():.6f},{stage},{pairs},{seconds:.9f}\n")
            self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class BaseCutter:
    """Fixed-size pair buffer that yields full n_v-pair snapshots."""

    def __init__(self, n_v: int):
        self.n_v = n_v
        self._src = np.empty(n_v, dtype=np.uint32)
        self._dst = np.empty(n_v, dtype=np.uint32)
        self._fill = 0
        self.accepted = 0

    @property
    def pending_pairs(self) -> int:
        return self._fill

    def push(self, src: np.ndarray, dst: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Append a block; return snapshots for every buffer it fills."""
        out = []
        off = 0
        n = len(src)
        self.accepted += n
        while off < n:
            take = min(self.n_v - self._fill, n - off)
            self._src[self._fill:self._fill + take] = src[off:off + take]
            self._dst[self._fill:self._fill + take] = dst[off:off + take]
            self._fill += take
            off += take
            if self._fill == self.n_v:
                out.append((self._src.copy(), self._dst.copy()))
                self._fill = 0
        return out


class LocalAggregator:
    """Folds base matrices into local aggregates of exactly n_a pairs."""

    def __init__(self, cfg: PipelineConfig, *,
                 emit=None,
                 analytics_log: AnalyticsLog | None = None,
                 stage_log: StageLog | None = None):
        self.cfg = cfg
        self.emit = emit
        self.analytics_log = analytics_log
        self.stage_log = stage_log
        self.local_seq = 0
        self._window: list[AggregateDescriptor] = []
        self._working: TrafficMatrix | None = None
        self._window_seconds = 0.0
        self._local_dir = cfg.rank_dir() / LEVEL_LOCAL
        self._local_dir.mkdir(parents=True, exist_ok=True)

    @property
    def pending_base_pairs(self) -> int:
        """Pair mass buffered in the unfinished local window."""
        if self.cfg.strategy == "incremental":
            return self._working.request_total if self._working else 0
        return len(self._window) * self.cfg.n_v

    def _load(self, desc: AggregateDescriptor) -> TrafficMatrix:
        try:
            return dbtm.load_matrix(desc.path)
        except (OSError, dbtm.DbtmFormatError) as exc:
            raise PipelineFault(
                f"rank {self.cfg.rank} base seq {desc.seq}: {exc}"
            ) from exc

    def add_base(self, desc: AggregateDescriptor) -> AggregateDescriptor | None:
        """Fold one base descriptor in; returns the local descriptor when a
        window of n_b bases completes."""
        self._window.append(desc)
        if self.cfg.strategy == "incremental":
            t0 = time.perf_counter()
            base = self._load(desc)
            self._working = base if self._working is None else self._working.add(base)
            self._window_seconds += time.perf_counter() - t0
            if self._working.request_total >= self.cfg.n_a:
                return self._finalize(self._working)
            return None
        # batch: wait for the full window, then deserialize and sum
        if len(self._window) < self.cfg.n_b:
            return None
        t0 = time.perf_counter()
        bases = [self._load(d) for d in self._window]
        from .matrix import sum_tree

        local = sum_tree(bases)
        self._window_seconds += time.perf_counter() - t0
        return self._finalize(local)

    def _finalize(self, local: TrafficMatrix) -> AggregateDescriptor:
        cfg = self.cfg
        if local.request_total != cfg.n_a:
            raise PipelineFault(
                f"rank {cfg.rank}: local aggregate has {local.request_total} "
                f"pairs, expected n_a={cfg.n_a}"
            )
        self.local_seq += 1
        path = self._local_dir / f"{self.local_seq}.dbtm"
        t0 = time.perf_counter()
        payload = dbtm.serialize(local, compress=cfg.compress)
        dbtm.atomic_write_bytes(path, payload)
        self._window_seconds += time.perf_counter() - t0
        if self.stage_log:
            self.stage_log.sample("aggregation", cfg.n_a, self._window_seconds)

        t0 = time.perf_counter()
        q = compute_quantities(local)
        if self.analytics_log:
            self.analytics_log.append(q, rank=cfg.rank, level=LEVEL_LOCAL,
                                      seq=self.local_seq)
        if self.stage_log:
            self.stage_log.sample("analytics", cfg.n_a, time.perf_counter() - t0)

        if cfg.retention == "delete":
            for d in self._window:
                if d.path is not None:
                    d.path.unlink(missing_ok=True)
        self._window = []
        self._working = None
        self._window_seconds = 0.0

        desc = AggregateDescriptor(cfg.rank, LEVEL_LOCAL, self.local_seq,
                                   cfg.n_a, path)
        if self.emit is not None:
            self.emit(desc, payload)
        return desc


@dataclass
class WorkerStats:
    rank: int
    injected_pairs: int = 0
    bases_built: int = 0
    locals_emitted: int = 0
    leftover_buffer_pairs: int = 0
    leftover_base_pairs: int = 0
    stall_seconds: float = 0.0
    elapsed_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class WorkerPipeline:
    """Synchronous accept() -> base/local event state machine."""

    def __init__(self, cfg: PipelineConfig, *, emit=None,
                 analytics_log: AnalyticsLog | None = None,
                 stage_log: StageLog | None = None):
        if cfg.rank < 1:
            raise ValueError("worker rank must be >= 1")
        self.cfg = cfg
        self.cutter = BaseCutter(cfg.n_v)
        self.base_seq = 0
        self._base_dir = cfg.rank_dir() / LEVEL_BASE
        self._base_dir.mkdir(parents=True, exist_ok=True)
        self.stage_log = stage_log
        self.aggregator = LocalAggregator(cfg, emit=emit,
                                          analytics_log=analytics_log,
                                          stage_log=stage_log)

    def build_base(self, src: np.ndarray, dst: np.ndarray) -> AggregateDescriptor:
        """Construct, persist, and describe one base matrix."""
        t0 = time.perf_counter()
        m = TrafficMatrix.from_arrays(src, dst)
        dt = time.perf_counter() - t0
        if self.stage_log:
            self.stage_log.sample("construction", len(src), dt)
        self.base_seq += 1
        path = self._base_dir / f"{self.base_seq}.dbtm"
        dbtm.save_matrix(m, path, compress=self.cfg.compress)
        return AggregateDescriptor(self.cfg.rank, LEVEL_BASE, self.base_seq,
                                   len(src), path)

    def accept(self, src: int, dst: int) -> AggregateDescriptor | None:
        """Buffer one pair; returns the base descriptor on a buffer cut."""
        events = self.accept_block(np.array([src], np.uint32),
                                   np.array([dst], np.uint32))
        return events[0] if events else None

    def accept_block(self, src: np.ndarray, dst: np.ndarray) -> list[AggregateDescriptor]:
        """Buffer a block; returns base descriptors for any cuts, feeding
        each into the aggregator inline."""
        descs = []
        for bsrc, bdst in self.cutter.push(src, dst):
            desc = self.build_base(bsrc, bdst)
            self.aggregator.add_base(desc)
            descs.append(desc)
        return descs

    @property
    def leftover_pairs(self) -> tuple[int, int]:
        return self.cutter.pending_pairs, self.aggregator.pending_base_pairs


class WorkerRuntime:
    """Threaded worker: ingest on the calling thread, aggregation behind a
    bounded queue so a slow aggregation stalls ingestion instead of losing
    pairs."""

    QUEUE_DEPTH = 1  # pairs in flight <= buffer (n_v) + queued base (n_v)

    def __init__(self, cfg: PipelineConfig, outbox):
        if cfg.rank < 1:
            raise ValueError("worker rank must be >= 1")
        self.cfg = cfg
        self.outbox = outbox
        rank_dir = cfg.rank_dir()
        rank_dir.mkdir(parents=True, exist_ok=True)
        self.stage_log = StageLog(rank_dir / "stages.csv")
        self.analytics_log = AnalyticsLog(rank_dir / "analytics.log")
        self.pipeline = WorkerPipeline(
            cfg,
            emit=self._emit_local,
            analytics_log=self.analytics_log,
            stage_log=self.stage_log,
        )
        # Aggregation runs off this queue on its own thread.
        self._queue: queue.Queue = queue.Queue(maxsize=self.QUEUE_DEPTH)
        self._agg_error: BaseException | None = None
        self._thread = threading.Thread(target=self._agg_loop, daemon=True)
        self.stats = WorkerStats(rank=cfg.rank)
        self.stop_requested = False

    def _emit_local(self, desc: AggregateDescriptor, payload: bytes) -> None:
        self.outbox.send_local(desc, payload)
        self.stats.locals_emitted += 1

    def _agg_loop(self) -> None:
        try:
            while True:
                desc = self._queue.get()
                if desc is None:
                    return
                self.pipeline.aggregator.add_base(desc)
        except BaseException as exc:  # surfaced by run() after join
            self._agg_error = exc

    def _check_agg(self) -> None:
        if self._agg_error is not None:
            raise self._agg_error

    def run(self, blocks, duration: float | None = None) -> WorkerStats:
        """Consume pair blocks until exhaustion or the duration elapses."""
        t_start = time.monotonic()
        deadline = None if duration is None else t_start + duration
        self._thread.start()
        try:
            for src, dst in blocks:
                if self.stop_requested:
                    break
                if len(src):
                    self._ingest_block(src, dst)
                    self._check_agg()
                if deadline is not None and time.monotonic() >= deadline:
                    break
        finally:
            self._queue.put(None)
            self._thread.join()
        self._check_agg()

        st = self.stats
        st.injected_pairs = self.pipeline.cutter.accepted
        st.bases_built = self.pipeline.base_seq
        st.leftover_buffer_pairs = self.pipeline.cutter.pending_pairs
        st.leftover_base_pairs = self.pipeline.aggregator.pending_base_pairs
        st.elapsed_seconds = time.monotonic() - t_start
        self._write_stats()
        self.outbox.send_shutdown(st.to_dict())
        self.stage_log.close()
        self.analytics_log.close()
        return st

    def _ingest_block(self, src: np.ndarray, dst: np.ndarray) -> None:
        for bsrc, bdst in self.pipeline.cutter.push(src, dst):
            desc = self.pipeline.build_base(bsrc, bdst)
            t0 = time.monotonic()
            self._queue.put(desc)
            self.stats.stall_seconds += time.monotonic() - t0

    def _write_stats(self) -> None:
        path = self.cfg.rank_dir() / "worker_stats.json"
        path.write_text(json.dumps(self.stats.to_dict(), indent=2), "utf-8")


class MpOutbox:
    """Worker-to-coordinator output over rank-addressed message channels."""

    def __init__(self, msg_root: str | Path, rank: int):
        from .transport import MessageSender

        self._sender = MessageSender(msg_root, rank)

    def send_local(self, desc: AggregateDescriptor, payload: bytes) -> None:
        from .transport import TAG_LOCAL_AGGREGATE

        self._sender.send(0, TAG_LOCAL_AGGREGATE, payload)

    def send_shutdown(self, stats: dict) -> None:
        from .transport import TAG_SHUTDOWN

        self._sender.send(0, TAG_SHUTDOWN, json.dumps(stats).encode("utf-8"))


class SfsOutbox:
    """Worker-to-coordinator output over the shared-filesystem spool."""

    def __init__(self, shared_root: str | Path, rank: int):
        from .transport import SfsSpool

        self._spool = SfsSpool(shared_root)
        self._rank = rank

    def send_local(self, desc: AggregateDescriptor, payload: bytes) -> None:
        self._spool.publish_local(self._rank, desc.seq, payload)

    def send_shutdown(self, stats: dict) -> None:
        self._spool.publish_done(self._rank, stats)


class CollectOutbox:
    """Test outbox: keeps everything in memory."""

    def __init__(self):
        self.locals: list[tuple[AggregateDescriptor, bytes]] = []
        self.shutdowns: list[dict] = []

    def send_local(self, desc, payload):
        self.locals.append((desc, payload))

    def send_shutdown(self, stats):
        self.shutdowns.append(stats)


def shared_spool_root(cfg: PipelineConfig) -> Path:
    """Shared-filesystem coordination area for SFS transport."""
    return cfg.spool_dir / "shared"


def make_outbox(cfg: PipelineConfig):
    if cfg.transport == "message_passing":
        return MpOutbox(cfg.msg_root, cfg.rank)
    return SfsOutbox(shared_spool_root(cfg), cfg.rank)
