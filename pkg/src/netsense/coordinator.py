"""Rank-0 coordinator: collect local aggregates, form globals, track metrics.

The coordinator polls its transport for incoming local aggregates and folds
every ``n_g / n_a`` of them into one global aggregate (count-based windows:
a window closes after that many locals regardless of which ranks they came
from).  Each finalized global is persisted, analyzed, and recorded as one
row of metrics.  Shutdown notices from all expected workers plus drained
channels end the run; a partial window is reported in the stats but never
emitted as a global.
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import dbtm
from .analytics import AnalyticsLog, compute_quantities
from .config import PipelineConfig
from .matrix import TrafficMatrix, sum_tree
from .pipeline import LEVEL_GLOBAL, StageLog
from .transport import (
    MessageReceiver,
    PoisonMessageError,
    SfsSpool,
    TAG_LOCAL_AGGREGATE,
    TransportFault,
)


def estimate_max_workers(coordinator_rps: float, injection_rps: float) -> int:
    """How many workers one coordinator can absorb before falling behind.

    Exact floor of the rate ratio; both rates must be positive.
    """
    if coordinator_rps <= 0 or injection_rps <= 0:
        raise ValueError("rates must be positive")
    return math.floor(coordinator_rps / injection_rps)


def coordinator_rps(globals_produced: int, n_g: int, elapsed_seconds: float) -> float:
    """Throughput metric: pairs represented by finished globals per second."""
    if elapsed_seconds <= 0:
        raise ValueError("elapsed_seconds must be positive")
    return globals_produced * n_g / elapsed_seconds


class AggregateRejected(ValueError):
    """An incoming local aggregate that must be quarantined, not summed."""


class GlobalAggregator:
    """Folds incoming local aggregates into globals of exactly n_g pairs."""

    def __init__(self, cfg: PipelineConfig, *,
                 analytics_log: AnalyticsLog | None = None,
                 stage_log: StageLog | None = None):
        self.cfg = cfg
        self.analytics_log = analytics_log
        self.stage_log = stage_log
        self.global_seq = 0
        self._window: list[TrafficMatrix] = []
        self._working: TrafficMatrix | None = None
        self._window_seconds = 0.0
        self._global_dir = cfg.rank_dir(0) / "global"
        self._global_dir.mkdir(parents=True, exist_ok=True)

    @property
    def pending_pairs(self) -> int:
        if self.cfg.strategy == "incremental":
            return self._working.request_total if self._working else 0
        return sum(m.request_total for m in self._window)

    def add_local(self, payload: bytes) -> Path | None:
        """Incorporate one serialized local aggregate; returns the path of
        the finalized global when a window completes."""
        t0 = time.perf_counter()
        try:
            m = dbtm.deserialize(payload)
        except dbtm.DbtmFormatError as exc:
            raise AggregateRejected(str(exc)) from exc
        if m.request_total != self.cfg.n_a:
            raise AggregateRejected(
                f"local aggregate carries {m.request_total} pairs, "
                f"expected n_a={self.cfg.n_a}"
            )
        if self.cfg.strategy == "incremental":
            self._working = m if self._working is None else self._working.add(m)
            self._window_seconds += time.perf_counter() - t0
            if self._working.request_total >= self.cfg.n_g:
                return self._finalize(self._working)
            return None
        self._window.append(m)
        self._window_seconds += time.perf_counter() - t0
        if len(self._window) < self.cfg.locals_per_global:
            return None
        t0 = time.perf_counter()
        g = sum_tree(self._window)
        self._window_seconds += time.perf_counter() - t0
        return self._finalize(g)

    def _finalize(self, g: TrafficMatrix) -> Path:
        cfg = self.cfg
        if g.request_total != cfg.n_g:
            raise AggregateRejected(
                f"global aggregate has {g.request_total} pairs, expected "
                f"n_g={cfg.n_g}"
            )
        self.global_seq += 1
        path = self._global_dir / f"{self.global_seq}.dbtm"
        t0 = time.perf_counter()
        dbtm.save_matrix(g, path, compress=cfg.compress)
        self._window_seconds += time.perf_counter() - t0
        if self.stage_log:
            self.stage_log.sample("aggregation", cfg.n_g, self._window_seconds)
        t0 = time.perf_counter()
        q = compute_quantities(g)
        if self.analytics_log:
            self.analytics_log.append(q, rank=0, level=LEVEL_GLOBAL,
                                      seq=self.global_seq)
        if self.stage_log:
            self.stage_log.sample("analytics", cfg.n_g, time.perf_counter() - t0)
        self._window = []
        self._working = None
        self._window_seconds = 0.0
        return path


class MpInbox:
    """Coordinator input over rank-addressed message channels."""

    def __init__(self, msg_root, disposition: str = "delete"):
        self._rx = MessageReceiver(msg_root, 0, disposition)

    def poll(self):
        ref = self._rx.probe()
        if ref is None:
            return None
        try:
            msg = self._rx.recv(ref)
        except PoisonMessageError as exc:
            return ("poison", exc.channel, exc.seq, exc.reason)
        if msg.tag == TAG_LOCAL_AGGREGATE:
            return ("local", msg.src_rank, msg.seq, msg.payload)
        return ("shutdown", msg.src_rank, json.loads(msg.payload.decode("utf-8")))


class SfsInbox:
    """Coordinator input over the shared-filesystem spool."""

    def __init__(self, shared_root, disposition: str = "delete"):
        self._spool = SfsSpool(shared_root, disposition)
        self._known: set[str] = set()
        self._pending: deque = deque()
        self._done_seen: set[int] = set()

    def poll(self):
        if not self._pending:
            for ref in self._spool.scan(self._known):
                self._known.add(ref.name)
                self._pending.append(ref)
        if self._pending:
            ref = self._pending.popleft()
            data = ref.path.read_bytes()
            try:
                dbtm.deserialize(data)
            except dbtm.DbtmFormatError as exc:
                self._spool.quarantine(ref)
                return ("poison", f"sfs rank {ref.rank}", ref.seq, str(exc))
            self._spool.mark_consumed(ref)
            return ("local", ref.rank, ref.seq, data)
        # Done markers are only announced once the preceding scan came back
        # empty, so every aggregate published before a marker is consumed
        # before its shutdown event is delivered.
        for rank in sorted(self._spool.done_ranks() - self._done_seen):
            self._done_seen.add(rank)
            return ("shutdown", rank, self._spool.read_done(rank))
        return None


@dataclass
class CoordinatorStats:
    globals_produced: int = 0
    global_pairs: int = 0
    pending_pairs: int = 0
    locals_received: int = 0
    local_pairs_received: int = 0
    bytes_received: int = 0
    poison_messages: int = 0
    elapsed_seconds: float = 0.0
    idle_timeout_hit: bool = False
    per_rank_locals: dict = field(default_factory=dict)
    workers: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class MetricsWriter:
    """Per-global-window metrics rows."""

    HEADER = "timestamp,g,rps,window_latency_s,receive_to_finalize_s"

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")
        self._fh.write(self.HEADER + "\n")
        self._fh.flush()

    def row(self, g: int, rps: float, latency: float, lag: float) -> None:
        self._fh.write(f"{time.time():.6f},{g},{rps:.3f},{latency:.6f},{lag:.6f}\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class CoordinatorRuntime:
    """Probe/recv/incorporate loop with clean all-ranks-done shutdown."""

    POLL_MIN = 0.001
    POLL_MAX = 0.05
    FAULT_RETRIES = 5

    def __init__(self, cfg: PipelineConfig, inbox, expected_workers: int):
        self.cfg = cfg
        self.inbox = inbox
        self.expected = set(range(1, expected_workers + 1))
        rank_dir = cfg.rank_dir(0)
        rank_dir.mkdir(parents=True, exist_ok=True)
        self.stage_log = StageLog(rank_dir / "stages.csv")
        self.analytics_log = AnalyticsLog(rank_dir / "analytics.log")
        self.metrics = MetricsWriter(rank_dir / "metrics.csv")
        self.aggregator = GlobalAggregator(cfg, analytics_log=self.analytics_log,
                                           stage_log=self.stage_log)
        self.stats = CoordinatorStats()
        self._done: set[int] = set()
        self._window_first_arrival: float | None = None
        self._last_arrival = 0.0
        self.stop_requested = False

    def _poll_with_retry(self):
        delay = 0.1
        for attempt in range(self.FAULT_RETRIES):
            try:
                return self.inbox.poll()
            except TransportFault:
                if attempt == self.FAULT_RETRIES - 1:
                    raise
                time.sleep(delay)
                delay *= 2

    def run(self, idle_timeout: float | None = None) -> CoordinatorStats:
        t_start = time.monotonic()
        last_event = t_start
        sleep = self.POLL_MIN
        try:
            while not self.stop_requested:
                event = self._poll_with_retry()
                now = time.monotonic()
                if event is None:
                    if self._done >= self.expected:
                        # all ranks shut down and the final poll was empty
                        break
                    if idle_timeout and now - last_event > idle_timeout:
                        self.stats.idle_timeout_hit = True
                        break
                    time.sleep(sleep)
                    sleep = min(sleep * 2, self.POLL_MAX)
                    continue
                last_event = now
                sleep = self.POLL_MIN
                self._handle(event, now, t_start)
        finally:
            self.stats.elapsed_seconds = time.monotonic() - t_start
            self.stats.pending_pairs = self.aggregator.pending_pairs
            self._write_stats()
            self.metrics.close()
            self.analytics_log.close()
            self.stage_log.close()
        return self.stats

    def _handle(self, event, now: float, t_start: float) -> None:
        kind = event[0]
        if kind == "poison":
            self.stats.poison_messages += 1
            return
        if kind == "shutdown":
            _, rank, worker_stats = event
            self._done.add(rank)
            self.stats.workers.append(worker_stats)
            return
        _, rank, seq, payload = event
        self.stats.locals_received += 1
        self.stats.bytes_received += len(payload)
        self.stats.per_rank_locals[str(rank)] = (
            self.stats.per_rank_locals.get(str(rank), 0) + 1
        )
        if self._window_first_arrival is None:
            self._window_first_arrival = now
        self._last_arrival = now
        try:
            finalized = self.aggregator.add_local(payload)
        except AggregateRejected:
            self.stats.poison_messages += 1
            return
        self.stats.local_pairs_received += self.cfg.n_a
        if finalized is not None:
            t_done = time.monotonic()
            self.stats.globals_produced += 1
            self.stats.global_pairs += self.cfg.n_g
            rps = coordinator_rps(self.stats.globals_produced, self.cfg.n_g,
                                  t_done - t_start)
            self.metrics.row(
                self.stats.globals_produced,
                rps,
                t_done - self._window_first_arrival,
                t_done - self._last_arrival,
            )
            self._window_first_arrival = None

    def _write_stats(self) -> None:
        path = self.cfg.rank_dir(0) / "coordinator_stats.json"
        path.write_text(json.dumps(self.stats.to_dict(), indent=2), "utf-8")


def make_inbox(cfg: PipelineConfig, disposition: str = "delete"):
    if cfg.transport == "message_passing":
        return MpInbox(cfg.msg_root, disposition)
    from .pipeline import shared_spool_root

    return SfsInbox(shared_spool_root(cfg), disposition)
