"""IP-pair sources: synthetic generators, pair-file replay, and an HTTP tap.

All sources emit blocks of parallel (src, dst) uint32 numpy arrays rather
than single pairs; when rate-throttled, a block never covers more than 1 ms
of traffic so injection stays smooth without per-pair bookkeeping.
"""

from __future__ import annotations

import csv
import queue
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import ConfigError, TrafficSourceConfig
from .matrix import parse_ipv4

PairBlock = tuple[np.ndarray, np.ndarray]

PAIR_DTYPE = np.dtype([("src", "<u4"), ("dst", "<u4")])

# Unthrottled sources emit blocks of this many pairs.
FREE_RUN_BLOCK = 2**14


class MalformedRecordError(ValueError):
    """A replay file record that cannot be parsed; names the offset."""


class TokenBucket:
    """Token-bucket throttle against the monotonic clock.

    Tokens accrue at `rate` per second up to `burst`; acquire(n) sleeps
    until n tokens are available, so the long-run emission rate converges
    to `rate` while short scheduling stalls are absorbed by the burst
    allowance instead of being lost.
    """

    def __init__(self, rate: float, burst: float | None = None):
        if rate <= 0:
            raise ValueError("token bucket needs a positive rate")
        self.rate = float(rate)
        # Default burst: 100 ms of traffic, at least one block.
        self.burst = max(rate * 0.1, 1.0) if burst is None else float(burst)
        self._tokens = 0.0
        self._last = time.monotonic()

    def _refill(self) -> None:
        now = time.monotonic()
        self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
        self._last = now

    def acquire(self, n: int) -> None:
        self._refill()
        while self._tokens < n:
            deficit = n - self._tokens
            time.sleep(deficit / self.rate)
            self._refill()
        self._tokens -= n


def _throttle_block_size(rate: float) -> int:
    return max(1, int(rate / 1000.0))


def _zipf_cdf(exponent: float, universe: int) -> np.ndarray:
    weights = np.arange(1, universe + 1, dtype=np.float64) ** -exponent
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return cdf


def synthetic_blocks(cfg: TrafficSourceConfig) -> Iterator[PairBlock]:
    """Deterministic pseudo-random pair blocks.

    uniform32 draws src and dst independently uniform over the full 32-bit
    space; zipf draws both endpoints from a rank-weighted distribution over
    a bounded address universe (heavier-tailed, closer to real traffic).
    """
    if cfg.kind != "synthetic":
        raise ConfigError(f"synthetic_blocks needs kind='synthetic', got {cfg.kind}")
    rng = np.random.default_rng(cfg.seed)
    bucket = TokenBucket(cfg.rate) if cfg.rate > 0 else None
    block = _throttle_block_size(cfg.rate) if bucket else FREE_RUN_BLOCK
    cdf = None
    if cfg.distribution == "zipf":
        cdf = _zipf_cdf(cfg.zipf_exponent, cfg.universe)

    remaining = cfg.total
    while remaining is None or remaining > 0:
        n = block if remaining is None else min(block, remaining)
        if bucket:
            bucket.acquire(n)
        if cdf is None:
            src = rng.integers(0, 2**32, size=n, dtype=np.uint32)
            dst = rng.integers(0, 2**32, size=n, dtype=np.uint32)
        else:
            src = np.searchsorted(cdf, rng.random(n)).astype(np.uint32)
            dst = np.searchsorted(cdf, rng.random(n)).astype(np.uint32)
        if remaining is not None:
            remaining -= n
        yield src, dst


def replay_blocks(cfg: TrafficSourceConfig) -> Iterator[PairBlock]:
    """Replay a recorded pair file in order, with optional throttling.

    `.csv` paths are parsed as dotted-quad "src,dst" lines; anything else
    is the binary pair-list format (little-endian u32 src, u32 dst records,
    see docs/format.md).
    """
    if cfg.kind != "replay":
        raise ConfigError(f"replay_blocks needs kind='replay', got {cfg.kind}")
    path = Path(cfg.path)
    if not path.exists():
        raise FileNotFoundError(f"replay file not found: {path}")
    bucket = TokenBucket(cfg.rate) if cfg.rate > 0 else None
    block = _throttle_block_size(cfg.rate) if bucket else FREE_RUN_BLOCK

    if path.suffix.lower() == ".csv":
        blocks = _read_csv_blocks(path, FREE_RUN_BLOCK)
    else:
        blocks = _read_binary_blocks(path, FREE_RUN_BLOCK)

    emitted = 0
    for src, dst in blocks:
        off = 0
        while off < len(src):
            n = len(src) - off
            if cfg.total is not None:
                n = min(n, cfg.total - emitted)
                if n <= 0:
                    return
            n = min(n, block)
            if bucket:
                bucket.acquire(n)
            yield src[off:off + n], dst[off:off + n]
            emitted += n
            off += n
    return


def _read_binary_blocks(path: Path, chunk: int) -> Iterator[PairBlock]:
    size = path.stat().st_size
    if size % PAIR_DTYPE.itemsize:
        raise MalformedRecordError(
            f"{path}: truncated record at byte {size - size % PAIR_DTYPE.itemsize}"
        )
    with open(path, "rb") as fh:
        while True:
            buf = fh.read(chunk * PAIR_DTYPE.itemsize)
            if not buf:
                return
            recs = np.frombuffer(buf, dtype=PAIR_DTYPE)
            yield recs["src"].astype(np.uint32), recs["dst"].astype(np.uint32)


def _read_csv_blocks(path: Path, chunk: int) -> Iterator[PairBlock]:
    src: list[int] = []
    dst: list[int] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise MalformedRecordError(
                    f"{path}: line {lineno}: expected 'src,dst', got {row!r}"
                )
            try:
                src.append(parse_ipv4(row[0].strip()))
                dst.append(parse_ipv4(row[1].strip()))
            except (ValueError, TypeError) as exc:
                raise MalformedRecordError(
                    f"{path}: line {lineno}: {exc}"
                ) from exc
            if len(src) >= chunk:
                yield np.array(src, np.uint32), np.array(dst, np.uint32)
                src, dst = [], []
    if src:
        yield np.array(src, np.uint32), np.array(dst, np.uint32)


def write_pairs_binary(path: str | Path, src, dst) -> None:
    recs = np.empty(len(src), dtype=PAIR_DTYPE)
    recs["src"] = src
    recs["dst"] = dst
    with open(path, "wb") as fh:
        fh.write(recs.tobytes())


def write_pairs_csv(path: str | Path, src, dst) -> None:
    from .matrix import format_ipv4

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for s, d in zip(src, dst):
            w.writerow([format_ipv4(int(s)), format_ipv4(int(d))])


class _TapHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def _observe(self):
        tap: HttpTap = self.server.tap  # type: ignore[attr-defined]
        try:
            src = parse_ipv4(self.client_address[0])
            dst = parse_ipv4(self.request.getsockname()[0])
        except (ValueError, IndexError):
            tap.note_skipped()
            src = None
            dst = None
        self.send_response(204)
        self.send_header("Content-Length", "0")
        self.end_headers()
        # Emit only after the response is fully written: stream order is
        # arrival order of request completion.
        if src is not None:
            tap.emit(src, dst)

    def log_message(self, fmt, *args):  # quiet
        pass

    def __getattr__(self, name):
        if name.startswith("do_"):
            return self._observe
        raise AttributeError(name)


class HttpTap:
    """Minimal HTTP endpoint that turns requests into IP pairs.

    Every request on any method/path gets a 204 and contributes one
    (client address, server address) pair; non-IPv4 peers are counted and
    skipped.  Pairs are drained in completion order via blocks().
    """

    def __init__(self, bind: tuple[str, int]):
        self._server = ThreadingHTTPServer(bind, _TapHandler)
        self._server.tap = self  # type: ignore[attr-defined]
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._skipped = 0
        self._lock = threading.Lock()
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
            daemon=True,
        )
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def skipped_non_ipv4(self) -> int:
        return self._skipped

    def emit(self, src: int, dst: int) -> None:
        self._queue.put((src, dst))

    def note_skipped(self) -> None:
        with self._lock:
            self._skipped += 1

    def drain(self, max_pairs: int = FREE_RUN_BLOCK, timeout: float = 0.05) -> PairBlock:
        """Collect up to max_pairs observed pairs, waiting at most timeout."""
        src: list[int] = []
        dst: list[int] = []
        try:
            s, d = self._queue.get(timeout=timeout)
            src.append(s)
            dst.append(d)
            while len(src) < max_pairs:
                s, d = self._queue.get_nowait()
                src.append(s)
                dst.append(d)
        except queue.Empty:
            pass
        return np.array(src, np.uint32), np.array(dst, np.uint32)

    def blocks(self, total: int | None = None) -> Iterator[PairBlock]:
        """Yield drained pair blocks until `total` pairs are emitted.

        Empty blocks are yielded while the tap is idle so callers can keep
        enforcing their own deadlines.
        """
        emitted = 0
        while total is None or emitted < total:
            cap = FREE_RUN_BLOCK if total is None else min(FREE_RUN_BLOCK, total - emitted)
            src, dst = self.drain(cap)
            emitted += len(src)
            yield src, dst

    def close(self) -> None:
        self._server.shutdown()
        self._thread.join(timeout=5)
        self._server.server_close()

    def __enter__(self) -> "HttpTap":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_blocks(cfg: TrafficSourceConfig) -> Iterator[PairBlock]:
    """Block iterator for file-backed and synthetic sources."""
    if cfg.kind == "synthetic":
        return synthetic_blocks(cfg)
    if cfg.kind == "replay":
        return replay_blocks(cfg)
    raise ConfigError(f"open_blocks does not handle kind={cfg.kind!r}; "
                      "use HttpTap for http_tap sources")
