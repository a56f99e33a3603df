import http.client
import threading
import time

import numpy as np
import pytest

from netsense.config import ConfigError, TrafficSourceConfig
from netsense.ingest import (
    HttpTap,
    MalformedRecordError,
    TokenBucket,
    open_blocks,
    replay_blocks,
    synthetic_blocks,
    write_pairs_binary,
    write_pairs_csv,
)
from netsense.matrix import parse_ipv4


def collect(blocks):
    src, dst = [], []
    for s, d in blocks:
        src.append(s)
        dst.append(d)
    if not src:
        return np.empty(0, np.uint32), np.empty(0, np.uint32)
    return np.concatenate(src), np.concatenate(dst)


def test_synthetic_deterministic_for_seed():
    cfg = TrafficSourceConfig(kind="synthetic", seed=1, total=10)
    a = collect(synthetic_blocks(cfg))
    b = collect(synthetic_blocks(cfg))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert len(a[0]) == 10


def test_synthetic_different_seeds_differ():
    a = collect(synthetic_blocks(TrafficSourceConfig(seed=1, total=1000)))
    b = collect(synthetic_blocks(TrafficSourceConfig(seed=2, total=1000)))
    assert not np.array_equal(a[0], b[0])


def test_uniform32_spans_full_address_space():
    src, dst = collect(synthetic_blocks(TrafficSourceConfig(seed=3, total=20000)))
    assert int(src.max()) > 2**31 and int(dst.max()) > 2**31
    assert int(src.min()) < 2**28


def test_total_cap_respected():
    src, _ = collect(synthetic_blocks(TrafficSourceConfig(seed=0, total=12345)))
    assert len(src) == 12345


def test_zipf_skew():
    cfg = TrafficSourceConfig(kind="synthetic", seed=5, total=100_000,
                              distribution="zipf", zipf_exponent=1.5,
                              universe=2**10)
    src, dst = collect(synthetic_blocks(cfg))
    assert int(src.max()) < 2**10
    freq = np.bincount(src)
    freq = freq[freq > 0]
    assert freq.max() >= 10 * np.median(freq)


def test_zipf_universe_cap():
    with pytest.raises(ConfigError):
        TrafficSourceConfig(distribution="zipf", universe=2**30)


def test_token_bucket_long_run_rate():
    bucket = TokenBucket(rate=20_000)
    t0 = time.monotonic()
    got = 0
    while got < 20_000:
        bucket.acquire(20)
        got += 20
    elapsed = time.monotonic() - t0
    assert 0.95 <= elapsed <= 1.25


def test_throttled_stream_hits_target_rate_over_10s():
    # fixed 10 s window at 10^4 RPS -> 10^5 +- 5% pairs
    cfg = TrafficSourceConfig(kind="synthetic", seed=9, rate=10_000)
    deadline = time.monotonic() + 10.0
    emitted = 0
    for src, _ in synthetic_blocks(cfg):
        emitted += len(src)
        if time.monotonic() >= deadline:
            break
    assert 95_000 <= emitted <= 105_000


def test_throttle_block_granularity():
    cfg = TrafficSourceConfig(kind="synthetic", seed=0, rate=10_000, total=100)
    sizes = [len(s) for s, _ in synthetic_blocks(cfg)]
    assert max(sizes) <= 10  # 1 ms of traffic at 10^4 RPS


def test_replay_binary_round_trip(tmp_path, rng):
    src = rng.integers(0, 2**32, 1000, dtype=np.uint32)
    dst = rng.integers(0, 2**32, 1000, dtype=np.uint32)
    path = tmp_path / "pairs.bin"
    write_pairs_binary(path, src, dst)
    rs, rd = collect(replay_blocks(TrafficSourceConfig(kind="replay", path=path)))
    assert np.array_equal(rs, src) and np.array_equal(rd, dst)


def test_replay_empty_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    rs, rd = collect(replay_blocks(TrafficSourceConfig(kind="replay", path=path)))
    assert len(rs) == 0 and len(rd) == 0


def test_replay_truncated_binary_names_offset(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 21)  # 2.625 records
    with pytest.raises(MalformedRecordError, match="byte 16"):
        collect(replay_blocks(TrafficSourceConfig(kind="replay", path=path)))


def test_replay_missing_file(tmp_path):
    cfg = TrafficSourceConfig(kind="replay", path=tmp_path / "nope.bin")
    with pytest.raises(FileNotFoundError):
        next(iter(replay_blocks(cfg)))


def test_replay_csv_round_trip(tmp_path, rng):
    src = rng.integers(0, 2**32, 64, dtype=np.uint32)
    dst = rng.integers(0, 2**32, 64, dtype=np.uint32)
    path = tmp_path / "pairs.csv"
    write_pairs_csv(path, src, dst)
    rs, rd = collect(replay_blocks(TrafficSourceConfig(kind="replay", path=path)))
    assert np.array_equal(rs, src) and np.array_equal(rd, dst)


def test_replay_csv_malformed_line_names_lineno(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1.2.3.4,5.6.7.8\nnot-an-ip,9.9.9.9\n")
    with pytest.raises(MalformedRecordError, match="line 2"):
        collect(replay_blocks(TrafficSourceConfig(kind="replay", path=path)))


def test_replay_total_and_throttle(tmp_path, rng):
    src = rng.integers(0, 2**32, 500, dtype=np.uint32)
    dst = rng.integers(0, 2**32, 500, dtype=np.uint32)
    path = tmp_path / "pairs.bin"
    write_pairs_binary(path, src, dst)
    cfg = TrafficSourceConfig(kind="replay", path=path, total=100, rate=1000)
    t0 = time.monotonic()
    rs, _ = collect(replay_blocks(cfg))
    elapsed = time.monotonic() - t0
    assert np.array_equal(rs, src[:100])
    assert elapsed >= 0.08


def test_open_blocks_rejects_http():
    cfg = TrafficSourceConfig(kind="http_tap", bind=("127.0.0.1", 0))
    with pytest.raises(ConfigError):
        open_blocks(cfg)


# -- HTTP tap -----------------------------------------------------------------

def _request(addr, method="GET", path="/"):
    conn = http.client.HTTPConnection(addr[0], addr[1], timeout=5)
    conn.request(method, path)
    resp = conn.getresponse()
    resp.read()
    conn.close()
    return resp.status


def test_http_tap_single_request_pair():
    with HttpTap(("127.0.0.1", 0)) as tap:
        assert _request(tap.address, "POST", "/anything") == 204
        src, dst = tap.drain(timeout=2.0)
        assert len(src) == 1
        assert int(src[0]) == parse_ipv4("127.0.0.1")
        assert int(dst[0]) == parse_ipv4(tap.address[0])
        assert tap.skipped_non_ipv4 == 0


def test_http_tap_zero_requests_empty_stream():
    with HttpTap(("127.0.0.1", 0)) as tap:
        src, dst = tap.drain(timeout=0.05)
        assert len(src) == 0 and len(dst) == 0


def test_http_tap_concurrent_requests_no_loss():
    with HttpTap(("127.0.0.1", 0)) as tap:
        threads = [threading.Thread(target=_request, args=(tap.address,))
                   for _ in range(100)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        got = 0
        deadline = time.monotonic() + 10
        while got < 100 and time.monotonic() < deadline:
            src, _ = tap.drain(timeout=0.2)
            got += len(src)
        assert got == 100
