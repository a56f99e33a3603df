import struct
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netsense import dbtm
from netsense.matrix import TrafficMatrix, parse_ipv4

from conftest import random_pair_arrays

DATA = Path(__file__).parent / "data"

addresses = st.integers(min_value=0, max_value=2**32 - 1)
entry_maps = st.dictionaries(st.tuples(addresses, addresses),
                             st.integers(min_value=1, max_value=2**20),
                             max_size=64)


def matrix_from_entries(entries: dict) -> TrafficMatrix:
    pairs = []
    for (s, d), c in entries.items():
        pairs.extend([(s, d)] * min(c, 1))
    keys = np.array(sorted((s << 32) | d for s, d in entries), dtype=np.uint64)
    counts = np.array([entries[(int(k) >> 32, int(k) & 0xFFFFFFFF)]
                       for k in keys], dtype=np.uint64)
    return TrafficMatrix(keys, counts, int(counts.sum()))


def test_empty_matrix_serializes_to_header_only():
    data = dbtm.serialize(TrafficMatrix.empty())
    assert len(data) == 24
    assert data == struct.pack("<4sHHQQ", b"DBTM", 1, 0, 0, 0)
    assert data == DATA.joinpath("golden_empty.dbtm").read_bytes()


def test_golden_small_fixture_byte_exact():
    pairs = (
        [(parse_ipv4("1.2.3.4"), parse_ipv4("5.6.7.8"))] * 3
        + [(parse_ipv4("1.2.3.4"), parse_ipv4("5.6.7.9"))]
        + [(parse_ipv4("9.9.9.9"), parse_ipv4("0.0.0.1"))] * 2
    )
    data = dbtm.serialize(TrafficMatrix.from_pairs(pairs))
    # independent byte-level expectation
    expected = struct.pack("<4sHHQQ", b"DBTM", 1, 0, 3, 6)
    expected += struct.pack("<IIQ", 0x01020304, 0x05060708, 3)
    expected += struct.pack("<IIQ", 0x01020304, 0x05060709, 1)
    expected += struct.pack("<IIQ", 0x09090909, 0x00000001, 2)
    assert data == expected
    assert data == DATA.joinpath("golden_small.dbtm").read_bytes()


def test_round_trip_random(rng):
    for _ in range(20):
        n = int(rng.integers(0, 5000))
        src, dst = random_pair_arrays(rng, n, int(rng.integers(2, 2**20)))
        m = TrafficMatrix.from_arrays(src, dst)
        assert dbtm.deserialize(dbtm.serialize(m)) == m


@settings(deadline=None, max_examples=50)
@given(entry_maps)
def test_round_trip_property(entries):
    m = matrix_from_entries(entries)
    back = dbtm.deserialize(dbtm.serialize(m))
    assert back == m
    assert back.request_total == m.request_total


def test_serialization_is_canonical_under_shuffle(rng):
    src, dst = random_pair_arrays(rng, 2048, 2**8)
    perm = rng.permutation(len(src))
    a = dbtm.serialize(TrafficMatrix.from_arrays(src, dst))
    b = dbtm.serialize(TrafficMatrix.from_arrays(src[perm], dst[perm]))
    assert a == b


def test_compressed_round_trip(rng):
    src, dst = random_pair_arrays(rng, 4096, 2**6)
    m = TrafficMatrix.from_arrays(src, dst)
    data = dbtm.serialize(m, compress=True)
    _, _, flags, _, _ = dbtm.HEADER.unpack_from(data)
    assert flags & dbtm.FLAG_COMPRESSED
    assert dbtm.deserialize(data) == m


def test_save_and_load(tmp_path, rng):
    src, dst = random_pair_arrays(rng, 256, 2**8)
    m = TrafficMatrix.from_arrays(src, dst)
    path = tmp_path / "m.dbtm"
    dbtm.save_matrix(m, path)
    assert not path.with_suffix(".dbtm.tmp").exists()
    assert dbtm.load_matrix(path) == m


# -- error taxonomy ----------------------------------------------------------

def _valid_bytes() -> bytes:
    return dbtm.serialize(TrafficMatrix.from_pairs([(1, 2), (1, 2), (3, 4)]))


def test_truncated_header():
    with pytest.raises(dbtm.TruncatedPayloadError):
        dbtm.deserialize(_valid_bytes()[:10])


def test_truncated_body_mid_triple():
    with pytest.raises(dbtm.TruncatedPayloadError):
        dbtm.deserialize(_valid_bytes()[:-3])


def test_bad_magic():
    data = bytearray(_valid_bytes())
    data[:4] = b"NOPE"
    with pytest.raises(dbtm.BadMagicError):
        dbtm.deserialize(bytes(data))


def test_unsupported_version():
    data = bytearray(_valid_bytes())
    data[4:6] = struct.pack("<H", 9)
    with pytest.raises(dbtm.UnsupportedVersionError):
        dbtm.deserialize(bytes(data))


def test_reserved_flags_rejected():
    data = bytearray(_valid_bytes())
    data[6:8] = struct.pack("<H", 0x0002)
    with pytest.raises(dbtm.ReservedFlagError):
        dbtm.deserialize(bytes(data))


def test_header_nnz_one_with_empty_body_is_mismatch():
    data = struct.pack("<4sHHQQ", b"DBTM", 1, 0, 1, 1)
    with pytest.raises(dbtm.HeaderMismatchError):
        dbtm.deserialize(data)


def test_trailing_bytes_are_mismatch():
    data = _valid_bytes() + b"\x00" * 16
    with pytest.raises(dbtm.HeaderMismatchError):
        dbtm.deserialize(data)


def test_unsorted_triples_rejected():
    header = struct.pack("<4sHHQQ", b"DBTM", 1, 0, 2, 2)
    body = struct.pack("<IIQ", 5, 5, 1) + struct.pack("<IIQ", 1, 1, 1)
    with pytest.raises(dbtm.TripleOrderError):
        dbtm.deserialize(header + body)


def test_duplicate_triples_rejected():
    header = struct.pack("<4sHHQQ", b"DBTM", 1, 0, 2, 2)
    body = struct.pack("<IIQ", 1, 1, 1) * 2
    with pytest.raises(dbtm.TripleOrderError):
        dbtm.deserialize(header + body)


def test_zero_count_rejected():
    header = struct.pack("<4sHHQQ", b"DBTM", 1, 0, 1, 0)
    body = struct.pack("<IIQ", 1, 1, 0)
    with pytest.raises(dbtm.ZeroCountError):
        dbtm.deserialize(header + body)


def test_request_total_mismatch_rejected():
    header = struct.pack("<4sHHQQ", b"DBTM", 1, 0, 1, 99)
    body = struct.pack("<IIQ", 1, 1, 1)
    with pytest.raises(dbtm.HeaderMismatchError):
        dbtm.deserialize(header + body)


def test_corrupt_compressed_payload():
    header = struct.pack("<4sHHQQ", b"DBTM", 1, dbtm.FLAG_COMPRESSED, 1, 1)
    with pytest.raises(dbtm.PayloadDecodeError):
        dbtm.deserialize(header + b"not zlib data")


def test_compressed_payload_wrong_length_is_mismatch():
    body = zlib.compress(struct.pack("<IIQ", 1, 1, 1))
    header = struct.pack("<4sHHQQ", b"DBTM", 1, dbtm.FLAG_COMPRESSED, 2, 2)
    with pytest.raises(dbtm.HeaderMismatchError):
        dbtm.deserialize(header + body)


def test_all_format_errors_share_base_class():
    for exc in (dbtm.BadMagicError, dbtm.UnsupportedVersionError,
                dbtm.ReservedFlagError, dbtm.TruncatedPayloadError,
                dbtm.PayloadDecodeError, dbtm.TripleOrderError,
                dbtm.ZeroCountError, dbtm.HeaderMismatchError):
        assert issubclass(exc, dbtm.DbtmFormatError)
