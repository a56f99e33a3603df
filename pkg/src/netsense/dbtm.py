"""Canonical binary serialization of traffic matrices (`.dbtm`).

Layout (all little-endian, documented with a hex example in docs/format.md):

    offset  size  field
    0       4     magic  b"DBTM"
    4       2     version (currently 1)
    6       2     flags   (bit 0 = payload zlib-compressed, others reserved)
    8       8     nnz
    16      8     request_total
    24      ...   nnz triples: u32 src, u32 dst, u64 count

Triples are sorted strictly ascending by (src, dst), so equal matrices always
produce identical bytes regardless of construction order.  The optional
compression codec is pinned to zlib (RFC 1950) and applies to the triple
region only; the header is never compressed.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .matrix import TrafficMatrix, exact_u64_sum

MAGIC = b"DBTM"
VERSION = 1
FLAG_COMPRESSED = 0x0001

HEADER = struct.Struct("<4sHHQQ")
HEADER_SIZE = HEADER.size  # 24 bytes

TRIPLE_DTYPE = np.dtype([("src", "<u4"), ("dst", "<u4"), ("count", "<u8")])
TRIPLE_SIZE = TRIPLE_DTYPE.itemsize  # 16 bytes


class DbtmFormatError(ValueError):
    """Base class for `.dbtm` decode failures."""


class BadMagicError(DbtmFormatError):
    pass


class UnsupportedVersionError(DbtmFormatError):
    pass


class ReservedFlagError(DbtmFormatError):
    pass


class TruncatedPayloadError(DbtmFormatError):
    pass


class PayloadDecodeError(DbtmFormatError):
    pass


class TripleOrderError(DbtmFormatError):
    pass


class ZeroCountError(DbtmFormatError):
    pass


class HeaderMismatchError(DbtmFormatError):
    pass


def serialize(m: TrafficMatrix, compress: bool = False) -> bytes:
    """Encode a matrix to canonical bytes."""
    keys, counts = m.keys_counts()
    triples = np.empty(len(keys), dtype=TRIPLE_DTYPE)
    triples["src"] = (keys >> np.uint64(32)).astype(np.uint32)
    triples["dst"] = (keys & np.uint64(0xFFFFFFFF)).astype(np.uint32)
    triples["count"] = counts
    body = triples.tobytes()
    flags = 0
    if compress:
        flags |= FLAG_COMPRESSED
        body = zlib.compress(body, level=6)
    header = HEADER.pack(MAGIC, VERSION, flags, m.nnz, m.request_total)
    return header + body


def deserialize(data: bytes) -> TrafficMatrix:
    """Decode and fully validate canonical bytes back into a matrix."""
    if len(data) < HEADER_SIZE:
        raise TruncatedPayloadError(
            f"need {HEADER_SIZE} header bytes, have {len(data)}"
        )
    magic, version, flags, nnz, request_total = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if flags & ~FLAG_COMPRESSED:
        raise ReservedFlagError(f"reserved flag bits set: 0x{flags:04x}")

    body = data[HEADER_SIZE:]
    if flags & FLAG_COMPRESSED:
        try:
            body = zlib.decompress(body)
        except zlib.error as exc:
            raise PayloadDecodeError(f"zlib payload: {exc}") from exc

    expected = nnz * TRIPLE_SIZE
    if len(body) != expected:
        if len(body) % TRIPLE_SIZE:
            raise TruncatedPayloadError(
                f"payload cut mid-triple: {len(body)} bytes"
            )
        raise HeaderMismatchError(
            f"header says {nnz} triples ({expected} bytes), payload has {len(body)}"
        )

    triples = np.frombuffer(body, dtype=TRIPLE_DTYPE)
    src = triples["src"].astype(np.uint32)
    dst = triples["dst"].astype(np.uint32)
    counts = triples["count"].astype(np.uint64)
    keys = (src.astype(np.uint64) << np.uint64(32)) | dst.astype(np.uint64)

    if len(keys) and not np.all(keys[1:] > keys[:-1]):
        raise TripleOrderError("triples not strictly ascending by (src, dst)")
    if len(counts) and int(counts.min()) == 0:
        raise ZeroCountError("stored entry with count 0")
    total = exact_u64_sum(counts)
    if total != request_total:
        raise HeaderMismatchError(
            f"header request_total={request_total}, payload sums to {total}"
        )
    return TrafficMatrix(keys, counts, total)


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file + rename so readers never see partial content."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_matrix(m: TrafficMatrix, path: str | Path, compress: bool = False) -> int:
    """Serialize to a file atomically; returns the byte size written."""
    data = serialize(m, compress=compress)
    atomic_write_bytes(path, data)
    return len(data)


def load_matrix(path: str | Path) -> TrafficMatrix:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
