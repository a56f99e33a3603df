"""Hypersparse IPv4 traffic matrices.

A traffic matrix logically spans the full 2^32 x 2^32 IPv4 address space
(rows = source addresses, columns = destination addresses) but stores only
its nonzero request counts.  Entries are kept as a flat pair of arrays:
64-bit composite keys ``src << 32 | dst`` sorted strictly ascending, and
their unsigned 64-bit counts.  Row/column index structures (DCSR-style) are
derived from the sorted keys on demand; the column side is cached after the
first column query since only analytics ever needs it.

Matrices are immutable after construction and safe to share across threads;
they pickle cleanly for transfer between processes.
"""

from __future__ import annotations

import ipaddress
from typing import Iterable, Iterator, NamedTuple

import numpy as np

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1

_LOW32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)


class CountOverflowError(OverflowError):
    """An entry count or request total would exceed 64-bit unsigned range."""


class IpPair(NamedTuple):
    """One observed request: source and destination IPv4 as 32-bit ints."""

    src: int
    dst: int


def parse_ipv4(text: str) -> int:
    """Dotted-quad text -> 32-bit integer (network byte order)."""
    return int(ipaddress.IPv4Address(text))


def format_ipv4(value: int) -> str:
    """32-bit integer -> dotted-quad text; inverse of :func:`parse_ipv4`."""
    if not 0 <= value <= U32_MAX:
        raise ValueError(f"not a 32-bit address value: {value}")
    return str(ipaddress.IPv4Address(value))


def _as_u32(values, name: str) -> np.ndarray:
    """Coerce an array-like of addresses to uint32, rejecting out-of-range."""
    arr = np.asarray(values)
    if arr.size == 0:
        return np.empty(0, dtype=np.uint32)
    if arr.dtype == np.uint32:
        return arr
    if arr.dtype.kind == "u" and arr.dtype.itemsize <= 4:
        return arr.astype(np.uint32)
    if arr.dtype.kind not in "iu":
        raise TypeError(f"{name} must be integer addresses, got dtype {arr.dtype}")
    lo, hi = int(arr.min()), int(arr.max())
    if lo < 0 or hi > U32_MAX:
        raise ValueError(f"{name} outside 32-bit address range: [{lo}, {hi}]")
    return arr.astype(np.uint32)


def compose_keys(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """(src, dst) uint32 arrays -> uint64 keys ordered by (src, dst)."""
    return (src.astype(np.uint64) << _SHIFT32) | dst.astype(np.uint64)


def split_keys(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """uint64 keys -> (src, dst) uint32 arrays."""
    return (keys >> _SHIFT32).astype(np.uint32), (keys & _LOW32).astype(np.uint32)


def exact_u64_sum(counts: np.ndarray) -> int:
    """Exact Python-int sum of a uint64 array (no 64-bit wraparound)."""
    if counts.size == 0:
        return 0
    # Split into 32-bit halves so each partial sum stays inside uint64 for
    # any array shorter than 2^32 elements.
    high = int(np.sum(counts >> _SHIFT32, dtype=np.uint64))
    low = int(np.sum(counts & _LOW32, dtype=np.uint64))
    return (high << 32) + low


class TrafficMatrix:
    """Immutable hypersparse count matrix over the IPv4 x IPv4 space."""

    __slots__ = ("_keys", "_counts", "_total", "_col_cache")

    def __init__(self, keys: np.ndarray, counts: np.ndarray, total: int):
        # Internal: callers go through from_pairs/from_arrays/deserialize.
        keys = np.ascontiguousarray(keys, dtype=np.uint64)
        counts = np.ascontiguousarray(counts, dtype=np.uint64)
        keys.flags.writeable = False
        counts.flags.writeable = False
        self._keys = keys
        self._counts = counts
        self._total = int(total)
        self._col_cache = None

    # -- construction -----------------------------------------------------

    @classmethod
    def empty(cls) -> "TrafficMatrix":
        return cls(np.empty(0, np.uint64), np.empty(0, np.uint64), 0)

    @classmethod
    def from_arrays(cls, src, dst) -> "TrafficMatrix":
        """Tally a pair stream given as parallel src/dst address arrays."""
        src32 = _as_u32(src, "src")
        dst32 = _as_u32(dst, "dst")
        if src32.shape != dst32.shape:
            raise ValueError(
                f"src/dst length mismatch: {src32.shape} vs {dst32.shape}"
            )
        keys = compose_keys(src32, dst32)
        ukeys, mult = np.unique(keys, return_counts=True)
        return cls(ukeys, mult.astype(np.uint64), len(keys))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> "TrafficMatrix":
        """Tally an ordered sequence of (src, dst) pairs.

        Duplicates accumulate into counts; an empty sequence yields the
        empty matrix.
        """
        seq = list(pairs)
        if not seq:
            return cls.empty()
        arr = np.asarray(seq, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("pairs must be (src, dst) 2-tuples")
        return cls.from_arrays(arr[:, 0], arr[:, 1])

    # -- basic queries ------------------------------------------------------

    @property
    def nnz(self) -> int:
        """Number of stored entries (unique links)."""
        return len(self._keys)

    @property
    def request_total(self) -> int:
        """Sum of all entry counts (total tallied requests)."""
        return self._total

    @property
    def shape(self) -> tuple[int, int]:
        return (2**32, 2**32)

    def count_of(self, src: int, dst: int) -> int:
        """Count stored for one (src, dst) link, 0 if absent."""
        key = np.uint64((int(src) << 32) | int(dst))
        i = int(np.searchsorted(self._keys, key))
        if i < len(self._keys) and self._keys[i] == key:
            return int(self._counts[i])
        return 0

    def entries(self) -> Iterator[tuple[int, int, int]]:
        """Yield (src, dst, count) triples in ascending (src, dst) order."""
        src, dst = split_keys(self._keys)
        for s, d, c in zip(src, dst, self._counts):
            yield int(s), int(d), int(c)

    def to_dict(self) -> dict[tuple[int, int], int]:
        """Entry map as a plain dict; intended for small matrices/tests."""
        return {(s, d): c for s, d, c in self.entries()}

    def keys_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """The sorted composite-key and count arrays (read-only views)."""
        return self._keys, self._counts

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrafficMatrix):
            return NotImplemented
        return np.array_equal(self._keys, other._keys) and np.array_equal(
            self._counts, other._counts
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"TrafficMatrix(nnz={self.nnz}, request_total={self._total})"

    # -- plus-monoid algebra ------------------------------------------------

    def add(self, other: "TrafficMatrix") -> "TrafficMatrix":
        """Element-wise sum; absent entries count as zero.

        Raises CountOverflowError if the combined request total (and hence
        any combined entry count) would exceed 64-bit unsigned range.
        """
        new_total = self._total + other._total
        if new_total > U64_MAX:
            raise CountOverflowError(
                f"request total {new_total} exceeds 64-bit unsigned range"
            )
        if other.nnz == 0:
            return TrafficMatrix(self._keys, self._counts, self._total)
        if self.nnz == 0:
            return TrafficMatrix(other._keys, other._counts, other._total)
        keys = np.concatenate([self._keys, other._keys])
        counts = np.concatenate([self._counts, other._counts])
        ukeys, inverse = np.unique(keys, return_inverse=True)
        sums = np.zeros(len(ukeys), dtype=np.uint64)
        np.add.at(sums, inverse, counts)
        return TrafficMatrix(ukeys, sums, new_total)

    def __add__(self, other: "TrafficMatrix") -> "TrafficMatrix":
        return self.add(other)

    # -- row/column reductions ----------------------------------------------

    def row_stats(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per nonzero row: (row ids, fan-out = row nnz, row count sums).

        Keys are sorted by (src, dst), so rows form contiguous runs and the
        DCSR-style segmentation falls out of the key array directly.
        """
        if self.nnz == 0:
            e64 = np.empty(0, np.uint64)
            return np.empty(0, np.uint32), e64, e64
        rows = self._keys >> _SHIFT32
        change = np.flatnonzero(rows[1:] != rows[:-1]) + 1
        starts = np.concatenate([[0], change])
        row_ids = rows[starts].astype(np.uint32)
        bounds = np.concatenate([starts, [self.nnz]])
        row_nnz = np.diff(bounds).astype(np.uint64)
        row_sums = np.add.reduceat(self._counts, starts)
        return row_ids, row_nnz, row_sums

    def col_stats(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per nonzero column: (col ids, fan-in = col nnz, col count sums).

        Materialized lazily on first use, then cached.
        """
        if self._col_cache is None:
            if self.nnz == 0:
                e64 = np.empty(0, np.uint64)
                cache = (np.empty(0, np.uint32), e64, e64)
            else:
                cols = self._keys & _LOW32
                col_ids, inverse, col_nnz = np.unique(
                    cols, return_inverse=True, return_counts=True
                )
                col_sums = np.zeros(len(col_ids), dtype=np.uint64)
                np.add.at(col_sums, inverse, self._counts)
                cache = (
                    col_ids.astype(np.uint32),
                    col_nnz.astype(np.uint64),
                    col_sums,
                )
            self._col_cache = cache
        return self._col_cache

    # -- pickling (drop the derived cache) -----------------------------------

    def __getstate__(self):
        return (self._keys, self._counts, self._total)

    def __setstate__(self, state):
        keys, counts, total = state
        self._keys = keys
        self._counts = counts
        self._total = total
        self._col_cache = None


def sum_tree(matrices: list[TrafficMatrix]) -> TrafficMatrix:
    """Sum a non-empty sequence via a balanced pairwise reduction tree.

    Value-equal to the sequential left fold of ``add`` (counts are exact
    integers and plus is associative/commutative), but touches each entry
    O(log n) times instead of O(n).
    """
    level = list(matrices)
    if not level:
        raise ValueError("sum_tree requires at least one matrix")
    while len(level) > 1:
        nxt = [level[i].add(level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]
