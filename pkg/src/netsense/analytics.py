"""Network summary quantities computed from a traffic matrix.

The nine scalars cover totals, link structure, and per-endpoint extremes;
all are O(nnz) reductions over the matrix, never recomputed from raw pair
logs.  Records are emitted one JSON object per line with the stable field
order documented in docs/schema.md.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, fields
from pathlib import Path

from .matrix import TrafficMatrix

QUANTITY_FIELDS = (
    "valid_requests",
    "unique_links",
    "max_link_requests",
    "unique_sources",
    "max_source_requests",
    "max_source_fanout",
    "unique_destinations",
    "max_destination_requests",
    "max_destination_fanin",
)

META_FIELDS = ("ts", "rank", "level", "seq")

RECORD_FIELDS = META_FIELDS + QUANTITY_FIELDS

LEVELS = ("base", "local", "global")


@dataclass(frozen=True)
class NetworkQuantities:
    valid_requests: int
    unique_links: int
    max_link_requests: int
    unique_sources: int
    max_source_requests: int
    max_source_fanout: int
    unique_destinations: int
    max_destination_requests: int
    max_destination_fanin: int

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def zero(cls) -> "NetworkQuantities":
        return cls(*([0] * len(QUANTITY_FIELDS)))


def compute_quantities(m: TrafficMatrix) -> NetworkQuantities:
    """All nine quantities in one pass of row/column reductions.

    Maxima over the empty matrix are 0, so an all-zero window is a valid
    (all-zero) record rather than an error.
    """
    if m.nnz == 0:
        return NetworkQuantities.zero()
    _, row_nnz, row_sums = m.row_stats()
    _, col_nnz, col_sums = m.col_stats()
    _, counts = m.keys_counts()
    return NetworkQuantities(
        valid_requests=m.request_total,
        unique_links=m.nnz,
        max_link_requests=int(counts.max()),
        unique_sources=len(row_sums),
        max_source_requests=int(row_sums.max()),
        max_source_fanout=int(row_nnz.max()),
        unique_destinations=len(col_sums),
        max_destination_requests=int(col_sums.max()),
        max_destination_fanin=int(col_nnz.max()),
    )


def quantities_to_record(
    q: NetworkQuantities,
    *,
    rank: int,
    level: str,
    seq: int,
    ts: float | None = None,
) -> str:
    """One-line JSON record: aggregation identity plus the nine quantities."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    doc = {"ts": time.time() if ts is None else ts, "rank": rank,
           "level": level, "seq": seq}
    doc.update(q.as_dict())
    return json.dumps(doc, separators=(",", ":"))


def parse_record(line: str) -> tuple[NetworkQuantities, dict]:
    """Inverse of quantities_to_record: (quantities, identity metadata)."""
    doc = json.loads(line)
    missing = [f for f in RECORD_FIELDS if f not in doc]
    if missing:
        raise ValueError(f"record missing fields: {missing}")
    q = NetworkQuantities(**{f: int(doc[f]) for f in QUANTITY_FIELDS})
    meta = {f: doc[f] for f in META_FIELDS}
    return q, meta


class AnalyticsLog:
    """Append-only one-record-per-line log file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, q: NetworkQuantities, *, rank: int, level: str, seq: int,
               ts: float | None = None) -> str:
        line = quantities_to_record(q, rank=rank, level=level, seq=seq, ts=ts)
        self._fh.write(line + "\n")
        self._fh.flush()
        return line

    def close(self) -> None:
        self._fh.close()
