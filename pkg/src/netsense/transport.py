"""File-based message passing between workers and the coordinator.

Two interchangeable mechanisms, both pure user-space filesystem protocols
(docs/protocol.md):

* rank-addressed channels: each (src, dst) pair owns a directory
  ``from_<src>_to_<dst>/`` holding ``<seq>.msg`` files with gap-free,
  per-channel sequence numbers;
* a shared spool where workers publish ``local/<rank>_<seq>.dbtm`` files
  and the coordinator scans for ones it has not consumed yet.

Every publish is write-temp-then-rename, so a visible file is always
complete.  Undecodable payloads are quarantined to a ``poison/`` directory
and the channel keeps flowing.
"""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path

from .dbtm import atomic_write_bytes

TAG_LOCAL_AGGREGATE = "local_aggregate"
TAG_SHUTDOWN = "shutdown"

_TAG_CODES = {TAG_LOCAL_AGGREGATE: 1, TAG_SHUTDOWN: 2}
_CODE_TAGS = {v: k for k, v in _TAG_CODES.items()}

ENVELOPE = struct.Struct("<4sHHIIQQ")
ENVELOPE_MAGIC = b"DBMG"
ENVELOPE_VERSION = 1

CONSUMED_DIR = "consumed"
POISON_DIR = "poison"

_MSG_RE = re.compile(r"^(\d+)\.msg$")
_SFS_RE = re.compile(r"^(\d+)_(\d+)\.dbtm$")


class TransportError(Exception):
    pass


class TransportFault(TransportError):
    """Filesystem-level failure, annotated with the channel identity."""


class EnvelopeError(TransportError):
    pass


class PoisonMessageError(TransportError):
    """Message quarantined because its payload failed to decode."""

    def __init__(self, channel: str, seq: int, reason: str):
        super().__init__(f"{channel} seq {seq}: {reason}")
        self.channel = channel
        self.seq = seq
        self.reason = reason


@dataclass
class Message:
    src_rank: int
    dst_rank: int
    seq: int
    tag: str
    payload: bytes


@dataclass(frozen=True)
class MessageRef:
    """Result of a probe: an undelivered message that recv can consume."""

    src_rank: int
    dst_rank: int
    seq: int
    path: Path

    @property
    def channel(self) -> str:
        return f"from_{self.src_rank}_to_{self.dst_rank}"


def pack_message(msg: Message) -> bytes:
    header = ENVELOPE.pack(
        ENVELOPE_MAGIC,
        ENVELOPE_VERSION,
        _TAG_CODES[msg.tag],
        msg.src_rank,
        msg.dst_rank,
        msg.seq,
        len(msg.payload),
    )
    return header + msg.payload


def unpack_message(data: bytes) -> Message:
    if len(data) < ENVELOPE.size:
        raise EnvelopeError(f"message shorter than envelope: {len(data)} bytes")
    magic, version, tag_code, src, dst, seq, length = ENVELOPE.unpack_from(data)
    if magic != ENVELOPE_MAGIC:
        raise EnvelopeError(f"bad envelope magic {magic!r}")
    if version != ENVELOPE_VERSION:
        raise EnvelopeError(f"unsupported envelope version {version}")
    if tag_code not in _CODE_TAGS:
        raise EnvelopeError(f"unknown tag code {tag_code}")
    payload = data[ENVELOPE.size:]
    if len(payload) != length:
        raise EnvelopeError(
            f"payload length mismatch: envelope says {length}, have {len(payload)}"
        )
    return Message(src, dst, seq, _CODE_TAGS[tag_code], payload)


def channel_dir(root: str | Path, src_rank: int, dst_rank: int) -> Path:
    return Path(root) / f"from_{src_rank}_to_{dst_rank}"


def _max_seq(directory: Path) -> int:
    best = 0
    if directory.is_dir():
        for name in os.listdir(directory):
            m = _MSG_RE.match(name)
            if m:
                best = max(best, int(m.group(1)))
    return best


class MessageSender:
    """Owns the sending side of every channel rooted at one source rank."""

    def __init__(self, root: str | Path, src_rank: int):
        self.root = Path(root)
        self.src_rank = src_rank
        self._seq: dict[int, int] = {}

    def _next_seq(self, dst_rank: int) -> int:
        if dst_rank not in self._seq:
            # Resume numbering past anything already on disk (including
            # consumed/quarantined) so sequences stay gap-free per channel.
            chan = channel_dir(self.root, self.src_rank, dst_rank)
            last = _max_seq(chan)
            last = max(last, _max_seq(chan / CONSUMED_DIR), _max_seq(chan / POISON_DIR))
            self._seq[dst_rank] = last
        self._seq[dst_rank] += 1
        return self._seq[dst_rank]

    def send(self, dst_rank: int, tag: str, payload: bytes) -> int:
        """Publish one message; returns its per-channel sequence number."""
        chan = channel_dir(self.root, self.src_rank, dst_rank)
        try:
            chan.mkdir(parents=True, exist_ok=True)
            seq = self._next_seq(dst_rank)
            msg = Message(self.src_rank, dst_rank, seq, tag, payload)
            atomic_write_bytes(chan / f"{seq}.msg", pack_message(msg))
        except OSError as exc:
            raise TransportFault(
                f"from_{self.src_rank}_to_{dst_rank}: {exc}"
            ) from exc
        return seq


class MessageReceiver:
    """Single consumer of every channel addressed to one rank.

    probe() is non-destructive and idempotent; recv() consumes exactly once
    (file deleted or archived per `disposition`).  Per-channel delivery
    order equals send order because only the next expected sequence number
    is ever eligible.
    """

    def __init__(self, root: str | Path, my_rank: int,
                 disposition: str = "delete"):
        if disposition not in ("delete", "archive"):
            raise ValueError("disposition must be 'delete' or 'archive'")
        self.root = Path(root)
        self.my_rank = my_rank
        self.disposition = disposition
        self._next: dict[int, int] = {}

    def _channels(self) -> list[int]:
        suffix = f"_to_{self.my_rank}"
        try:
            names = os.listdir(self.root)
        except FileNotFoundError:
            return []
        except OSError as exc:
            raise TransportFault(f"channel root {self.root}: {exc}") from exc
        ranks = []
        for name in names:
            if name.startswith("from_") and name.endswith(suffix):
                mid = name[len("from_"):-len(suffix)]
                if mid.isdigit():
                    ranks.append(int(mid))
        return ranks

    def _next_seq(self, src_rank: int) -> int:
        if src_rank not in self._next:
            chan = channel_dir(self.root, src_rank, self.my_rank)
            delivered = max(_max_seq(chan / CONSUMED_DIR), _max_seq(chan / POISON_DIR))
            self._next[src_rank] = delivered + 1
        return self._next[src_rank]

    def probe(self) -> MessageRef | None:
        """Lowest-sequence undelivered message addressed to this rank."""
        best: MessageRef | None = None
        for src in self._channels():
            seq = self._next_seq(src)
            path = channel_dir(self.root, src, self.my_rank) / f"{seq}.msg"
            if path.exists():
                if best is None or (seq, src) < (best.seq, best.src_rank):
                    best = MessageRef(src, self.my_rank, seq, path)
        return best

    def _dispose(self, ref: MessageRef, poison: bool) -> None:
        target_dir = ref.path.parent / (POISON_DIR if poison else CONSUMED_DIR)
        try:
            if poison or self.disposition == "archive":
                target_dir.mkdir(exist_ok=True)
                os.replace(ref.path, target_dir / ref.path.name)
            else:
                os.unlink(ref.path)
        except OSError as exc:
            raise TransportFault(f"{ref.channel}: {exc}") from exc
        self._next[ref.src_rank] = ref.seq + 1

    def recv(self, ref: MessageRef) -> Message:
        """Consume a probed message, validating envelope and payload."""
        try:
            data = ref.path.read_bytes()
        except OSError as exc:
            raise TransportFault(f"{ref.channel} seq {ref.seq}: {exc}") from exc
        try:
            msg = unpack_message(data)
            if (msg.src_rank, msg.dst_rank, msg.seq) != (
                ref.src_rank, ref.dst_rank, ref.seq,
            ):
                raise EnvelopeError(
                    f"envelope identity {msg.src_rank}->{msg.dst_rank} seq "
                    f"{msg.seq} does not match channel file"
                )
            self._validate_payload(msg)
        except (EnvelopeError, ValueError) as exc:
            self._dispose(ref, poison=True)
            raise PoisonMessageError(ref.channel, ref.seq, str(exc)) from exc
        self._dispose(ref, poison=False)
        return msg

    @staticmethod
    def _validate_payload(msg: Message) -> None:
        if msg.tag == TAG_LOCAL_AGGREGATE:
            from .dbtm import deserialize

            deserialize(msg.payload)
        elif msg.tag == TAG_SHUTDOWN:
            json.loads(msg.payload.decode("utf-8"))


@dataclass(frozen=True)
class SfsRef:
    rank: int
    seq: int
    path: Path

    @property
    def name(self) -> str:
        return self.path.name


class SfsSpool:
    """Shared-filesystem coordination area.

    Workers publish completed local aggregates as ``local/<rank>_<seq>.dbtm``
    plus a final ``done/<rank>.json`` marker; the coordinator scans for files
    it has not seen, consumes them exactly once, and quarantines undecodable
    ones.
    """

    def __init__(self, root: str | Path, disposition: str = "delete"):
        if disposition not in ("delete", "archive"):
            raise ValueError("disposition must be 'delete' or 'archive'")
        self.root = Path(root)
        self.disposition = disposition
        self.local_dir = self.root / "local"
        self.done_dir = self.root / "done"

    def publish_local(self, rank: int, seq: int, payload: bytes) -> Path:
        self.local_dir.mkdir(parents=True, exist_ok=True)
        path = self.local_dir / f"{rank}_{seq}.dbtm"
        atomic_write_bytes(path, payload)
        return path

    def scan(self, known: set[str]) -> list[SfsRef]:
        """Complete, not-yet-seen local aggregates ordered by (rank, seq)."""
        try:
            names = os.listdir(self.local_dir)
        except FileNotFoundError:
            return []
        except OSError as exc:
            raise TransportFault(f"sfs spool {self.local_dir}: {exc}") from exc
        refs = []
        for name in names:
            m = _SFS_RE.match(name)
            if m and name not in known:
                refs.append(SfsRef(int(m.group(1)), int(m.group(2)),
                                   self.local_dir / name))
        refs.sort(key=lambda r: (r.rank, r.seq))
        return refs

    def consume(self, ref: SfsRef) -> bytes:
        """Read a scanned aggregate and archive/delete it (exactly once)."""
        try:
            data = ref.path.read_bytes()
        except OSError as exc:
            raise TransportFault(f"sfs {ref.name}: {exc}") from exc
        self.mark_consumed(ref)
        return data

    def mark_consumed(self, ref: SfsRef) -> None:
        try:
            self._dispose(ref.path, CONSUMED_DIR)
        except OSError as exc:
            raise TransportFault(f"sfs {ref.name}: {exc}") from exc

    def quarantine(self, ref: SfsRef) -> None:
        try:
            self._dispose(ref.path, POISON_DIR)
        except OSError as exc:
            raise TransportFault(f"sfs {ref.name}: {exc}") from exc

    def _dispose(self, path: Path, subdir: str) -> None:
        if subdir == CONSUMED_DIR and self.disposition == "delete":
            os.unlink(path)
            return
        target = self.local_dir / subdir
        target.mkdir(exist_ok=True)
        os.replace(path, target / path.name)

    def publish_done(self, rank: int, stats: dict) -> None:
        self.done_dir.mkdir(parents=True, exist_ok=True)
        data = json.dumps(stats).encode("utf-8")
        atomic_write_bytes(self.done_dir / f"{rank}.json", data)

    def done_ranks(self) -> set[int]:
        try:
            names = os.listdir(self.done_dir)
        except FileNotFoundError:
            return set()
        return {int(n[:-5]) for n in names if n.endswith(".json") and n[:-5].isdigit()}

    def read_done(self, rank: int) -> dict:
        return json.loads((self.done_dir / f"{rank}.json").read_text("utf-8"))
