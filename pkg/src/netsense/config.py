"""Pipeline and traffic-source configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or mutually inconsistent configuration."""


# Aggregation window defaults: 2^17 pairs per base matrix, 64 bases per
# local aggregate (2^23 pairs), 4 locals per global aggregate (2^25 pairs).
PAPER_PROFILE = dict(n_v=2**17, n_b=64, ng_over_na=4)

# Desk-scale profile: same window structure, sized so a benchmark completes
# in minutes on one machine (2^12 / 2^14 / 2^16 pairs, 10^4 RPS injection).
DESK_PROFILE = dict(n_v=2**12, n_b=4, ng_over_na=4, rate=10_000.0)

STRATEGIES = ("batch", "incremental")
TRANSPORTS = ("message_passing", "shared_fs")
RETENTIONS = ("keep", "delete")


@dataclass
class PipelineConfig:
    """Window sizes plus strategy/transport/placement for one process.

    n_a must equal n_v * n_b exactly, and n_g must be a positive multiple
    of n_a; pass n_a/n_g as None to derive them.
    """

    n_v: int = PAPER_PROFILE["n_v"]
    n_b: int = PAPER_PROFILE["n_b"]
    n_a: int | None = None
    n_g: int | None = None
    ng_over_na: int = PAPER_PROFILE["ng_over_na"]
    strategy: str = "batch"
    transport: str = "message_passing"
    spool_dir: Path = Path("spool")
    msg_root: Path = Path("msgs")
    rank: int = 1
    retention: str = "keep"
    compress: bool = False

    def __post_init__(self):
        self.spool_dir = Path(self.spool_dir)
        self.msg_root = Path(self.msg_root)
        if self.n_a is None:
            self.n_a = self.n_v * self.n_b
        if self.n_g is None:
            self.n_g = self.n_a * self.ng_over_na
        self.validate()

    def validate(self) -> None:
        for name in ("n_v", "n_b", "n_a", "n_g"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.n_a != self.n_v * self.n_b:
            raise ConfigError(
                f"n_a must equal n_v*n_b: {self.n_a} != {self.n_v}*{self.n_b}"
            )
        if self.n_g % self.n_a != 0:
            raise ConfigError(
                f"n_g must be a positive multiple of n_a: {self.n_g} % {self.n_a} != 0"
            )
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}")
        if self.retention not in RETENTIONS:
            raise ConfigError(f"retention must be one of {RETENTIONS}")
        if self.rank < 0:
            raise ConfigError(f"rank must be >= 0, got {self.rank}")

    @property
    def locals_per_global(self) -> int:
        return self.n_g // self.n_a

    def rank_dir(self, rank: int | None = None) -> Path:
        r = self.rank if rank is None else rank
        return self.spool_dir / str(r)


SOURCE_KINDS = ("synthetic", "replay", "http_tap")
DISTRIBUTIONS = ("uniform32", "zipf")

# Bounded zipf sampling precomputes a CDF table over the address universe;
# cap the table at 2^24 entries (128 MB) rather than letting it explode.
ZIPF_UNIVERSE_CAP = 2**24


@dataclass
class TrafficSourceConfig:
    """Where pairs come from and how fast they are emitted.

    rate is the requests/second target (0 = unthrottled); throttling is a
    token bucket over the monotonic clock with batches no coarser than 1 ms
    of traffic.
    """

    kind: str = "synthetic"
    seed: int = 0
    rate: float = 0.0
    distribution: str = "uniform32"
    zipf_exponent: float = 1.5
    universe: int = 2**32
    path: Path | None = None
    bind: tuple[str, int] | None = None
    total: int | None = None

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
        self.validate()

    def validate(self) -> None:
        if self.kind not in SOURCE_KINDS:
            raise ConfigError(f"source kind must be one of {SOURCE_KINDS}")
        if self.rate < 0:
            raise ConfigError(f"rate must be >= 0, got {self.rate}")
        if self.total is not None and self.total < 0:
            raise ConfigError(f"total must be >= 0, got {self.total}")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.distribution == "zipf":
            if self.zipf_exponent <= 0:
                raise ConfigError("zipf exponent must be > 0")
            if self.universe < 1:
                raise ConfigError("universe size must be >= 1")
            if self.universe > ZIPF_UNIVERSE_CAP:
                raise ConfigError(
                    f"zipf universe capped at {ZIPF_UNIVERSE_CAP} addresses"
                )
        if self.kind == "replay" and self.path is None:
            raise ConfigError("replay source requires a path")
        if self.kind == "http_tap" and self.bind is None:
            raise ConfigError("http_tap source requires a bind address")
