"""Command-line harness: worker / coordinator / analyze / bench / gen.

Every flag can also be supplied through an environment variable of the same
name (``--ng-over-na`` -> ``NETSENSE_NG_OVER_NA``); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import time
from pathlib import Path

from . import dbtm
from .analytics import compute_quantities, quantities_to_record
from .config import (
    ConfigError,
    DESK_PROFILE,
    PAPER_PROFILE,
    PipelineConfig,
    TrafficSourceConfig,
)

_TRANSPORTS = {"mp": "message_passing", "sfs": "shared_fs"}


def _envdef(flag: str, fallback, conv=str):
    raw = os.environ.get("NETSENSE_" + flag.upper().replace("-", "_"))
    if raw is None:
        return fallback
    return conv(raw)


def _parse_workers(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _parse_bind(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def _add_window_flags(p: argparse.ArgumentParser, profile: dict) -> None:
    p.add_argument("--nv", type=int, default=_envdef("nv", profile["n_v"], int),
                   help="pairs per base matrix")
    p.add_argument("--nb", type=int, default=_envdef("nb", profile["n_b"], int),
                   help="base matrices per local aggregate")
    p.add_argument("--na", type=int, default=_envdef("na", None, int),
                   help="pairs per local aggregate (must equal nv*nb)")
    p.add_argument("--ng", type=int, default=_envdef("ng", None, int),
                   help="pairs per global aggregate (multiple of na)")
    p.add_argument("--ng-over-na", type=int,
                   default=_envdef("ng-over-na", profile["ng_over_na"], int),
                   help="local aggregates per global aggregate")
    p.add_argument("--strategy", choices=("batch", "incremental"),
                   default=_envdef("strategy", "batch"))
    p.add_argument("--transport", choices=tuple(_TRANSPORTS),
                   default=_envdef("transport", "mp"))
    p.add_argument("--spool-root", type=Path,
                   default=_envdef("spool-root", Path("spool"), Path))
    p.add_argument("--msg-root", type=Path,
                   default=_envdef("msg-root", Path("msgs"), Path))
    p.add_argument("--retention", choices=("keep", "delete"),
                   default=_envdef("retention", "keep"),
                   help="keep or delete base files / consumed messages")


def _pipeline_config(args, rank: int) -> PipelineConfig:
    return PipelineConfig(
        n_v=args.nv,
        n_b=args.nb,
        n_a=args.na,
        n_g=args.ng,
        ng_over_na=args.ng_over_na,
        strategy=args.strategy,
        transport=_TRANSPORTS[args.transport],
        spool_dir=args.spool_root,
        msg_root=args.msg_root,
        rank=rank,
        retention=args.retention,
    )


def _wait_for_barrier(path: Path, timeout: float = 120.0) -> None:
    deadline = time.monotonic() + timeout
    while not path.exists():
        if time.monotonic() > deadline:
            print(f"warning: start barrier {path} never appeared; starting",
                  file=sys.stderr)
            return
        time.sleep(0.005)


def cmd_worker(args) -> int:
    from .ingest import HttpTap, open_blocks
    from .pipeline import WorkerRuntime, make_outbox

    cfg = _pipeline_config(args, rank=args.rank)
    if cfg.rank < 1:
        raise ConfigError("worker rank must be >= 1")

    kind = {"synthetic": "synthetic", "replay": "replay", "http": "http_tap"}[args.source]
    scfg = TrafficSourceConfig(
        kind=kind,
        seed=args.seed,
        rate=args.rate,
        distribution=args.dist,
        zipf_exponent=args.zipf_exponent,
        universe=args.universe,
        path=args.path,
        bind=_parse_bind(args.bind) if args.bind else None,
        total=args.total,
    )

    runtime = WorkerRuntime(cfg, make_outbox(cfg))
    signal.signal(signal.SIGTERM, lambda *_: setattr(runtime, "stop_requested", True))

    (cfg.rank_dir() / "ready.marker").touch()
    if args.barrier:
        _wait_for_barrier(Path(args.barrier))

    if kind == "http_tap":
        with HttpTap(scfg.bind) as tap:
            print(f"worker {cfg.rank}: tap listening on {tap.address}", flush=True)
            stats = runtime.run(tap.blocks(total=scfg.total), duration=args.duration)
            if tap.skipped_non_ipv4:
                print(f"worker {cfg.rank}: skipped {tap.skipped_non_ipv4} "
                      "non-IPv4 peers", flush=True)
    else:
        stats = runtime.run(open_blocks(scfg), duration=args.duration)

    print(f"worker {cfg.rank}: injected={stats.injected_pairs} "
          f"bases={stats.bases_built} locals={stats.locals_emitted} "
          f"leftover={stats.leftover_buffer_pairs + stats.leftover_base_pairs} "
          f"stall={stats.stall_seconds:.3f}s", flush=True)
    return 0


def cmd_coordinator(args) -> int:
    from .coordinator import CoordinatorRuntime, make_inbox

    cfg = _pipeline_config(args, rank=0)
    disposition = "archive" if args.retention == "keep" else "delete"
    inbox = make_inbox(cfg, disposition)
    runtime = CoordinatorRuntime(cfg, inbox, expected_workers=args.workers)
    signal.signal(signal.SIGTERM, lambda *_: setattr(runtime, "stop_requested", True))

    stats = runtime.run(idle_timeout=args.idle_timeout or None)
    print(f"coordinator: globals={stats.globals_produced} "
          f"locals={stats.locals_received} pending_pairs={stats.pending_pairs} "
          f"poison={stats.poison_messages}", flush=True)
    if stats.idle_timeout_hit:
        print("coordinator: idle timeout before all workers shut down",
              file=sys.stderr)
        return 1
    return 0


def _infer_identity(path: Path) -> tuple[int, str, int]:
    parts = path.parts
    stem = path.stem
    if (len(parts) >= 3 and parts[-2] in ("base", "local", "global")
            and parts[-3].isdigit() and stem.isdigit()):
        return int(parts[-3]), parts[-2], int(stem)
    if "_" in stem:
        rank, _, seq = stem.partition("_")
        if rank.isdigit() and seq.isdigit():
            return int(rank), "local", int(seq)
    return 0, "global", 0


def cmd_analyze(args) -> int:
    path = Path(args.matrix)
    try:
        m = dbtm.load_matrix(path)
    except FileNotFoundError:
        print(f"error: no such file: {path}", file=sys.stderr)
        return 1
    except dbtm.DbtmFormatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    rank, level, seq = _infer_identity(path)
    record = quantities_to_record(
        compute_quantities(m),
        rank=args.rank if args.rank is not None else rank,
        level=args.level or level,
        seq=args.seq if args.seq is not None else seq,
    )
    print(record)
    return 0


def cmd_gen(args) -> int:
    from .ingest import synthetic_blocks, write_pairs_csv

    scfg = TrafficSourceConfig(
        kind="synthetic", seed=args.seed, rate=0.0, distribution=args.dist,
        zipf_exponent=args.zipf_exponent, universe=args.universe,
        total=args.total,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    import numpy as np

    if out.suffix.lower() == ".csv":
        src_all, dst_all = [], []
        for src, dst in synthetic_blocks(scfg):
            src_all.append(src)
            dst_all.append(dst)
        write_pairs_csv(out, np.concatenate(src_all) if src_all else [],
                        np.concatenate(dst_all) if dst_all else [])
    else:
        from .ingest import PAIR_DTYPE

        with open(out, "wb") as fh:
            for src, dst in synthetic_blocks(scfg):
                recs = np.empty(len(src), dtype=PAIR_DTYPE)
                recs["src"] = src
                recs["dst"] = dst
                fh.write(recs.tobytes())
    print(f"wrote {args.total} pairs to {out}")
    return 0


def cmd_bench(args) -> int:
    from .bench import BenchConfig, BenchError, format_report, run_bench

    profile = PAPER_PROFILE if args.profile == "paper" else DESK_PROFILE
    cfg = BenchConfig(
        workers=args.workers,
        duration=args.duration,
        total=args.total,
        rate=args.rate if args.rate is not None else profile.get("rate", 1e5),
        n_v=args.nv if args.nv is not None else profile["n_v"],
        n_b=args.nb if args.nb is not None else profile["n_b"],
        ng_over_na=(args.ng_over_na if args.ng_over_na is not None
                    else profile["ng_over_na"]),
        strategy=args.strategy,
        transport=_TRANSPORTS[args.transport],
        seed=args.seed,
        retention=args.retention,
        sample_interval=args.sample_interval,
        out_dir=args.out_dir,
        figures=not args.no_figures,
    )
    try:
        report = run_bench(cfg)
    except BenchError as exc:
        print(f"bench failed: {exc}", file=sys.stderr)
        return 1
    print(format_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netsense",
        description="Hypersparse traffic-matrix sensing pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    w = sub.add_parser("worker", help="run one ingesting worker (rank >= 1)")
    _add_window_flags(w, PAPER_PROFILE)
    w.add_argument("--rank", type=int, default=_envdef("rank", 1, int))
    w.add_argument("--source", choices=("synthetic", "replay", "http"),
                   default=_envdef("source", "synthetic"))
    w.add_argument("--seed", type=int, default=_envdef("seed", 0, int))
    w.add_argument("--rate", type=float, default=_envdef("rate", 0.0, float),
                   help="requests/second target (0 = unthrottled)")
    w.add_argument("--dist", choices=("uniform32", "zipf"),
                   default=_envdef("dist", "uniform32"))
    w.add_argument("--zipf-exponent", type=float,
                   default=_envdef("zipf-exponent", 1.5, float))
    w.add_argument("--universe", type=int,
                   default=_envdef("universe", 2**16, int))
    w.add_argument("--path", type=Path, default=None, help="replay pair file")
    w.add_argument("--bind", default=_envdef("bind", None),
                   help="http tap bind address host:port")
    w.add_argument("--total", type=int, default=_envdef("total", None, int))
    w.add_argument("--duration", type=float,
                   default=_envdef("duration", None, float))
    w.add_argument("--barrier", default=None,
                   help="path of a start-barrier file to wait for")
    w.set_defaults(func=cmd_worker)

    c = sub.add_parser("coordinator", help="run the rank-0 coordinator")
    _add_window_flags(c, PAPER_PROFILE)
    c.add_argument("--workers", type=int, default=_envdef("workers", 1, int),
                   help="number of worker ranks expected to shut down")
    c.add_argument("--idle-timeout", type=float,
                   default=_envdef("idle-timeout", 0.0, float),
                   help="abort after this many eventless seconds (0 = never)")
    c.set_defaults(func=cmd_coordinator)

    a = sub.add_parser("analyze", help="print the analytics record of a .dbtm file")
    a.add_argument("matrix", help="path to a .dbtm matrix file")
    a.add_argument("--rank", type=int, default=None)
    a.add_argument("--level", choices=("base", "local", "global"), default=None)
    a.add_argument("--seq", type=int, default=None)
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="run a local cluster benchmark")
    b.add_argument("--workers", type=_parse_workers,
                   default=_envdef("workers", [1], _parse_workers),
                   help="worker count, or comma list for a scaling sweep")
    b.add_argument("--duration", type=float,
                   default=_envdef("duration", 30.0, float))
    b.add_argument("--total", type=int, default=_envdef("total", None, int),
                   help="per-worker pair cap instead of a duration")
    b.add_argument("--rate", type=float, default=_envdef("rate", None, float))
    b.add_argument("--nv", type=int, default=_envdef("nv", None, int))
    b.add_argument("--nb", type=int, default=_envdef("nb", None, int))
    b.add_argument("--ng-over-na", type=int,
                   default=_envdef("ng-over-na", None, int))
    b.add_argument("--strategy", choices=("batch", "incremental"),
                   default=_envdef("strategy", "batch"))
    b.add_argument("--transport", choices=tuple(_TRANSPORTS),
                   default=_envdef("transport", "mp"))
    b.add_argument("--seed", type=int, default=_envdef("seed", 1, int))
    b.add_argument("--retention", choices=("keep", "delete"),
                   default=_envdef("retention", "keep"))
    b.add_argument("--sample-interval", type=float,
                   default=_envdef("sample-interval", 0.5, float))
    b.add_argument("--out-dir", type=Path,
                   default=_envdef("out-dir", Path("bench_out"), Path))
    b.add_argument("--profile", choices=("desk", "paper"),
                   default=_envdef("profile", "desk"))
    b.add_argument("--no-figures", action="store_true")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gen", help="write a synthetic pair file")
    g.add_argument("--out", required=True,
                   help="output path (.csv = dotted-quad, else binary)")
    g.add_argument("--total", type=int, required=True)
    g.add_argument("--seed", type=int, default=_envdef("seed", 0, int))
    g.add_argument("--dist", choices=("uniform32", "zipf"),
                   default=_envdef("dist", "uniform32"))
    g.add_argument("--zipf-exponent", type=float,
                   default=_envdef("zipf-exponent", 1.5, float))
    g.add_argument("--universe", type=int,
                   default=_envdef("universe", 2**16, int))
    g.set_defaults(func=cmd_gen)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
