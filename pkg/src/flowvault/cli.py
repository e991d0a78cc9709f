"""Command line entry point.

Exit status: 0 success, 1 usage error, 2 data or storage error.
"""
from __future__ import annotations

import argparse
import ipaddress
import logging
import os
import pickle
import sys
from typing import Optional

from . import __version__
from .chunking import ChunkingConfig
from .errors import FlowVaultError, UsageError
from .grouper import GrouperConfig
from .pcap import read_pcap
from .query import Criteria, Query, QueryEngine, QueryMode, Retrieval, TimeRange
from .recorder import PipelineConfig, RecordReport, Recorder
from .store import Archive, ArchiveConfig
from .workload import (
    PAYLOAD_MODELS, CostModel, TraceSpec, dedup_window_sweep, format_sweep, generate_trace,
    storage_cost,
)

ARCHIVE_ENV = "FLOWVAULT_ARCHIVE"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
_PROTOCOLS = {"tcp": 6, "udp": 17, "icmp": 1}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _protocol(text: str) -> int:
    t = text.lower()
    if t in _PROTOCOLS:
        return _PROTOCOLS[t]
    try:
        v = int(t, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown protocol {text!r}") from None
    if not 0 <= v <= 255:
        raise argparse.ArgumentTypeError(f"protocol {v} outside 0..255")
    return v


def _port(text: str) -> int:
    v = int(text)
    if not 0 <= v <= 65535:
        raise argparse.ArgumentTypeError(f"port {v} outside 0..65535")
    return v


def _ipv4(text: str) -> str:
    try:
        ipaddress.IPv4Address(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad IPv4 address {text!r}") from None
    return text


def _chunking(text: str) -> ChunkingConfig:
    try:
        return ChunkingConfig.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _time_range(text: str) -> TimeRange:
    try:
        return TimeRange.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowvault", description="Record, index and query packet traces.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("record", help="record a pcap into an archive")
    r.add_argument("--in", dest="input", required=True, help="pcap file, or - for stdin")
    r.add_argument("--fast-dir", help=f"fast-tier directory (default ${ARCHIVE_ENV})")
    r.add_argument("--bulk-dir", help="bulk-tier directory (default: the fast-tier directory)")
    r.add_argument("--append", action="store_true", help="continue recording into an existing archive")
    r.add_argument("--epoch", type=float, default=60.0, help="epoch length, seconds")
    r.add_argument("--mfd", type=float, default=300.0, help="maximum flow duration, seconds")
    r.add_argument("--idle-timeout", type=float, default=15.0)
    r.add_argument("--max-buffer-bytes", type=int, default=256 << 20)
    r.add_argument("--chunking", type=_chunking, default=ChunkingConfig.cdc(4096),
                   help="cdc:<target>, fixed:<size> or none")
    r.add_argument("--dedup-window", type=float, default=10_000.0, help="seconds; 0 disables dedup")
    r.add_argument("--no-compress", action="store_true", help="store residuals and chunks uncompressed")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--queue-depth", type=int, default=64)
    r.add_argument("--format", choices=("text", "csv"), default="text")

    q = sub.add_parser("query", help="query an archive")
    q.add_argument("--archive", help=f"fast-tier directory (default ${ARCHIVE_ENV})")
    q.add_argument("--bulk-dir")
    q.add_argument("--range", type=_time_range, default=TimeRange.entire(),
                   help="entire, last:<sec> or <t0>:<t1> in trace seconds")
    q.add_argument("--src-ip", type=_ipv4)
    q.add_argument("--dst-ip", type=_ipv4)
    q.add_argument("--ip", type=_ipv4, help="either address")
    q.add_argument("--src-port", type=_port)
    q.add_argument("--dst-port", type=_port)
    q.add_argument("--port", type=_port, help="either port")
    q.add_argument("--proto", type=_protocol, help="tcp, udp, icmp or a number")
    q.add_argument("--retrieve", choices=[m.value for m in Retrieval], default="headers")
    q.add_argument("--mode", choices=[m.value for m in QueryMode], default="offline")
    q.add_argument("--count-all", action="store_true", help="existence: count every matching flow")
    q.add_argument("--out", help="pcap output file, or - for stdout (headers/full)")
    q.add_argument("--stats", action="store_true", help="print query statistics to stderr")
    q.add_argument("--format", choices=("text", "csv"), default="text")

    e = sub.add_parser("evict", help="drop the oldest epochs")
    e.add_argument("--archive")
    e.add_argument("--bulk-dir")
    e.add_argument("--retain-epochs", type=int, required=True,
                   help="keep epochs within this many epoch lengths of the newest sealed one")
    e.add_argument("--hard", action="store_true",
                   help="also drop chunk segments still referenced by retained flows")

    g = sub.add_parser("gen", help="generate a synthetic trace")
    g.add_argument("--out", required=True, help="pcap file, or - for stdout")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--duration", type=float, default=60.0)
    g.add_argument("--start-time", type=float, default=0.0)
    g.add_argument("--flow-rate", type=float, default=50.0)
    g.add_argument("--mean-flow-packets", type=float, default=12.0)
    g.add_argument("--mean-gap", type=float, default=0.05)
    g.add_argument("--payload", choices=PAYLOAD_MODELS, default="re")
    g.add_argument("--dup-fraction", type=float, default=0.3)
    g.add_argument("--dup-gap", type=float, default=100.0)
    g.add_argument("--hosts", type=int, default=256)

    s = sub.add_parser("sweep", help="detected redundancy per chunking config and dedup window")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--chunking", type=_chunking, action="append",
                   help="repeatable; default cdc:4096")
    s.add_argument("--windows", type=_floats, default=[0, 10, 100, 1000, 10000])
    s.add_argument("--mfd", type=float, default=300.0)
    s.add_argument("--idle-timeout", type=float, default=15.0)
    s.add_argument("--fast-price", type=float, default=0.740)
    s.add_argument("--bulk-price", type=float, default=0.0467)
    s.add_argument("--format", choices=("text", "csv"), default="text")

    st = sub.add_parser("stats", help="archive totals and storage cost")
    st.add_argument("--archive")
    st.add_argument("--bulk-dir")
    st.add_argument("--fast-price", type=float, default=0.740)
    st.add_argument("--bulk-price", type=float, default=0.0467)
    st.add_argument("--format", choices=("text", "csv"), default="text")

    c = sub.add_parser("cost", help="storage cost of given tier sizes")
    c.add_argument("--fast-gb", type=float, required=True)
    c.add_argument("--bulk-gb", type=float, required=True)
    c.add_argument("--fast-price", type=float, default=0.740)
    c.add_argument("--bulk-price", type=float, default=0.0467)
    return p


def _archive_dir(value: Optional[str], flag: str) -> str:
    path = value or os.environ.get(ARCHIVE_ENV)
    if not path:
        raise UsageError(f"no archive given; pass {flag} or set ${ARCHIVE_ENV}")
    return path


def _binary_in(path: str):
    return sys.stdin.buffer if path == "-" else open(path, "rb")


def _emit_table(pairs, fmt: str, out) -> None:
    if fmt == "csv":
        out.write(",".join(k for k, _ in pairs) + "\n")
        out.write(",".join(str(v) for _, v in pairs) + "\n")
    else:
        width = max(len(k) for k, _ in pairs)
        for k, v in pairs:
            out.write(f"{k.ljust(width)}  {v}\n")


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def _report_pairs(rep: RecordReport) -> list:
    pairs = [(k, _fmt(v)) for k, v in rep.to_dict().items()]
    pairs.append(("throughput_pps", f"{rep.throughput_pps:.1f}"))
    return pairs


def cmd_record(args, out) -> int:
    fast = _archive_dir(args.fast_dir, "--fast-dir")
    try:
        grouper = GrouperConfig(args.mfd, args.idle_timeout, args.max_buffer_bytes)
        pipe = PipelineConfig(args.workers, args.queue_depth, grouper)
        cfg = ArchiveConfig(args.epoch, args.chunking, args.dedup_window, 0 if args.no_compress else 1)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    src = _binary_in(args.input)
    try:
        packets, link_type = read_pcap(src)
        if args.append:
            archive = Archive.open(fast, args.bulk_dir, writable=True)
        else:
            archive = Archive.create(fast, args.bulk_dir, cfg)
        with archive:
            rec = Recorder(archive, pipe, link_type)
            try:
                rec.ingest_many(packets)
                rep = rec.finish()
            finally:
                rec.abort()
    finally:
        if src is not sys.stdin.buffer:
            src.close()
    _emit_table(_report_pairs(rep), args.format, out)
    return EXIT_OK


def cmd_query(args, out, err) -> int:
    fast = _archive_dir(args.archive, "--archive")
    retrieval = Retrieval(args.retrieve)
    if retrieval is Retrieval.EXISTENCE and args.out:
        raise UsageError("--out cannot be used with --retrieve exists")
    if retrieval is not Retrieval.EXISTENCE and args.count_all:
        raise UsageError("--count-all only applies to --retrieve exists")
    crit = Criteria(args.src_ip, args.dst_ip, args.ip, args.src_port, args.dst_port, args.port, args.proto)
    query = Query(args.range, crit, retrieval, QueryMode(args.mode), args.count_all)
    with Archive.open(fast, args.bulk_dir) as archive:
        engine = QueryEngine(archive)
        task = engine.start(query)
        if query.mode is QueryMode.ONLINE:
            # Checkpoint between work units the way an interleaved run would.
            while not task.step():
                task = pickle.loads(pickle.dumps(task)).resume(engine)
        result = task.run()
    for loc, msg in result.errors:
        err.write(f"error: flow at {loc}: {msg}\n" if loc is not None else f"error: {msg}\n")
    if retrieval is Retrieval.EXISTENCE:
        if args.format == "csv":
            out.write("exists,flow_count\n")
            out.write(f"{str(result.exists).lower()},{result.flow_count}\n")
        else:
            out.write(f"{str(result.exists).lower()}\ncount {result.flow_count}\n")
    else:
        if args.out and args.out != "-":
            with open(args.out, "wb") as fh:
                fh.write(result.pcap)
            _emit_table([("flows", result.flow_count), ("packets", result.packet_count)], args.format, out)
        else:
            target = getattr(out, "buffer", None)
            if target is None:
                raise UsageError("pcap output needs --out when stdout is not binary")
            target.write(result.pcap)
            target.flush()
    if args.stats:
        _emit_table([(k, _fmt(v)) for k, v in result.stats.to_dict().items()], args.format, err)
    return EXIT_DATA if result.errors else EXIT_OK


def cmd_evict(args, out) -> int:
    fast = _archive_dir(args.archive, "--archive")
    if args.retain_epochs < 0:
        raise UsageError("--retain-epochs must be non-negative")
    with Archive.open(fast, args.bulk_dir, writable=True) as archive:
        if archive.sealed_through is None:
            rep = archive.evict_oldest(0)
        else:
            rep = archive.evict_oldest(archive.sealed_through - args.retain_epochs,
                                       honor_horizons=not args.hard)
    _emit_table([("epochs_removed", len(rep.epochs)), ("segments_removed", len(rep.segments)),
                 ("fast_bytes_freed", rep.fast_bytes), ("bulk_bytes_freed", rep.bulk_bytes)], "text", out)
    return EXIT_OK


def cmd_gen(args, out) -> int:
    try:
        spec = TraceSpec(seed=args.seed, duration=args.duration, start_time=args.start_time,
                         flow_rate=args.flow_rate, mean_flow_packets=args.mean_flow_packets,
                         mean_gap=args.mean_gap, payload_model=args.payload,
                         dup_fraction=args.dup_fraction, dup_gap=args.dup_gap, hosts=args.hosts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = generate_trace(spec)
    if args.out == "-":
        out.buffer.write(data)
        out.buffer.flush()
    else:
        with open(args.out, "wb") as fh:
            fh.write(data)
    return EXIT_OK


def cmd_sweep(args, out) -> int:
    try:
        grouper = GrouperConfig(args.mfd, args.idle_timeout)
        cost = CostModel(args.fast_price, args.bulk_price)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    src = _binary_in(args.input)
    try:
        packets, link_type = read_pcap(src)
        packets = list(packets)
    finally:
        if src is not sys.stdin.buffer:
            src.close()
    configs = args.chunking or [ChunkingConfig.cdc(4096)]
    rows = dedup_window_sweep(packets, configs, args.windows, link_type, grouper, cost)
    out.write(format_sweep(rows, args.format))
    return EXIT_OK


def cmd_stats(args, out) -> int:
    fast = _archive_dir(args.archive, "--archive")
    try:
        cost = CostModel(args.fast_price, args.bulk_price)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with Archive.open(fast, args.bulk_dir) as archive:
        rep = RecordReport.from_dict(archive.stats)
        fast_b, bulk_b = archive.tier_bytes()
        sealed = archive.sealed_epochs()
        pairs = _report_pairs(rep) + [
            ("epochs", len(sealed)),
            ("first_epoch", sealed[0] if sealed else ""),
            ("last_epoch", sealed[-1] if sealed else ""),
            ("live_flows", archive.total_flows()),
            ("live_packets", archive.total_packets()),
            ("live_fast_bytes", fast_b),
            ("live_bulk_bytes", bulk_b),
            ("chunking", str(archive.config.chunking)),
            ("dedup_window", archive.config.dedup_window),
            ("storage_cost", f"{storage_cost(fast_b, bulk_b, cost):.6f}"),
        ]
    _emit_table(pairs, args.format, out)
    return EXIT_OK


def cmd_cost(args, out) -> int:
    try:
        model = CostModel(args.fast_price, args.bulk_price)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    total = storage_cost(args.fast_gb * 1e9, args.bulk_gb * 1e9, model)
    out.write(f"{total:.2f}\n")
    return EXIT_OK


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=err)
        cmd = args.command
        if cmd == "record":
            return cmd_record(args, out)
        if cmd == "query":
            return cmd_query(args, out, err)
        if cmd == "evict":
            return cmd_evict(args, out)
        if cmd == "gen":
            return cmd_gen(args, out)
        if cmd == "sweep":
            return cmd_sweep(args, out)
        if cmd == "stats":
            return cmd_stats(args, out)
        return cmd_cost(args, out)
    except UsageError as exc:
        err.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except FlowVaultError as exc:
        err.write(f"error: {exc}\n")
        return EXIT_DATA
    except OSError as exc:
        err.write(f"error: {exc}\n")
        return EXIT_DATA


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
