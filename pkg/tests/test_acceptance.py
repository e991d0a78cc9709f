"""Acceptance criteria 1-11, one verdict line each.

Each test records ``ACCEPT <n> PASS|FAIL <measurements>``; the lines are
repeated in the terminal summary. Run with ``pytest tests/test_acceptance.py -s``
to see them inline as well.
"""
from __future__ import annotations

import io
import os
import pickle
import random
import struct
import zlib

import pytest

from conftest import ACCEPTANCE, OracleTrace, header_only, oracle_header_len, oracle_select
from flowvault.chunking import ChunkingConfig
from flowvault.header_codec import decompress_headers
from flowvault.pcap import read_pcap, write_pcap
from flowvault.query import Criteria, Query, QueryEngine, Retrieval, Snapshot, TimeRange, run_online
from flowvault.recorder import PacedFeed, PipelineConfig, Recorder, measure_ingest_rate, record
from flowvault.store import Archive, ArchiveConfig
from flowvault.workload import (
    TraceSpec, collect_chunk_events, generate_packets, replay_window, storage_cost,
)

S = 1_000_000


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPT {n} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def canonical(packets) -> list:
    return [p for _, p in sorted(enumerate(packets), key=lambda t: (t[1].ts_us, t[0]))]


def record_packets(path, packets, link_type, config: ArchiveConfig, pipeline=PipelineConfig()):
    archive = Archive.create(path, None, config)
    rec = Recorder(archive, pipeline, link_type)
    rec.ingest_many(packets)
    report = rec.finish()
    return archive, report


def epoch_seqs(archive, epochs) -> set:
    seqs = set()
    for e in epochs:
        for loc, blk in archive.iter_epoch_blocks(e):
            seqs.update(r.seq for r in decompress_headers(blk, loc))
    return seqs


# ---------------------------------------------------------------- oracle suite
def random_query(rnd, oracle: OracleTrace, span):
    src, dst, proto, sport, dport = rnd.choice(oracle.keys)
    pool = {"src_ip": src, "dst_ip": dst, "any_ip": rnd.choice((src, dst)), "src_port": sport,
            "dst_port": dport, "any_port": rnd.choice((sport, dport)), "protocol": proto}
    roll = rnd.random()
    if roll < 0.1:
        pool["any_ip"] = rnd.getrandbits(32)        # most likely absent
    elif roll < 0.15:
        pool["dst_port"] = rnd.randrange(1, 1024)
    names = rnd.sample(sorted(pool), rnd.randrange(1, 4))
    if rnd.random() < 0.03:
        names = []
    crit = Criteria(**{k: pool[k] for k in names})
    lo, hi = span
    r = rnd.random()
    if r < 0.25:
        tr = TimeRange.entire()
    elif r < 0.4:
        tr = TimeRange.last(rnd.uniform(0.5, (hi - lo) / S))
    else:
        a = rnd.uniform(lo / S - 1, hi / S)
        tr = TimeRange.between(a, a + rnd.uniform(0, (hi - lo) / S / 2))
    return crit, tr


class SuiteResult:
    def __init__(self):
        self.queries = self.mismatches = self.work_violations = self.scan_violations = 0
        self.errors = self.nohit = self.hits = self.decompressed = self.verified = self.fp = 0

    def __str__(self):
        return (f"queries={self.queries} mismatches={self.mismatches} hits={self.hits} "
                f"nohit={self.nohit} errors={self.errors}")


def oracle_suite(engine, oracle: OracleTrace, n: int, seed: int, cross_check: int = 0) -> SuiteResult:
    rnd = random.Random(seed)
    snap = Snapshot.of(engine.archive)
    span = (int(oracle.ts.min()), int(oracle.ts.max()) + 1) if len(oracle.packets) else (0, 1)
    res = SuiteResult()
    modes = list(Retrieval)
    for i in range(n):
        crit, tr = random_query(rnd, oracle, span)
        retrieval = modes[i % 3]
        t0, t1 = tr.resolve(snap.newest_end_us)
        want = oracle.select(crit, t0, t1)
        if i < cross_check:
            assert want == oracle_select(oracle.packets, crit, t0, t1, oracle.keys)
        got = engine.execute(Query(tr, crit, retrieval), snap)
        st = got.stats
        res.queries += 1
        res.errors += len(got.errors)
        res.hits += bool(want)
        res.nohit += not want
        if retrieval is Retrieval.EXISTENCE:
            ok = got.exists == bool(want)
        elif retrieval is Retrieval.HEADERS:
            ok = got.packets() == [header_only(oracle.packets[j], oracle_header_len(oracle.packets[j].data))
                                   for j in want]
        else:
            ok = got.packets() == [oracle.packets[j] for j in want]
        res.mismatches += not ok
        res.decompressed += st.blocks_decompressed
        res.verified += st.verified
        res.fp += st.false_positives
        if st.blocks_decompressed > st.verified + st.false_positives:
            res.work_violations += 1
        if crit.index_lookups() and st.full_scan:
            res.scan_violations += 1
    return res


# ---------------------------------------------------------------- fixtures
@pytest.fixture(scope="module")
def query_trace(tmp_path_factory):
    spec = TraceSpec(seed=101, duration=120, flow_rate=40, hosts=48, payload_model="dup", dup_gap=25)
    tr = generate_packets(spec)
    path = tmp_path_factory.mktemp("acc_query")
    archive, _ = record_packets(path / "fast", tr.packets, tr.link_type, ArchiveConfig(epoch_length=10))
    yield tr, archive, OracleTrace(tr.packets)
    archive.close()


@pytest.fixture(scope="module")
def query_suite(query_trace):
    tr, archive, oracle = query_trace
    return oracle_suite(QueryEngine(archive), oracle, 1000, seed=2, cross_check=50)


# ---------------------------------------------------------------- criteria
ROUND_TRIP_TRACES = [
    # (seed, payload model, duration, flow rate, mean flow packets, epoch, chunking, workers)
    (1, "re", 60, 18, 12, 60, "cdc:4096", 1),
    (2, "nr", 60, 20, 12, 30, "cdc:4096", 1),
    (3, "dup", 80, 20, 12, 20, "cdc:1024", 2),
    (4, "re", 120, 30, 8, 60, "fixed:1024", 1),
    (5, "nr", 90, 25, 16, 45, "none", 1),
    (6, "dup", 100, 30, 12, 25, "cdc:2048", 4),
    (7, "re", 150, 40, 12, 60, "cdc:4096", 2),
    (8, "nr", 40, 60, 6, 10, "fixed:4096", 1),
    (9, "dup", 200, 25, 12, 50, "cdc:4096", 1),
    (10, "re", 60, 80, 4, 15, "cdc:512", 1),
    (11, "nr", 120, 15, 30, 60, "cdc:8192", 1),
    (12, "dup", 60, 50, 12, 30, "fixed:2048", 2),
    (13, "re", 300, 20, 12, 60, "cdc:4096", 1),
    (14, "nr", 60, 100, 3, 20, "cdc:4096", 1),
    (15, "dup", 120, 40, 10, 60, "cdc:4096", 4),
    (16, "re", 240, 50, 12, 120, "cdc:4096", 2),
    (17, "nr", 100, 40, 12, 100, "none", 1),
    (18, "dup", 150, 60, 12, 30, "cdc:2048", 2),
    (19, "re", 400, 30, 12, 60, "fixed:1460", 1),
    (20, "dup", 600, 28, 12, 60, "cdc:4096", 4),
]


def test_criterion_01_round_trip(tmp_path):
    sizes = []
    diffs = 0
    for seed, model, dur, rate, mfp, epoch, chunking, workers in ROUND_TRIP_TRACES:
        spec = TraceSpec(seed=seed, duration=dur, flow_rate=rate, mean_flow_packets=mfp, payload_model=model,
                         dup_gap=min(100, dur / 3))
        data = generate_packets(spec).pcap()
        archive, rep = record(io.BytesIO(data), tmp_path / f"t{seed}", None,
                              ArchiveConfig(epoch_length=epoch, chunking=ChunkingConfig.parse(chunking)),
                              PipelineConfig(workers=workers))
        back = QueryEngine(archive).execute(Query(retrieval=Retrieval.FULL)).pcap
        archive.close()
        packets, link = read_pcap(io.BytesIO(data))
        expected = write_pcap(canonical(list(packets)), link)
        sizes.append(rep.packets)
        if back != expected:
            diffs += 1
    verdict(1, diffs == 0 and len(sizes) >= 20 and min(sizes) >= 10_000,
            f"traces={len(sizes)} packets={min(sizes)}..{max(sizes)} total={sum(sizes)} "
            f"traces_with_differences={diffs}")


def test_criterion_02_query_oracle(query_trace, query_suite):
    tr, archive, oracle = query_trace
    res = query_suite
    verdict(2, res.mismatches == 0 and res.errors == 0 and res.hits > 100 and res.nohit > 50,
            f"packets={len(tr.packets)} epochs={len(archive.sealed_epochs())} {res}")


def test_criterion_03_work_bound(query_trace, query_suite):
    tr, archive, oracle = query_trace
    res = query_suite
    nohit_scans = 0
    engine = QueryEngine(archive)
    rnd = random.Random(3)
    for _ in range(200):
        crit = Criteria(any_ip=rnd.getrandbits(32), dst_port=rnd.randrange(1, 65536))
        if oracle.select(crit):
            continue
        st = engine.execute(Query(criteria=crit, retrieval=Retrieval.EXISTENCE)).stats
        nohit_scans += st.full_scan or st.blocks_decompressed > 0
    verdict(3, res.work_violations == 0 and res.scan_violations == 0 and nohit_scans == 0,
            f"decompressed={res.decompressed} verified={res.verified} collisions={res.fp} "
            f"bound_violations={res.work_violations} indexed_full_scans={res.scan_violations} "
            f"nohit_scans={nohit_scans}")


def test_criterion_04_index_size(tmp_path):
    spec = TraceSpec(seed=44, duration=100, flow_rate=1030, mean_flow_packets=1.5, hosts=4096,
                     payload_min=20, payload_max=200)
    tr = generate_packets(spec)
    archive, rep = record_packets(tmp_path / "fast", tr.packets, tr.link_type,
                                  ArchiveConfig(epoch_length=1000))
    epochs = archive.sealed_epochs()
    flows = archive.total_flows()
    per = archive.index_bytes() / flows / 2
    archive.close()
    verdict(4, flows >= 100_000 and per <= 12.0,
            f"flows={flows} epochs={len(epochs)} bytes_per_flow_per_field={per:.2f} (reference 6.07, limit 12)")


def test_criterion_05_header_compression(tmp_path):
    tr = generate_packets(TraceSpec(seed=55, duration=120))
    mean_size = sum(p.captured_len for p in tr.packets) / len(tr.packets)
    archive, rep = record_packets(tmp_path / "fast", tr.packets, tr.link_type, ArchiveConfig())
    archive.close()
    raw = bytearray()
    for p in tr.packets:
        raw += struct.pack("<IIII", p.ts_sec, p.ts_frac, p.captured_len, p.original_len)
        raw += p.data[:oracle_header_len(p.data)]
    assert len(raw) == rep.raw_header_bytes
    generic = len(zlib.compress(bytes(raw), 9))
    ratio = rep.header_block_bytes / len(raw)
    verdict(5, ratio <= 0.35 and rep.header_block_bytes < generic,
            f"mean_packet={mean_size:.1f}B raw={len(raw)} ours={rep.header_block_bytes} ({100 * ratio:.1f}%) "
            f"deflate_only={generic} ({100 * generic / len(raw):.1f}%)")


def test_criterion_06_dedup_ground_truth(tmp_path):
    notes = []
    ok = True
    for f, gap, seed in ((0.3, 100, 61), (0.5, 30, 62)):
        tr = generate_packets(TraceSpec(seed=seed, duration=60, flow_rate=30, payload_model="dup",
                                        dup_fraction=f, dup_gap=gap))
        data = tr.pcap()
        for window in (2 * gap, gap / 2):
            a, rep = record(io.BytesIO(data), tmp_path / f"d{seed}_{window}", None,
                            ArchiveConfig(epoch_length=30, dedup_window=window))
            a.close()
            if window > gap:
                err = rep.dedup_hit_bytes / tr.dup_payload_bytes - 1
                ok &= abs(err) <= 0.02
                notes.append(f"DUP({f},{gap}) w={window:g}: {rep.dedup_hit_bytes}/{tr.dup_payload_bytes} "
                             f"({100 * err:+.2f}%)")
            else:
                frac = rep.dedup_hit_bytes / tr.payload_bytes
                ok &= frac <= 0.001
                notes.append(f"DUP({f},{gap}) w={window:g}: {100 * frac:.3f}% of payload")
    tr = generate_packets(TraceSpec(seed=63, duration=60, flow_rate=30, payload_model="nr"))
    a, rep = record(io.BytesIO(tr.pcap()), tmp_path / "nr", None,
                    ArchiveConfig(chunking=ChunkingConfig.cdc(4096)))
    a.close()
    ok &= rep.dedup_hits == 0
    notes.append(f"NR cdc:4096 hits={rep.dedup_hits}")
    verdict(6, ok, "; ".join(notes))


def test_criterion_07_sweep(tmp_path):
    tr = generate_packets(TraceSpec(seed=71, duration=60, flow_rate=25, payload_model="dup", dup_gap=20))
    configs = [ChunkingConfig.cdc(4096), ChunkingConfig.cdc(1024), ChunkingConfig.fixed(1024)]
    windows = [0, 1, 10, 19.9, 20, 30, 100, 1000]
    monotone = True
    worst = 0
    checks = 0
    for cfg in configs:
        ev = collect_chunk_events(tr.packets, cfg)
        rows = [replay_window(ev, w) for w in windows]
        dups = [r.dup_raw_bytes for r in rows]
        monotone &= dups == sorted(dups)
        for w in (10, 30):
            a, rep = record_packets(tmp_path / f"{cfg}_{w}".replace(":", "_"), tr.packets, tr.link_type,
                                    ArchiveConfig(epoch_length=15, chunking=cfg, dedup_window=w))
            a.close()
            diff = abs(rows[windows.index(w)].dup_raw_bytes - rep.dedup_hit_bytes)
            worst = max(worst, diff / cfg.max_size)
            checks += 1
    verdict(7, monotone and worst <= 1.0,
            f"configs={len(configs)} windows={len(windows)} monotone={monotone} spot_checks={checks} "
            f"max_diff={worst:.3f} max_size chunks")


def test_criterion_08_eviction(tmp_path):
    tr = generate_packets(TraceSpec(seed=81, duration=90, flow_rate=25, hosts=48, payload_model="dup",
                                    dup_fraction=0.4, dup_gap=8))
    packets = [p for p in tr.packets if p.ts_us < 100 * S]
    cfg = dict(epoch_length=10, chunking=ChunkingConfig.cdc(1024))
    safe, rep = record_packets(tmp_path / "safe", packets, tr.link_type, ArchiveConfig(dedup_window=40, **cfg))
    epochs = safe.sealed_epochs()
    kept_seq = epoch_seqs(safe, epochs[5:])
    safe.evict_oldest(5)
    retained = [p for i, p in enumerate(packets) if i in kept_seq]
    res = oracle_suite(QueryEngine(safe), OracleTrace(retained), 1000, seed=8)
    safe.close()

    hard, _ = record_packets(tmp_path / "hard", packets, tr.link_type, ArchiveConfig(dedup_window=1000, **cfg))
    hard.evict_oldest(5, honor_horizons=False)
    full = QueryEngine(hard).execute(Query(retrieval=Retrieval.FULL))
    lost = set()
    for loc, msg in full.errors:
        assert loc is not None and "evicted" in msg
        blk = hard.read_header_block(loc)
        lost.update(r.seq for r in decompress_headers(blk, loc))
    survivors = [p for i, p in enumerate(packets) if i in kept_seq and i not in lost]
    exact = full.packets() == canonical(survivors)
    hard.close()
    verdict(8, epochs == list(range(10)) and rep.dedup_hits > 0 and res.mismatches == 0 and res.errors == 0
            and full.errors and exact,
            f"retained_epochs=5/10 cross_epoch_hits={rep.dedup_hits} {res}; "
            f"hard_eviction: unavailable_flows={len(full.errors)} other_packets_exact={exact}")


def test_criterion_09_online(tmp_path):
    tr = generate_packets(TraceSpec(seed=91, duration=60, flow_rate=40, hosts=48))
    cfg = ArchiveConfig(epoch_length=5)
    n = 0

    def factory():
        nonlocal n
        n += 1
        return Archive.create(tmp_path / f"rate{n}", None, cfg)

    rate = measure_ingest_rate(tr.packets, factory)
    cut = next(i for i, p in enumerate(tr.packets) if p.ts_us >= 25 * S)
    archive = Archive.create(tmp_path / "online", None, cfg)
    rec = Recorder(archive, PipelineConfig(), tr.link_type)
    rec.ingest_many(tr.packets[:cut])
    oracle = OracleTrace(tr.packets)
    rnd = random.Random(9)
    queries = []
    for i in range(12):
        crit, trange = random_query(rnd, oracle, (0, 25 * S))
        queries.append(Query(trange, crit, list(Retrieval)[i % 3], exhaustive_count=True))
    queries.append(Query(retrieval=Retrieval.FULL))
    feed = PacedFeed(tr.packets[cut:], 0.5 * rate, capacity=4096).start()
    outcomes = run_online(queries, rec, feed)
    feed.join()
    rec.finish()
    engine = QueryEngine(archive)
    same = 0
    for q, oc in zip(queries, outcomes):
        off = engine.execute(q, oc.snapshot)
        same += (oc.result.exists, oc.result.flow_count, oc.result.pcap) == (off.exists, off.flow_count, off.pcap)
    resumed = 0
    for q in queries:
        ref = engine.execute(q)
        task = engine.start(q)
        while True:
            task = pickle.loads(pickle.dumps(task)).resume(engine)
            if task.step():
                break
        r = task.result()
        resumed += (r.exists, r.flow_count, r.pcap) == (ref.exists, ref.flow_count, ref.pcap)
    all_in = archive.total_packets() == len(tr.packets)
    archive.close()
    verdict(9, feed.dropped == 0 and all_in and same == len(queries) and resumed == len(queries),
            f"max_rate={rate:.0f}pps paced={0.5 * rate:.0f}pps offered={feed.offered} dropped={feed.dropped} "
            f"online==offline {same}/{len(queries)} resume_equivalent {resumed}/{len(queries)}")


def test_criterion_10_cost():
    fast = (5.13 + 1.59 + 0.141) * 1e9
    total = storage_cost(fast, 316.2e9)
    verdict(10, round(total, 2) == 19.84, f"cost=${total:.4f} (reference $19.84)")


def _crash_child(path, packets, link_type, cfg, kill_at):
    calls = 0

    def hook(point):
        nonlocal calls
        calls += 1
        if calls == kill_at:
            os._exit(17)

    try:
        archive = Archive.create(path, None, cfg)
        archive.fault_hook = hook
        rec = Recorder(archive, PipelineConfig(), link_type)
        rec.ingest_many(packets)
        rec.finish()
        os._exit(0)
    except BaseException:
        os._exit(3)


def test_criterion_11_crash_consistency(tmp_path):
    tr = generate_packets(TraceSpec(seed=111, duration=24, flow_rate=12, hosts=32, payload_model="dup",
                                    dup_gap=5))
    cfg = ArchiveConfig(epoch_length=2, chunking=ChunkingConfig.cdc(1024))
    ref = Archive.create(tmp_path / "ref", None, cfg)
    points = []
    ref.fault_hook = points.append
    rec = Recorder(ref, PipelineConfig(), tr.link_type)
    rec.ingest_many(tr.packets)
    rec.finish()
    ref_blocks = {e: [b.to_bytes() for _, b in ref.iter_epoch_blocks(e)] for e in ref.sealed_epochs()}
    ref_seqs = {e: epoch_seqs(ref, [e]) for e in ref.sealed_epochs()}
    ref.close()
    rnd = random.Random(11)
    kills = sorted(rnd.sample(range(1, len(points) + 1), 100))
    bad = 0
    sealed_counts = []
    for k in kills:
        path = tmp_path / f"crash{k}"
        pid = os.fork()
        if pid == 0:
            _crash_child(path, tr.packets, tr.link_type, cfg, k)
        _, status = os.waitpid(pid, 0)
        if os.waitstatus_to_exitcode(status) != 17:
            bad += 1
            continue
        arc = Archive.open(path)
        sealed = arc.sealed_epochs()
        sealed_counts.append(len(sealed))
        intact = all([b.to_bytes() for _, b in arc.iter_epoch_blocks(e)] == ref_blocks[e] for e in sealed)
        keep = set().union(*(ref_seqs[e] for e in sealed)) if sealed else set()
        subset = [p for i, p in enumerate(tr.packets) if i in keep]
        ok = intact
        if subset:
            res = oracle_suite(QueryEngine(arc), OracleTrace(subset), 6, seed=k)
            ok &= res.mismatches == 0 and res.errors == 0
        full = QueryEngine(arc).execute(Query(retrieval=Retrieval.FULL))
        ok &= full.packets() == canonical(subset) and not full.errors
        arc.close()
        again = Archive.open(path, writable=True)
        ok &= again.sealed_epochs() == sealed
        again.close()
        bad += not ok
    verdict(11, bad == 0,
            f"kill_points=100 of {len(points)} fault sites; sealed epochs after crash "
            f"{min(sealed_counts)}..{max(sealed_counts)} of {len(ref_blocks)}; failures={bad}")
