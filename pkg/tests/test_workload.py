import io
import random

import pytest
from hypothesis import given, settings, strategies as st

from flowvault.chunking import ChunkingConfig
from flowvault.packet import parse_headers
from flowvault.recorder import record
from flowvault.store import ArchiveConfig
from flowvault.workload import (
    CHUNK_INDEX_ENTRY_BYTES, CostModel, TraceSpec, collect_chunk_events, dedup_window_sweep, format_sweep,
    generate_packets, generate_trace, re_payload, replay_window, storage_cost,
)


def test_re_payload_rule():
    assert list(re_payload(5, 3)) == [0, 3, 6, 9, 12]
    assert list(re_payload(4, 200)) == [0, 200, 144, 88]


def test_generation_is_deterministic():
    spec = TraceSpec(seed=12, duration=5)
    assert generate_trace(spec) == generate_trace(spec)
    assert generate_trace(spec) != generate_trace(TraceSpec(seed=13, duration=5))


def test_trace_is_time_ordered_and_sized():
    tr = generate_packets(TraceSpec(seed=0, duration=30))
    ts = [p.ts_us for p in tr.packets]
    assert ts == sorted(ts)
    mean = sum(p.captured_len for p in tr.packets) / len(tr.packets)
    # default shape aims at a 669-byte mean packet
    assert 640 < mean < 700


def test_cost_reference_row():
    assert round(storage_cost(6.861e9, 316.2e9), 2) == 19.84
    assert storage_cost(0, 0) == 0


@settings(max_examples=200)
@given(st.integers(0, 10**13), st.integers(0, 10**13),
       st.floats(0.001, 10), st.floats(0.001, 10))
def test_cost_arithmetic(fast, bulk, pf, pb):
    expected = fast * pf / 1e9 + bulk * pb / 1e9
    assert storage_cost(fast, bulk, CostModel(pf, pb)) == pytest.approx(expected, rel=1e-12, abs=1e-9)


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(0, 1)


def test_nr_trace_has_no_dedup_hits(tmp_path):
    tr = generate_packets(TraceSpec(seed=4, duration=20, payload_model="nr"))
    _, rep = record(io.BytesIO(tr.pcap()), tmp_path / "a", None,
                    ArchiveConfig(chunking=ChunkingConfig.cdc(4096)))
    assert rep.dedup_hits == 0


def test_dup_trace_detection_matches_ground_truth(tmp_path):
    tr = generate_packets(TraceSpec(seed=5, duration=60, flow_rate=20, payload_model="dup",
                                    dup_fraction=0.3, dup_gap=100))
    assert tr.dup_flows > 0
    a, rep = record(io.BytesIO(tr.pcap()), tmp_path / "a", None,
                    ArchiveConfig(epoch_length=30, dedup_window=200, chunking=ChunkingConfig.cdc(4096)))
    a.close()
    assert rep.dedup_hit_bytes == pytest.approx(tr.dup_payload_bytes, rel=0.02)


@pytest.fixture(scope="module")
def dup_events():
    tr = generate_packets(TraceSpec(seed=7, duration=30, flow_rate=15, payload_model="dup", dup_gap=20))
    return tr, collect_chunk_events(tr.packets, ChunkingConfig.cdc(2048))


def test_sweep_window_zero_detects_nothing(dup_events):
    tr, _ = dup_events
    rows = dedup_window_sweep(tr.packets, [ChunkingConfig.cdc(2048), ChunkingConfig.fixed(1024)], [0])
    assert all(r.redundancy_raw_pct == 0 and r.dup_raw_bytes == 0 for r in rows)


def test_sweep_monotone_and_steps_at_gap(dup_events):
    tr, ev = dup_events
    windows = [0, 1, 5, 19.99, 20, 30, 100]
    rows = [replay_window(ev, w) for w in windows]
    dups = [r.dup_raw_bytes for r in rows]
    assert dups == sorted(dups)
    below, at = rows[3], rows[4]
    assert at.dup_raw_bytes - below.dup_raw_bytes == pytest.approx(tr.dup_payload_bytes, rel=0.02)
    assert rows[-1].cost == pytest.approx(
        storage_cost(rows[-1].index_entries_peak * CHUNK_INDEX_ENTRY_BYTES,
                     rows[-1].stored_bytes - rows[-1].dup_stored_bytes))


def test_sweep_agrees_with_recording(tmp_path, dup_events):
    tr, ev = dup_events
    row = replay_window(ev, 25)
    _, rep = record(io.BytesIO(tr.pcap()), tmp_path / "a", None,
                    ArchiveConfig(epoch_length=10, dedup_window=25, chunking=ChunkingConfig.cdc(2048)))
    assert abs(row.dup_raw_bytes - rep.dedup_hit_bytes) <= ChunkingConfig.cdc(2048).max_size
    assert row.chunks == rep.chunks


def test_sweep_formats(dup_events):
    tr, ev = dup_events
    rows = [replay_window(ev, w) for w in (0, 30)]
    csv_text = format_sweep(rows, "csv")
    assert csv_text == format_sweep(rows, "csv")
    lines = csv_text.splitlines()
    assert lines[0].startswith("chunking,window,") and len(lines) == 3
    assert lines[1].split(",")[:2] == ["cdc:2048", "0"]
    text = format_sweep(rows)
    assert text.splitlines()[0].split()[0] == "chunking" and len(text.splitlines()) == 3


def test_spec_validation():
    with pytest.raises(ValueError):
        TraceSpec(payload_model="zip")
    with pytest.raises(ValueError):
        TraceSpec(tcp_frac=0.9, udp_frac=0.2)
