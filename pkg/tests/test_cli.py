import io
import os
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from flowvault.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from flowvault.pcap import read_pcap
from flowvault.recorder import RecordReport

ROOT = Path(__file__).resolve().parents[1]


class Out(io.TextIOWrapper):
    def __init__(self):
        super().__init__(io.BytesIO(), encoding="utf-8")

    def text(self):
        self.flush()
        return self.buffer.getvalue().decode()


def cli(*argv):
    out, err = Out(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out, err.getvalue()


@pytest.fixture(scope="module")
def recorded(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    trace = d / "t.pcap"
    assert cli("gen", "--out", trace, "--seed", 3, "--duration", 15, "--flow-rate", 15)[0] == EXIT_OK
    code, out, _ = cli("record", "--in", trace, "--fast-dir", d / "fast", "--bulk-dir", d / "bulk",
                       "--epoch", 5, "--format", "csv")
    assert code == EXIT_OK
    head, values = out.text().splitlines()
    report = dict(zip(head.split(","), values.split(",")))
    return d, trace, report


def table(text):
    return dict(line.split(None, 1) for line in text.splitlines() if line.strip())


def test_record_then_stats_identity(recorded):
    d, _, report = recorded
    code, out, _ = cli("stats", "--archive", d / "fast", "--bulk-dir", d / "bulk", "--format", "csv")
    assert code == EXIT_OK
    head, values = out.text().splitlines()
    stats = dict(zip(head.split(","), values.split(",")))
    for k in RecordReport.__dataclass_fields__:
        if not k.endswith("seconds"):
            assert stats[k] == report[k], k
    assert stats["live_packets"] == report["packets"]


def test_exists_no_match(recorded):
    d = recorded[0]
    code, out, _ = cli("query", "--archive", d / "fast", "--src-ip", "1.1.1.1", "--retrieve", "exists")
    assert code == EXIT_OK and out.text() == "false\ncount 0\n"


def test_full_query_reproduces_trace(recorded):
    d, trace, _ = recorded
    dest = d / "full.pcap"
    for mode in ("offline", "online"):
        code, out, _ = cli("query", "--archive", d / "fast", "--retrieve", "full", "--out", dest,
                           "--mode", mode)
        assert code == EXIT_OK
        with open(dest, "rb") as fh:
            got = list(read_pcap(fh)[0])
        with open(trace, "rb") as fh:
            orig, _ = read_pcap(fh)
            orig = list(orig)
        want = [p for _, p in sorted(enumerate(orig), key=lambda t: (t[1].ts_us, t[0]))]
        assert got == want


def test_env_archive_and_stdout_pcap(recorded, monkeypatch):
    d = recorded[0]
    monkeypatch.setenv("FLOWVAULT_ARCHIVE", str(d / "fast"))
    code, out, _ = cli("query", "--proto", "udp", "--range", "0:5")
    assert code == EXIT_OK and out.buffer.getvalue()[:4] == bytes.fromhex("d4c3b2a1")
    code, out, err = cli("query", "--ip", "10.0.0.1", "--retrieve", "exists", "--count-all", "--stats")
    assert code == EXIT_OK and out.text().splitlines()[0] in ("true", "false")
    assert "index_lookups" in err


@pytest.mark.parametrize("argv", [
    ["query", "--archive", "x", "--src-port", "70000"],
    ["query", "--archive", "x", "--range", "later"],
    ["record", "--fast-dir", "x"],
    ["frobnicate"],
    ["record", "--in", "x", "--fast-dir", "y", "--chunking", "cdc:1000"],
])
def test_usage_errors(argv):
    code, _, err = cli(*argv)
    assert code == EXIT_USAGE and "usage error" in err


def test_missing_archive_is_usage_error(tmp_path, monkeypatch):
    monkeypatch.delenv("FLOWVAULT_ARCHIVE", raising=False)
    assert cli("query")[0] == EXIT_USAGE
    assert cli("stats", "--archive", tmp_path / "none")[0] == EXIT_USAGE


def test_bad_pcap_is_data_error(tmp_path):
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"not a pcap file at all, clearly")
    code, _, err = cli("record", "--in", bad, "--fast-dir", tmp_path / "a")
    assert code == EXIT_DATA and err.startswith("error:")
    assert cli("record", "--in", tmp_path / "missing.pcap", "--fast-dir", tmp_path / "b")[0] == EXIT_DATA


def test_evict_and_cost(tmp_path, recorded):
    src = recorded[0]
    shutil.copytree(src / "fast", tmp_path / "fast")
    shutil.copytree(src / "bulk", tmp_path / "bulk")
    fast = tmp_path / "fast"
    code, out, _ = cli("evict", "--archive", fast, "--bulk-dir", tmp_path / "bulk", "--retain-epochs", 2)
    assert code == EXIT_OK
    assert int(table(out.text())["epochs_removed"]) >= 1
    code, out, _ = cli("stats", "--archive", fast, "--bulk-dir", tmp_path / "bulk")
    assert table(out.text())["epochs"] == "2"
    assert cli("cost", "--fast-gb", 6.861, "--bulk-gb", 316.2)[1].text() == "19.84\n"


def test_sweep_csv_is_stable(recorded):
    trace = recorded[1]
    args = ("sweep", "--in", trace, "--chunking", "cdc:2048", "--chunking", "fixed:1024",
            "--windows", "0,10,100", "--format", "csv")
    a, b = cli(*args), cli(*args)
    assert a[0] == EXIT_OK and a[1].text() == b[1].text()
    lines = a[1].text().splitlines()
    assert len(lines) == 7 and lines[1].split(",")[4] == "0"


def test_gen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli("gen", "--out", tmp_path / name, "--seed", 9, "--duration", 2)[0] == EXIT_OK
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.slow
def test_end_to_end_script(tmp_path):
    env = dict(os.environ, TMPDIR=str(tmp_path), DURATION="20", FLOWVAULT=f"{sys.executable} -m flowvault")
    proc = subprocess.run(["bash", str(ROOT / "scripts" / "e2e.sh")], capture_output=True, text=True,
                          env=env, timeout=600)
    assert proc.returncode == 0, proc.stderr
    assert "identical" in proc.stdout
