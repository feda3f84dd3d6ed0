import gzip

import orjson
from hypothesis import given, settings
from hypothesis import strategies as st

from provmon.csr import decode, encode, read_csr, write_csr
from provmon.events import serialize_record
from provmon.ingest import normalize
from provmon.scenarios import ScenarioKind, ScenarioSpec, generate, random_trace


def test_empty_sequence_gives_small_valid_file(tmp_path):
    stats = write_csr([], tmp_path / "e.csr.gz")
    assert stats.bytes_csr < 64
    assert stats.bytes_csr == (tmp_path / "e.csr.gz").stat().st_size
    assert read_csr(tmp_path / "e.csr.gz") == []


def test_header_and_body_layout():
    text, _ = encode(random_trace(1, 20))
    lines = text.decode().splitlines()
    assert lines[0].startswith("#provmon-csr")
    n = int(lines[1])
    body = lines[2 + n:]
    events = [ln for ln in body if not ln.startswith("@")]
    assert len(events) == 20
    assert all(len(ln.split("\t")) == 7 for ln in events)


def test_round_trip_10k_random_events(tmp_path):
    records = random_trace(7, 10_000)
    write_csr(records, tmp_path / "r.csr.gz")
    assert read_csr(tmp_path / "r.csr.gz") == records


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 400))
def test_round_trip_property(seed, n):
    records = random_trace(seed, n)
    text, _ = encode(records)
    assert list(decode(iter(text.decode().splitlines()))) == records


def test_output_is_deterministic(tmp_path):
    records = random_trace(3, 500)
    write_csr(records, tmp_path / "a.gz")
    write_csr(records, tmp_path / "b.gz")
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()
    assert gzip.decompress((tmp_path / "a.gz").read_bytes()).startswith(b"#provmon-csr")


def test_generated_trace_compresses_well(tmp_path):
    data, _ = generate(ScenarioSpec(ScenarioKind.PANDEX, 4, 20_000))
    records, _, _ = normalize(data.splitlines())
    verbose = b"".join(orjson.dumps(serialize_record(r)) + b"\n" for r in records)
    stats = write_csr(records, tmp_path / "p.gz")
    assert stats.bytes_csr / len(verbose) <= 0.10
    assert read_csr(tmp_path / "p.gz") == records
