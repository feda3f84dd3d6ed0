import gzip

import orjson
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from provmon.events import EntityKind, EventRecord, FileDescriptor, SubjectDescriptor, serialize_record
from provmon.ingest import (
    FormatError,
    IngestConfig,
    IoError,
    OrderViolation,
    normalize,
    open_stream,
    write_quarantine,
)
from provmon.scenarios import random_trace

S = "0" * 31 + "1"
F = "0" * 31 + "2"
N = "0" * 31 + "3"


def j(obj) -> bytes:
    return orjson.dumps(obj)


def ev(seq, kind, subj=S, obj=F, obj2=None, **attrs):
    return j({"seq": seq, "ts": 1000 + seq, "kind": kind, "subj": subj, "obj": obj, "obj2": obj2, "attrs": attrs})


SUBJ = j({"def": "subject", "uuid": S, "pid": 5, "image": "/home/u/app", "parent": None})
FILE = j({"def": "file", "uuid": F, "url": "/home/u/f"})


def test_fresh_handle_and_counting(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_bytes(b"\n".join([SUBJ, FILE, ev(1, "read")]) + b"\n")
    s = open_stream(p)
    assert s.stats.lines_read == 0
    out = list(s)
    assert s.stats.lines_read == 3
    assert len(out) == 3 and isinstance(out[2], EventRecord)


def test_gzip_detected_by_magic(tmp_path):
    p = tmp_path / "t.data"
    p.write_bytes(gzip.compress(b"\n".join([SUBJ, FILE, ev(1, "read")])))
    assert len(list(open_stream(p))) == 3


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError):
        open_stream(tmp_path / "nonexistent")
    assert issubclass(IoError, OSError)


def test_unparsable_first_line_is_format_error(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_bytes(b"this is not json\n" + SUBJ + b"\n")
    with pytest.raises(FormatError):
        open_stream(p)


def test_empty_file_is_an_empty_stream(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_bytes(b"")
    s = open_stream(p)
    assert list(s) == [] and s.stats.lines_read == 0


def test_identical_definitions_are_deduplicated():
    recs, q, stats = normalize([FILE, FILE, SUBJ])
    assert stats.duplicates_dropped == 1
    assert stats.definitions_interned == 2
    assert len([r for r in recs if isinstance(r, FileDescriptor)]) == 1
    assert stats.balanced()


def test_changed_definition_passes_through():
    changed = j({"def": "file", "uuid": F, "url": "/home/u/g"})
    recs, _, stats = normalize([FILE, changed])
    assert [r.path for r in recs] == ["/home/u/f", "/home/u/g"]
    assert stats.duplicates_dropped == 0 and stats.definitions_interned == 2


def test_undefined_uuid_without_definition_is_quarantined():
    ghost = "f" * 32
    recs, q, stats = normalize([SUBJ, ev(1, "read", obj=ghost)])
    assert [e.reason for e in q] == ["undefined_uuid"]
    assert q[0].line_no == 2
    assert stats.quarantined == 1 and stats.events_delivered == 0
    assert stats.balanced()


def test_late_definition_within_window_releases_in_order():
    lines = [SUBJ, ev(1, "read"), ev(2, "write"), FILE, ev(3, "read")]
    recs, q, stats = normalize(lines)
    assert q == []
    events = [r.seq for r in recs if type(r) is EventRecord]
    assert events == [1, 2, 3]
    first_file = next(i for i, r in enumerate(recs) if isinstance(r, FileDescriptor))
    first_event = next(i for i, r in enumerate(recs) if type(r) is EventRecord)
    assert first_file < first_event


def test_unrelated_definition_waits_behind_held_events():
    other = j({"def": "subject", "uuid": N, "pid": 6, "image": "/home/u/child", "parent": S})
    recs, q, _ = normalize([SUBJ, ev(1, "read"), other, FILE])
    assert q == []
    order = [r.seq if type(r) is EventRecord else r.id.uuid for r in recs]
    assert order == [S, F, 1, N]


def test_late_binding_window_bounds_the_buffer():
    lines = [SUBJ, ev(1, "read")] + [ev(i, "close", obj=S.replace("1", "9")) for i in range(2, 6)] + [FILE]
    recs, q, stats = normalize(lines, IngestConfig(late_binding_window=2))
    assert "undefined_uuid" in {e.reason for e in q}
    assert not any(type(r) is EventRecord and r.seq == 1 for r in recs)
    assert stats.balanced()


def test_missing_subject_name_is_recovered_from_exec():
    nameless = j({"def": "subject", "uuid": S, "pid": 5, "image": "", "parent": None})
    recs, _, stats = normalize([nameless, FILE, ev(1, "exec", exe="/bin/sh")])
    subjects = [r for r in recs if isinstance(r, SubjectDescriptor)]
    assert subjects[-1].image == "/bin/sh"
    assert stats.names_recovered == 1


def test_missing_ip_netflow_is_flagged():
    flow = j({"def": "netflow", "uuid": N, "ip": "", "port": 0})
    recs, _, stats = normalize([SUBJ, flow, ev(1, "send", obj=N)])
    assert stats.missing_ip == 1
    assert recs[1].missing_ip


def test_path_recovery_order():
    a = j({"def": "file", "uuid": F, "attrs": {"fdpath": "/a", "upath1": "/b"}})
    b = j({"def": "file", "uuid": N, "attrs": {"upath1": "/b"}})
    recs, _, stats = normalize([a, b])
    assert [r.path for r in recs] == ["/a", "/b"]
    assert stats.paths_recovered == 2


def test_uuid_reuse_across_kinds_gives_two_entities():
    flow = j({"def": "netflow", "uuid": F, "ip": "1.2.3.4", "port": 1})
    recs, _, stats = normalize([SUBJ, FILE, flow, ev(1, "read")])
    assert {r.id.kind for r in recs if not isinstance(r, EventRecord)} == {EntityKind.SUBJECT, EntityKind.FILE, EntityKind.NETFLOW}
    assert stats.uuid_collisions == 1
    event = recs[-1]
    assert event.object.kind is EntityKind.FILE


def test_unconnected_and_malformed_and_unknown_kind():
    lines = [SUBJ, FILE, ev(1, "read", obj=None), b"{broken", b"", ev(2, "teleport"), ev(3, "fork", obj2=None)]
    recs, q, stats = normalize(lines)
    assert [e.reason for e in q] == ["unconnected_event", "malformed", "malformed", "unknown_kind", "unconnected_event"]
    assert stats.balanced()


def test_seq_regression_aborts():
    with pytest.raises(OrderViolation) as info:
        normalize([SUBJ, FILE, ev(5, "read"), ev(4, "read")])
    assert info.value.seq == 4 and info.value.last == 5


def test_quarantine_file(tmp_path):
    _, q, _ = normalize([SUBJ, b"junk"])
    n = write_quarantine(q, tmp_path / "q.jsonl")
    rows = [orjson.loads(x) for x in (tmp_path / "q.jsonl").read_bytes().splitlines()]
    assert n == 1 and rows == [{"line_no": 2, "reason": "malformed", "raw": "junk"}]


def _lines(records):
    return [orjson.dumps(serialize_record(r)) for r in records]


noise_lines = st.sampled_from([b"", b"{", b'{"def":"file"}', b'{"seq":1}', SUBJ, FILE])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.lists(st.tuples(st.integers(0, 300), noise_lines), max_size=20))
def test_ledger_balances_on_any_stream(seed, inserts):
    lines = _lines(random_trace(seed, 300))
    for pos, extra in sorted(inserts, reverse=True):
        lines.insert(min(pos, len(lines)), extra)
    recs, q, stats = normalize(lines)
    assert stats.lines_read == len(lines)
    assert stats.balanced()
    assert stats.events_delivered + stats.definitions_interned + stats.names_recovered == len(recs)
    assert stats.quarantined == len(q)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32))
def test_normalization_is_idempotent(seed):
    lines = _lines(random_trace(seed, 300))
    lines += [x for x in lines if x.startswith(b'{"def"')][:5]
    once, _, _ = normalize(lines)
    twice, q2, stats2 = normalize(_lines(once))
    assert twice == once
    assert q2 == [] and stats2.duplicates_dropped == 0
