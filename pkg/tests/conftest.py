"""Shared helpers: a small builder for verbose trace lines and normalized records."""

from __future__ import annotations

import itertools

import orjson
import pytest

from provmon.events import (
    EntityId,
    EntityKind,
    EventKind,
    EventRecord,
    FileDescriptor,
    NetflowDescriptor,
    OtherDescriptor,
    SubjectDescriptor,
)


class Trace:
    """Builds a trace both as typed records and as verbose JSON lines."""

    def __init__(self, ts0: int = 1_000_000) -> None:
        self.records: list = []
        self._uuids = itertools.count(1)
        self._seq = itertools.count(1)
        self.ts = ts0

    def _uuid(self) -> str:
        return f"{next(self._uuids):032x}"

    def subject(self, image: str = "/home/u/tool", pid: int = 100, parent=None) -> EntityId:
        eid = EntityId(EntityKind.SUBJECT, self._uuid())
        self.records.append(SubjectDescriptor(eid, pid, image, parent))
        return eid

    def file(self, path: str) -> EntityId:
        eid = EntityId(EntityKind.FILE, self._uuid())
        self.records.append(FileDescriptor(eid, path))
        return eid

    def netflow(self, ip: str, port: int) -> EntityId:
        eid = EntityId(EntityKind.NETFLOW, self._uuid())
        self.records.append(NetflowDescriptor(eid, ip, port))
        return eid

    def pipe(self, hint: str = "pipe") -> EntityId:
        eid = EntityId(EntityKind.PIPE, self._uuid())
        self.records.append(OtherDescriptor(eid, hint))
        return eid

    def event(self, kind: str, subj: EntityId, obj=None, obj2=None, **attrs) -> EventRecord:
        self.ts += 1
        if kind == "fork":
            obj, obj2 = None, obj if obj2 is None else obj2
        e = EventRecord(next(self._seq), self.ts, EventKind[kind.upper()], subj, obj, obj2, attrs)
        self.records.append(e)
        return e

    def lines(self) -> list[bytes]:
        from provmon.events import serialize_record
        return [orjson.dumps(serialize_record(r)) for r in self.records]

    def write(self, path) -> None:
        path.write_bytes(b"\n".join(self.lines()) + b"\n")


@pytest.fixture
def trace() -> Trace:
    return Trace()


# Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary.

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
