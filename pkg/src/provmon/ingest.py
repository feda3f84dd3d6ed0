"""Trace reading and normalization.

Input is the verbose JSON-lines trace: one definition or event object per
line, optionally gzip-compressed. The normalizer repairs or sets aside the
data-quality defects real audit feeds exhibit (duplicate and conflicting
definitions, uuids reused across kinds, events whose entities are defined
late or never, events missing an endpoint, subjects without an image name)
and yields an ordered stream of typed records in which every event's
entities have already been defined.
"""

from __future__ import annotations

import dataclasses
import gzip
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Optional, Union

import orjson

from .events import (
    OBJECT_PREFERENCE,
    EntityDescriptor,
    EntityId,
    EntityKind,
    EventKind,
    EventRecord,
    FileDescriptor,
    MalformedRecord,
    NetflowDescriptor,
    RecordValidator,
    SubjectDescriptor,
)

GZIP_MAGIC = b"\x1f\x8b"

QUARANTINE_REASONS = ("malformed", "undefined_uuid", "duplicate_definition",
                      "unconnected_event", "unknown_kind")


class IoError(OSError):
    pass


class FormatError(ValueError):
    """The first line of a trace is not a record of any known shape."""


class OrderViolation(ValueError):
    """Event ordinals went backwards; the stream is treated as corrupt."""

    def __init__(self, line_no: int, seq: int, last: int) -> None:
        super().__init__(f"line {line_no}: seq {seq} does not follow {last}")
        self.line_no = line_no
        self.seq = seq
        self.last = last


@dataclass(frozen=True)
class QuarantineEntry:
    line_no: int
    reason: str
    raw: str

    def to_json(self) -> bytes:
        return orjson.dumps({"line_no": self.line_no, "reason": self.reason, "raw": self.raw})


@dataclass
class IngestConfig:
    late_binding_window: int = 10_000

    def __post_init__(self) -> None:
        if type(self.late_binding_window) is not int or self.late_binding_window < 0:
            raise ValueError("late_binding_window must be a non-negative integer")


@dataclass
class IngestStats:
    lines_read: int = 0
    events_delivered: int = 0
    definitions_interned: int = 0
    duplicates_dropped: int = 0
    quarantined: int = 0
    bytes_in: int = 0
    bytes_csr: int = 0
    missing_ip: int = 0
    uuid_collisions: int = 0
    names_recovered: int = 0
    paths_recovered: int = 0
    by_reason: dict = field(default_factory=lambda: dict.fromkeys(QUARANTINE_REASONS, 0))

    def balanced(self) -> bool:
        return self.lines_read == (self.events_delivered + self.definitions_interned
                                   + self.duplicates_dropped + self.quarantined)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_FORK = EventKind.FORK
_EXEC = EventKind.EXEC
_SUBJECT = EntityKind.SUBJECT


class Normalizer:
    """Single-consumer normalization state machine.

    Feed raw lines through :meth:`run`; typed records come out in order.
    Quarantined lines accumulate in :attr:`quarantine`.
    """

    def __init__(self, config: Optional[IngestConfig] = None) -> None:
        self.config = config or IngestConfig()
        self.stats = IngestStats()
        self.quarantine: list[QuarantineEntry] = []
        self._validate = RecordValidator()
        self._defs: dict[EntityId, EntityDescriptor] = {}
        self._kinds: dict[str, tuple] = {}
        self._nameless: dict[EntityId, SubjectDescriptor] = {}
        # Held events and, behind them, definitions kept in stream order.
        self._pending: deque = deque()
        self._held = 0
        self._waiting: Counter = Counter()
        self._last_seq = -1

    def _quarantine(self, line_no: int, reason: str, raw: Any) -> None:
        if isinstance(raw, (bytes, bytearray)):
            raw = raw.decode("utf-8", "replace")
        self.quarantine.append(QuarantineEntry(line_no, reason, raw.rstrip("\r\n")))
        self.stats.quarantined += 1
        self.stats.by_reason[reason] += 1

    def _bind(self, eid: Optional[EntityId], pref: tuple) -> Optional[EntityId]:
        kinds = self._kinds.get(eid.uuid)
        if kinds is None:
            return None
        if eid.kind in kinds:
            return eid
        for k in pref:
            if k in kinds:
                return self._validate.entity_id(k, eid.uuid, "object")
        return None

    def _resolve(self, e: EventRecord) -> Optional[EventRecord]:
        """Rebind an event's endpoints to defined namespaces, or None if any is undefined."""
        kinds = self._kinds.get(e.subject.uuid)
        if kinds is None or _SUBJECT not in kinds:
            return None
        pref = OBJECT_PREFERENCE[e.kind]
        obj = e.object
        obj2 = e.object2
        if obj is not None:
            b = self._bind(obj, pref)
            if b is None:
                return None
            if b is not obj:
                e = e._replace(object=b)
        if obj2 is not None:
            b = self._bind(obj2, (_SUBJECT,) if e.kind is _FORK else pref)
            if b is None:
                return None
            if b is not obj2:
                e = e._replace(object2=b)
        return e

    def _deliver(self, e: EventRecord) -> Iterator[Union[EventRecord, EntityDescriptor]]:
        if e.kind is _EXEC and self._nameless:
            d = self._nameless.get(e.subject)
            exe = e.attrs.get("exe")
            if d is not None and type(exe) is str and exe:
                del self._nameless[e.subject]
                self.stats.names_recovered += 1
                yield dataclasses.replace(d, image=exe)
        self.stats.events_delivered += 1
        yield e

    def _hold(self, line_no: int, raw: bytes, e: EventRecord) -> None:
        self._pending.append((line_no, raw, e))
        self._held += 1
        w = self._waiting
        w[e.subject.uuid] += 1
        for o in (e.object, e.object2):
            if o is not None:
                w[o.uuid] += 1

    def _unhold(self, e: EventRecord) -> None:
        self._held -= 1
        w = self._waiting
        for x in (e.subject, e.object, e.object2):
            if x is not None:
                w[x.uuid] -= 1
                if not w[x.uuid]:
                    del w[x.uuid]

    def _emit(self, d: EntityDescriptor) -> Iterator[EntityDescriptor]:
        # A definition some held event waits on goes out now; any other
        # waits its turn so held events see the state they preceded.
        if self._pending and d.id.uuid not in self._waiting:
            self._pending.append((0, None, d))
        else:
            yield d

    def _release_head(self) -> Iterator[Union[EventRecord, EntityDescriptor]]:
        """Force out the oldest held event, delivered or quarantined."""
        pending = self._pending
        while type(pending[0][2]) is not EventRecord:
            yield pending.popleft()[2]
        line_no, raw, e = pending.popleft()
        self._unhold(e)
        r = self._resolve(e)
        if r is None:
            self._quarantine(line_no, "undefined_uuid", raw)
        else:
            yield from self._deliver(r)

    def _drain(self, flush: bool = False) -> Iterator[Union[EventRecord, EntityDescriptor]]:
        pending = self._pending
        while pending:
            line_no, raw, e = pending[0]
            if type(e) is not EventRecord:
                pending.popleft()
                yield e
                continue
            r = self._resolve(e)
            if r is None:
                if not flush:
                    return
                self._quarantine(line_no, "undefined_uuid", raw)
                pending.popleft()
                self._unhold(e)
                continue
            pending.popleft()
            self._unhold(e)
            yield from self._deliver(r)

    def _definition(self, d: EntityDescriptor, path_recovered: bool = False) -> Iterator[EntityDescriptor]:
        stats = self.stats
        eid = d.id
        prev = self._defs.get(eid)
        if prev is not None:
            if prev == d:
                stats.duplicates_dropped += 1
                return
            self._defs[eid] = d
            stats.definitions_interned += 1
            if self._nameless and type(d) is SubjectDescriptor and d.image:
                self._nameless.pop(eid, None)
            yield from self._emit(d)
            return
        self._defs[eid] = d
        stats.definitions_interned += 1
        kinds = self._kinds.get(eid.uuid)
        if kinds is None:
            self._kinds[eid.uuid] = (eid.kind,)
        else:
            stats.uuid_collisions += 1
            self._kinds[eid.uuid] = kinds + (eid.kind,)
        if type(d) is SubjectDescriptor:
            if not d.image:
                self._nameless[eid] = d
        elif type(d) is NetflowDescriptor:
            if not d.remote_ip:
                stats.missing_ip += 1
        elif path_recovered:
            stats.paths_recovered += 1
        yield from self._emit(d)
        if self._pending:
            yield from self._drain()

    def run(self, lines: Iterable[bytes], start_line: int = 1) -> Iterator[Union[EventRecord, EntityDescriptor]]:
        """Normalize ``lines``; drains the late-binding buffer at the end."""
        stats = self.stats
        loads = orjson.loads
        validate = self._validate
        pending = self._pending
        window = self.config.late_binding_window
        resolve = self._resolve
        kinds_of = self._kinds
        line_no = start_line - 1
        for line in lines:
            line_no += 1
            stats.lines_read += 1
            stats.bytes_in += len(line)
            try:
                raw = loads(line)
            except orjson.JSONDecodeError:
                self._quarantine(line_no, "malformed", line)
                continue
            try:
                if type(raw) is dict and "def" not in raw:
                    e = validate._event(raw)
                else:
                    d = validate(raw)
                    yield from self._definition(
                        d, type(d) is FileDescriptor and bool(d.path) and not raw.get("url"))
                    continue
            except MalformedRecord as exc:
                self._quarantine(line_no, exc.reason, line)
                continue
            seq = e.seq
            if seq <= self._last_seq:
                raise OrderViolation(line_no, seq, self._last_seq)
            self._last_seq = seq
            if (e.object2 if e.kind is _FORK else e.object) is None:
                self._quarantine(line_no, "unconnected_event", line)
                continue
            if not pending:
                # Fast path: subject and object already defined under their provisional kinds.
                k = kinds_of.get(e.subject.uuid)
                o = e.object
                if k is not None and k[0] is _SUBJECT and o is not None and e.object2 is None:
                    ko = kinds_of.get(o.uuid)
                    if ko is not None and len(ko) == 1 and ko[0] is o.kind:
                        if e.kind is _EXEC and self._nameless:
                            yield from self._deliver(e)
                        else:
                            stats.events_delivered += 1
                            yield e
                        continue
                r = resolve(e)
                if r is not None:
                    yield from self._deliver(r)
                    continue
            self._hold(line_no, line, e)
            if self._held > window:
                yield from self._release_head()
                yield from self._drain()
        yield from self._drain(flush=True)


def normalize(lines: Iterable[Union[bytes, str]], config: Optional[IngestConfig] = None
              ) -> tuple[list, list[QuarantineEntry], IngestStats]:
    """Normalize a whole in-memory stream.

    Returns the ordered records (definitions interleaved with events), the
    quarantined lines and the ingest counters.
    """
    n = Normalizer(config)
    encoded = (x.encode() if isinstance(x, str) else x for x in lines)
    records = list(n.run(encoded))
    return records, n.quarantine, n.stats


def _open_raw(path: Union[str, Path]) -> IO[bytes]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(exc.errno, f"cannot open trace: {exc.strerror}", str(path)) from None
    magic = fh.read(2)
    fh.seek(0)
    if magic == GZIP_MAGIC:
        return gzip.open(fh, "rb")  # type: ignore[return-value]
    return fh


class TraceStream:
    """Handle over one trace file; iterate to get normalized records in order."""

    def __init__(self, path: Union[str, Path], config: Optional[IngestConfig] = None) -> None:
        self.path = Path(path)
        self._fh = _open_raw(path)
        self._normalizer = Normalizer(config)
        self._first: Optional[bytes] = None
        try:
            first = self._fh.readline()
        except (OSError, EOFError) as exc:
            self._fh.close()
            raise IoError(f"cannot read trace {path}: {exc}") from None
        if first:
            try:
                raw = orjson.loads(first)
                RecordValidator()(raw)
            except (orjson.JSONDecodeError, MalformedRecord):
                self._fh.close()
                raise FormatError(f"{path}: first line is not a trace record") from None
            self._first = first
        self._started = False

    @property
    def stats(self) -> IngestStats:
        return self._normalizer.stats

    @property
    def quarantine(self) -> list[QuarantineEntry]:
        return self._normalizer.quarantine

    def _lines(self) -> Iterator[bytes]:
        if self._first is not None:
            yield self._first
            self._first = None
        try:
            yield from self._fh
        except (OSError, EOFError) as exc:
            raise IoError(f"error reading trace {self.path}: {exc}") from None

    def __iter__(self) -> Iterator[Union[EventRecord, EntityDescriptor]]:
        if self._started:
            raise RuntimeError("a trace stream can be consumed only once")
        self._started = True
        try:
            yield from self._normalizer.run(self._lines())
        finally:
            self._fh.close()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TraceStream":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def open_stream(path: Union[str, Path], config: Optional[IngestConfig] = None) -> TraceStream:
    """Open a verbose trace (plain or gzip, detected by magic bytes)."""
    return TraceStream(path, config)


def write_quarantine(entries: Iterable[QuarantineEntry], out: Union[str, Path]) -> int:
    n = 0
    with open(out, "wb") as fh:
        for q in entries:
            fh.write(q.to_json())
            fh.write(b"\n")
            n += 1
    return n
