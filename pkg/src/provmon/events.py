"""Normalized event and entity vocabulary shared by every stage of the engine."""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, NamedTuple, Optional, Union


class EntityKind(IntEnum):
    SUBJECT = 0
    FILE = 1
    NETFLOW = 2
    PIPE = 3
    SRCSINK = 4
    MEMORY = 5

    @property
    def label(self) -> str:
        return self.name.lower()


class EventKind(IntEnum):
    FORK = 0
    EXEC = 1
    READ = 2
    WRITE = 3
    RECV = 4
    SEND = 5
    CONNECT = 6
    ACCEPT = 7
    LOAD = 8
    MMAP_EXEC = 9
    CHMOD = 10
    UNLINK = 11
    RENAME = 12
    CREATE = 13
    CLOSE = 14
    PIPE_READ = 15
    PIPE_WRITE = 16

    @property
    def label(self) -> str:
        return self.name.lower()


class Flow(IntEnum):
    INTO_SUBJECT = 0
    OUT_OF_SUBJECT = 1
    SUBJECT_TO_SUBJECT = 2


# close carries no information flow; it is treated as an out-of-subject
# bookkeeping edge so that every kind has exactly one direction.
FLOW = {
    EventKind.READ: Flow.INTO_SUBJECT,
    EventKind.RECV: Flow.INTO_SUBJECT,
    EventKind.LOAD: Flow.INTO_SUBJECT,
    EventKind.EXEC: Flow.INTO_SUBJECT,
    EventKind.MMAP_EXEC: Flow.INTO_SUBJECT,
    EventKind.PIPE_READ: Flow.INTO_SUBJECT,
    EventKind.ACCEPT: Flow.INTO_SUBJECT,
    EventKind.WRITE: Flow.OUT_OF_SUBJECT,
    EventKind.SEND: Flow.OUT_OF_SUBJECT,
    EventKind.CREATE: Flow.OUT_OF_SUBJECT,
    EventKind.CHMOD: Flow.OUT_OF_SUBJECT,
    EventKind.UNLINK: Flow.OUT_OF_SUBJECT,
    EventKind.RENAME: Flow.OUT_OF_SUBJECT,
    EventKind.PIPE_WRITE: Flow.OUT_OF_SUBJECT,
    EventKind.CONNECT: Flow.OUT_OF_SUBJECT,
    EventKind.CLOSE: Flow.OUT_OF_SUBJECT,
    EventKind.FORK: Flow.SUBJECT_TO_SUBJECT,
}

DATA_READS = frozenset({EventKind.READ, EventKind.RECV, EventKind.PIPE_READ})
CODE_LOADS = frozenset({EventKind.EXEC, EventKind.LOAD, EventKind.MMAP_EXEC})
DATA_WRITES = frozenset({EventKind.WRITE, EventKind.SEND, EventKind.CREATE, EventKind.PIPE_WRITE})

EVENT_KINDS = {k.label: k for k in EventKind}
ENTITY_KINDS = {k.label: k for k in EntityKind}

# Namespace assumed for an event's object when the uuid is defined under
# several kinds (or not yet defined). Ingest re-resolves against definitions.
OBJECT_PREFERENCE: dict[EventKind, tuple[EntityKind, ...]] = {}
_FILE_FIRST = (EntityKind.FILE, EntityKind.MEMORY, EntityKind.SRCSINK, EntityKind.PIPE, EntityKind.NETFLOW)
_NET_FIRST = (EntityKind.NETFLOW, EntityKind.SRCSINK, EntityKind.PIPE, EntityKind.FILE, EntityKind.MEMORY)
_PIPE_FIRST = (EntityKind.PIPE, EntityKind.SRCSINK, EntityKind.FILE, EntityKind.NETFLOW, EntityKind.MEMORY)
for _k in EventKind:
    if _k in (EventKind.RECV, EventKind.SEND, EventKind.CONNECT, EventKind.ACCEPT):
        OBJECT_PREFERENCE[_k] = _NET_FIRST
    elif _k in (EventKind.PIPE_READ, EventKind.PIPE_WRITE):
        OBJECT_PREFERENCE[_k] = _PIPE_FIRST
    elif _k is EventKind.MMAP_EXEC:
        OBJECT_PREFERENCE[_k] = (EntityKind.MEMORY,) + tuple(x for x in _FILE_FIRST if x is not EntityKind.MEMORY)
    elif _k is EventKind.FORK:
        OBJECT_PREFERENCE[_k] = (EntityKind.SUBJECT,)
    else:
        OBJECT_PREFERENCE[_k] = _FILE_FIRST


class MalformedRecord(ValueError):
    """A trace record that cannot be turned into a typed record.

    Ingest quarantines these instead of aborting the stream.
    """

    reason = "malformed"


class UnknownKind(MalformedRecord):
    reason = "unknown_kind"


class EntityId(NamedTuple):
    kind: EntityKind
    uuid: str

    def __str__(self) -> str:
        return f"{self.kind.label}:{self.uuid}"


class EventRecord(NamedTuple):
    seq: int
    ts: int
    kind: EventKind
    subject: EntityId
    object: Optional[EntityId] = None
    object2: Optional[EntityId] = None
    attrs: dict = {}


@dataclass(frozen=True)
class SubjectDescriptor:
    id: EntityId
    pid: int = 0
    image: str = ""
    parent: Optional[EntityId] = None
    attrs: dict = field(default_factory=dict, compare=True)

    @property
    def name(self) -> str:
        return self.image


@dataclass(frozen=True)
class FileDescriptor:
    id: EntityId
    path: str = ""
    attrs: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.path


@dataclass(frozen=True)
class NetflowDescriptor:
    id: EntityId
    remote_ip: str = ""
    remote_port: int = 0
    attrs: dict = field(default_factory=dict)

    @property
    def missing_ip(self) -> bool:
        return not self.remote_ip

    @property
    def name(self) -> str:
        return f"{self.remote_ip or MISSING_IP}:{self.remote_port}"


@dataclass(frozen=True)
class OtherDescriptor:
    """Pipes, source/sink endpoints and memory objects: only a hint string."""

    id: EntityId
    hint: str = ""
    attrs: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.hint or f"{self.id.kind.label}:{self.id.uuid[:8]}"


EntityDescriptor = Union[SubjectDescriptor, FileDescriptor, NetflowDescriptor, OtherDescriptor]

# Display and interning sentinel for netflows whose address never appeared.
MISSING_IP = "0.0.0.0"

_HEX = frozenset("0123456789abcdef")
_SEQ_LIMIT = 1 << 63
_PROVISIONAL = [OBJECT_PREFERENCE[k][0] for k in EventKind]


def is_uuid(value: Any) -> bool:
    return type(value) is str and len(value) == 32 and _HEX.issuperset(value)


class RecordValidator:
    """Turns parsed JSON objects into typed records.

    Caches validated uuids and their provisional ``EntityId`` values, which
    keeps per-event validation cheap on long streams.
    """

    def __init__(self) -> None:
        self._ids: list[dict[str, EntityId]] = [{} for _ in EntityKind]

    def entity_id(self, kind: EntityKind, uuid: Any, what: str) -> EntityId:
        ids = self._ids[kind]
        eid = ids.get(uuid) if type(uuid) is str else None
        if eid is None:
            if not is_uuid(uuid):
                raise MalformedRecord(f"bad {what} uuid")
            eid = ids[uuid] = EntityId(kind, uuid)
        return eid

    def __call__(self, raw: Any) -> Union[EventRecord, EntityDescriptor]:
        if type(raw) is not dict:
            raise MalformedRecord("record is not an object")
        if "def" in raw:
            return self._definition(raw)
        return self._event(raw)

    def _event(self, raw: dict) -> EventRecord:
        get = raw.get
        seq = get("seq")
        ts = get("ts")
        if type(seq) is not int or seq < 0 or seq >= _SEQ_LIMIT:
            raise MalformedRecord("missing seq" if seq is None else "bad seq")
        if type(ts) is not int or ts < 0:
            raise MalformedRecord("missing ts" if ts is None else "bad ts")
        name = get("kind")
        kind = EVENT_KINDS.get(name) if type(name) is str else None
        if kind is None:
            if name is None:
                raise MalformedRecord("missing kind")
            raise UnknownKind(f"unknown kind {name!r}")
        subj = get("subj")
        subject = self._ids[0].get(subj) if type(subj) is str else None
        if subject is None:
            if subj is None:
                raise MalformedRecord("missing subject")
            subject = self.entity_id(EntityKind.SUBJECT, subj, "subject")
        obj = get("obj")
        pref = _PROVISIONAL[kind]
        if obj is None:
            object_ = None
        else:
            object_ = self._ids[pref].get(obj) if type(obj) is str else None
            if object_ is None:
                object_ = self.entity_id(pref, obj, "object")
        obj2 = get("obj2")
        if obj2 is None:
            object2 = None
        else:
            object2 = self.entity_id(EntityKind.SUBJECT if kind is EventKind.FORK else pref, obj2, "object2")
        attrs = get("attrs")
        if attrs is None:
            attrs = {}
        elif type(attrs) is not dict:
            raise MalformedRecord("attrs is not an object")
        return EventRecord(seq, ts, kind, subject, object_, object2, attrs)

    def _definition(self, raw: dict) -> EntityDescriptor:
        name = raw["def"]
        kind = ENTITY_KINDS.get(name) if type(name) is str else None
        if kind is None:
            raise UnknownKind(f"unknown entity kind {raw['def']!r}")
        eid = self.entity_id(kind, raw.get("uuid"), "definition")
        attrs = raw.get("attrs") or {}
        if type(attrs) is not dict:
            raise MalformedRecord("attrs is not an object")
        if kind is EntityKind.SUBJECT:
            pid = raw.get("pid", 0)
            if type(pid) is not int or pid < 0:
                raise MalformedRecord("bad pid")
            image = _opt_str(raw.get("image"), "image")
            parent = raw.get("parent")
            parent_id = None if parent is None else self.entity_id(EntityKind.SUBJECT, parent, "parent")
            return SubjectDescriptor(eid, pid, image, parent_id, attrs)
        if kind is EntityKind.FILE:
            # Path recovery order: url, then attrs.fdpath, then attrs.upath1.
            path = (_opt_str(raw.get("url"), "url") or _opt_str(attrs.get("fdpath"), "fdpath")
                    or _opt_str(attrs.get("upath1"), "upath1"))
            return FileDescriptor(eid, path, attrs)
        if kind is EntityKind.NETFLOW:
            ip = _opt_str(raw.get("ip"), "ip")
            if ip:
                try:
                    ipaddress.IPv4Address(ip)
                except ValueError:
                    raise MalformedRecord(f"bad ip {ip!r}") from None
            port = raw.get("port", 0)
            if type(port) is not int or not 0 <= port <= 65535:
                raise MalformedRecord("port out of range")
            return NetflowDescriptor(eid, ip, port, attrs)
        return OtherDescriptor(eid, _opt_str(raw.get("hint"), "hint"), attrs)


def _opt_str(value: Any, what: str) -> str:
    if value is None:
        return ""
    if type(value) is not str:
        raise MalformedRecord(f"{what} is not a string")
    return value


_default_validator = RecordValidator()


def validate_record(raw: Any) -> Union[EventRecord, EntityDescriptor]:
    """Validate one parsed trace record.

    Raises ``MalformedRecord`` (or its ``UnknownKind`` subclass) when a
    required field is absent or out of range.
    """
    return _default_validator(raw)


def serialize_record(rec: Union[EventRecord, EntityDescriptor]) -> dict:
    """Inverse of :func:`validate_record`, producing the verbose JSON shape."""
    if type(rec) is EventRecord:
        return {
            "seq": rec.seq,
            "ts": rec.ts,
            "kind": rec.kind.label,
            "subj": rec.subject.uuid,
            "obj": None if rec.object is None else rec.object.uuid,
            "obj2": None if rec.object2 is None else rec.object2.uuid,
            "attrs": rec.attrs,
        }
    out: dict[str, Any] = {"def": rec.id.kind.label, "uuid": rec.id.uuid}
    if isinstance(rec, SubjectDescriptor):
        out.update(pid=rec.pid, image=rec.image,
                   parent=None if rec.parent is None else rec.parent.uuid)
    elif isinstance(rec, FileDescriptor):
        out["url"] = rec.path
    elif isinstance(rec, NetflowDescriptor):
        out.update(ip=rec.remote_ip, port=rec.remote_port)
    else:
        out["hint"] = rec.hint
    if rec.attrs:
        out["attrs"] = rec.attrs
    return out
