"""Detection policies evaluated on every applied event, and the alarm log format."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import orjson

from .context import EMPTY
from .events import (
    CODE_LOADS,
    DATA_READS,
    EntityId,
    EntityKind,
    EventKind,
)
from .graph import ApplyOutcome, ProvenanceGraph
from .tags import (
    PACKED_STATES,
    ConfidentialityLevel,
    ConfigError,
    IntegrityLevel,
    TagState,
    propagate_packed,
)


class Policy(Enum):
    UNTRUSTED_LOAD = "UntrustedLoad"
    DOWNGRADE = "Downgrade"
    CONF_LEAK = "ConfLeak"
    PERMISSION_CHANGE = "PermissionChange"
    WRITTEN_THEN_EXEC = "WrittenThenExec"

    def __str__(self) -> str:
        return self.value


POLICY_NAMES = {p.value: p for p in Policy}

_UL, _DG, _CLK, _PC, _WTE = (1 << i for i in range(5))
_BIT = {Policy.UNTRUSTED_LOAD: _UL, Policy.DOWNGRADE: _DG, Policy.CONF_LEAK: _CLK,
        Policy.PERMISSION_CHANGE: _PC, Policy.WRITTEN_THEN_EXEC: _WTE}

_IL = IntegrityLevel
_LEAK_WRITES = frozenset({EventKind.WRITE, EventKind.SEND, EventKind.PIPE_WRITE})
_OBJECT_DOWNGRADE = _LEAK_WRITES
_WRITE_MARKS = frozenset({EventKind.WRITE, EventKind.CREATE})
_EXEC_SAFE = frozenset({_IL.INVULNERABLE, _IL.WHITELIST})
INFINITE = float("inf")
_NETFLOW = EntityKind.NETFLOW


def _parse_level(enum: Any, value: Any, what: str) -> Any:
    if isinstance(value, enum):
        return value
    try:
        return enum[str(value).upper()]
    except KeyError:
        raise ConfigError(f"{what}: unknown level {value!r}") from None


@dataclass
class DetectionConfig:
    enabled: frozenset = frozenset(Policy)
    leak_conf_threshold: ConfidentialityLevel = ConfidentialityLevel.SENSITIVE
    downgrade_floor: IntegrityLevel = IntegrityLevel.BENIGN
    written_exec_window: float = INFINITE
    # A subject that raised this many distinct alarm classes is marked
    # malicious; 0 turns escalation off.
    escalation_classes: int = 3

    def __post_init__(self) -> None:
        enabled = set()
        for p in self.enabled:
            if isinstance(p, Policy):
                enabled.add(p)
            elif p in POLICY_NAMES:
                enabled.add(POLICY_NAMES[p])
            else:
                raise ConfigError(f"unknown policy {p!r}")
        self.enabled = frozenset(enabled)
        self.leak_conf_threshold = _parse_level(ConfidentialityLevel, self.leak_conf_threshold,
                                                "leak_conf_threshold")
        self.downgrade_floor = _parse_level(IntegrityLevel, self.downgrade_floor, "downgrade_floor")
        w = self.written_exec_window
        if w is None or w == "inf":
            w = INFINITE
        if not isinstance(w, (int, float)) or isinstance(w, bool) or w < 0:
            raise ConfigError("written_exec_window must be a non-negative event count")
        self.written_exec_window = w
        if type(self.escalation_classes) is not int or self.escalation_classes < 0:
            raise ConfigError("escalation_classes must be a non-negative integer")

    @classmethod
    def from_dict(cls, data: dict) -> "DetectionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown detection keys: {sorted(unknown)}")
        data = dict(data)
        if "enabled" in data:
            data["enabled"] = frozenset(data["enabled"])
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DetectionConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)


@dataclass(frozen=True)
class Alarm:
    ts: int
    policy: Policy
    subject_pid: int
    subject_image: str
    subject: EntityId
    subject_version: int
    object_name: str
    object: EntityId
    object_version: int
    trigger_seq: int
    # Graph and context handles used by forensics; not part of the alarm's identity.
    subject_index: int = field(default=-1, compare=False)
    object_index: int = field(default=-1, compare=False)
    subject_context: int = field(default=EMPTY, compare=False)
    object_context: int = field(default=EMPTY, compare=False)

    def to_dict(self) -> dict:
        return {
            "ts": self.ts,
            "policy": self.policy.value,
            "trigger_seq": self.trigger_seq,
            "subject": {"pid": self.subject_pid, "image": self.subject_image,
                        "id": str(self.subject), "version": self.subject_version},
            "object": {"name": self.object_name, "id": str(self.object),
                       "version": self.object_version},
            "line": render_alarm(self),
        }


_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def format_ts(ts_ms: int) -> str:
    t = _EPOCH + timedelta(milliseconds=ts_ms)
    return f"{t:%y-%m-%d %H:%M:%S}.{ts_ms % 1000:03d}"


def render_alarm(a: Alarm) -> str:
    return (f"{format_ts(a.ts)}: Alarm: {a.policy.value}: Object {a.object_name} "
            f"Subject pid={a.subject_pid} {a.subject_image}")


_LINE = re.compile(
    r"^(\d\d-\d\d-\d\d \d\d:\d\d:\d\d\.\d{3}): Alarm: (\w+): Object (.*) Subject pid=(\d+) (.*)$", re.S)


@dataclass(frozen=True)
class AlarmLine:
    """Fields recoverable from a rendered alarm line."""

    stamp: str
    policy: Policy
    object_name: str
    pid: int
    image: str


def parse_alarm_line(line: str) -> AlarmLine:
    m = _LINE.match(line.rstrip("\n"))
    if m is None or m.group(2) not in POLICY_NAMES:
        raise ValueError(f"not an alarm line: {line!r}")
    return AlarmLine(m.group(1), POLICY_NAMES[m.group(2)], m.group(3), int(m.group(4)), m.group(5))


def grants_execute(perms: Any) -> bool:
    """True when a chmod permission attribute adds an execute bit."""
    if isinstance(perms, bool):
        return False
    if isinstance(perms, int):
        return bool(perms & 0o111)
    if isinstance(perms, str):
        p = perms.strip()
        if p and all(c in "01234567" for c in p):
            return bool(int(p, 8) & 0o111)
        for op in "+=":
            if op in p and "x" in p.split(op, 1)[1]:
                return True
    return False


class PolicyEngine:
    """Stateful evaluator; call :meth:`evaluate` once per applied event in seq order."""

    def __init__(self, graph: ProvenanceGraph, config: Optional[DetectionConfig] = None) -> None:
        self.graph = graph
        self.config = config or DetectionConfig()
        self.alarms: list[Alarm] = []
        self._seen: set[tuple] = set()
        self._last_write: dict[int, int] = {}
        self._event_no = 0
        self._classes: dict[int, dict[Policy, Alarm]] = {}
        self.escalated: dict[int, int] = {}
        self._masks: dict[int, int] = {}
        self._enabled_mask = sum(_BIT[p] for p in self.config.enabled)

    def _mask(self, kind: EventKind, s: int, o: int, netflow: bool) -> int:
        """Candidate policy bits decided by tags alone (memoized)."""
        key = ((kind * PACKED_STATES + s) * PACKED_STATES + o) * 2 + netflow
        m = self._masks.get(key)
        if m is None:
            m = self._masks[key] = self._compute_mask(kind, s, o, netflow) & self._enabled_mask
        return m

    def _compute_mask(self, kind: EventKind, s: int, o: int, netflow: bool) -> int:
        cfg = self.config
        ns, no = propagate_packed(kind, s, o)
        st, ot, nst, nout = (TagState.unpack(x) for x in (s, o, ns, no))
        floor = cfg.downgrade_floor
        m = 0
        if kind in CODE_LOADS:
            if st.code_int is not _IL.WHITELIST:
                m |= _WTE
            if ot.integrity <= _IL.UNTRUSTED and st.code_int >= _IL.BENIGN:
                m |= _UL
        if kind in _OBJECT_DOWNGRADE:
            if ot.integrity >= floor and nout.integrity <= _IL.UNTRUSTED:
                m |= _DG
            if netflow and st.conf >= cfg.leak_conf_threshold and nout.integrity <= _IL.UNTRUSTED:
                m |= _CLK
        if kind in DATA_READS:
            if (st.code_int not in _EXEC_SAFE and st.integrity >= floor
                    and nst.integrity <= _IL.UNTRUSTED):
                m |= _DG
            if st.code_int <= _IL.UNTRUSTED and ot.conf >= cfg.leak_conf_threshold:
                m |= _CLK
        if kind is EventKind.CHMOD and ot.integrity <= _IL.UNTRUSTED:
            m |= _PC
        return m

    def evaluate(self, out: ApplyOutcome) -> list[Alarm]:
        e, subject, other, subject_before, _, other_before, _ = out
        kind = e.kind
        self._event_no += 1
        a = self.graph._arena
        vtags = a.ver_tags
        key = ((kind * PACKED_STATES + vtags[subject_before]) * PACKED_STATES
               + vtags[other_before]) * 2 + (a.ent_kind[other] == _NETFLOW)
        m = self._masks.get(key)
        if m is None:
            m = self._mask(kind, vtags[subject_before], vtags[other_before], a.ent_kind[other] == _NETFLOW)
        if kind in _WRITE_MARKS:
            self._last_write[other] = self._event_no
        if not m:
            return []
        found = []
        if m & _UL:
            found.append(Policy.UNTRUSTED_LOAD)
        if m & _WTE:
            w = self._last_write.get(other)
            if w is not None and self._event_no - w <= self.config.written_exec_window:
                found.append(Policy.WRITTEN_THEN_EXEC)
        if m & _DG:
            found.append(Policy.DOWNGRADE)
        if m & _CLK:
            found.append(Policy.CONF_LEAK)
        if m & _PC and grants_execute(e.attrs.get("perms", e.attrs.get("mode"))):
            found.append(Policy.PERMISSION_CHANGE)
        alarms = []
        for p in found:
            key = (p, subject, other, out.subject_after, out.other_after)
            if key in self._seen:
                continue
            self._seen.add(key)
            alarms.append(self._alarm(p, out))
        self.alarms.extend(alarms)
        if alarms and self.config.escalation_classes:
            self._escalate(out, alarms)
        return alarms

    def _alarm(self, p: Policy, out: ApplyOutcome) -> Alarm:
        g = self.graph
        e = out.event
        a = g._arena
        ctx = g.contexts
        sv = out.subject_before
        ov = out.other_before
        return Alarm(
            ts=e.ts,
            policy=p,
            subject_pid=g.pid(sv),
            subject_image=a.strings[a.ver_name[sv]],
            subject=a.ids[out.subject],
            subject_version=a.ver_no[sv],
            object_name=g.display_name(ov),
            object=a.ids[out.other],
            object_version=a.ver_no[ov],
            trigger_seq=e.seq,
            subject_index=out.subject_after,
            object_index=out.other_after,
            subject_context=ctx.head(out.subject),
            object_context=ctx.head(out.other),
        )

    def _escalate(self, out: ApplyOutcome, alarms: list[Alarm]) -> None:
        s = out.subject
        if s in self.escalated:
            return
        classes = self._classes.setdefault(s, {})
        for a in alarms:
            classes.setdefault(a.policy, a)
        if len(classes) < self.config.escalation_classes:
            return
        g = self.graph
        g.contexts.absorb(s, [a.object_context for a in classes.values()])
        conf = TagState.unpack(g._arena.ver_tags[g.head_index(s)]).conf
        self.escalated[s] = out.event.seq
        g.escalate(s, TagState(_IL.MALICIOUS, _IL.MALICIOUS, conf), out.event.seq)


def alarm_to_json(a: Alarm) -> bytes:
    return orjson.dumps(a.to_dict())
