"""Reference implementations used to cross-check the incremental engine.

These are deliberately naive: plain dicts keyed by entity id, full rescans,
no packing or memoization.
"""

from __future__ import annotations

import re

from provmon.events import EntityKind, EventKind, EventRecord, SubjectDescriptor
from provmon.graph import ProvenanceGraph
from provmon.tags import TagPolicyConfig, initial_tags

WL = 5
READS = {"read", "recv", "pipe_read"}
LOADS = {"exec", "load", "mmap_exec"}
WRITES = {"write", "send", "create", "pipe_write"}


class NaiveTags:
    """Tags as mutable [code, data, conf] lists per entity id."""

    def __init__(self, cfg: TagPolicyConfig | None = None) -> None:
        self.cfg = cfg or TagPolicyConfig()
        self.tags: dict = {}

    def define(self, d) -> None:
        if d.id in self.tags:
            return
        if isinstance(d, SubjectDescriptor) and d.parent in self.tags:
            self.tags[d.id] = list(self.tags[d.parent])
        else:
            self.tags[d.id] = [int(x) for x in initial_tags(d, self.cfg)]

    def apply(self, e: EventRecord) -> None:
        s = self.tags[e.subject]
        name = e.kind.label
        if name == "fork":
            c = self.tags[e.object2]
            c[0] = min(c[0], s[0])
            c[1] = min(c[1], s[1])
            c[2] = max(c[2], s[2])
            return
        o = self.tags[e.object]
        if s[0] == WL:
            return
        o_int = min(o[0], o[1])
        if name in READS or name in LOADS:
            s[1] = min(s[1], o_int)
            s[2] = max(s[2], o[2])
            if name in LOADS:
                s[0] = min(s[0], o_int)
        elif name in WRITES:
            level = min(o_int, s[0], s[1])
            o[0] = o[1] = level
            o[2] = max(o[2], s[2])

    def feed(self, records) -> None:
        for r in records:
            if type(r) is EventRecord:
                self.apply(r)
            else:
                self.define(r)


def graph_tags(g: ProvenanceGraph, eid) -> list[int]:
    return [int(x) for x in g.tags(eid)]


def replay(records, keep: set[int]) -> ProvenanceGraph:
    """Fresh graph fed every definition but only the events whose seq is in ``keep``."""
    g = ProvenanceGraph()
    for r in records:
        if type(r) is EventRecord:
            if r.seq in keep:
                g.apply_event(r)
        else:
            g.upsert_entity(r)
    return g


def written_then_exec_count(events: list[EventRecord], window: float = float("inf")) -> int:
    """Quadratic scan: code loads with a write/create of the same object at
    most ``window`` events earlier."""
    n = 0
    for i, e in enumerate(events):
        if e.kind.label not in LOADS:
            continue
        for j in range(i - 1, -1, -1):
            w = events[j]
            if w.object == e.object and w.kind.label in ("write", "create"):
                if i - j <= window:
                    n += 1
                break
    return n


# Minimal dot grammar: the subset of the language a digraph export may use.

_ID = r'(?:[A-Za-z_][A-Za-z_0-9]*|-?(?:\.[0-9]+|[0-9]+(?:\.[0-9]*)?)|"(?:[^"\\]|\\.)*")'
_ATTR = rf"{_ID}\s*=\s*{_ID}"
_ATTR_LIST = rf"\[\s*(?:{_ATTR}(?:\s*[,;]?\s*{_ATTR})*)?\s*\]"
_STMT = [
    re.compile(rf"{_ATTR}\s*;?"),
    re.compile(rf"(?:graph|node|edge)\s*{_ATTR_LIST}\s*;?"),
    re.compile(rf"{_ID}\s*(?:{_ATTR_LIST})?\s*;?"),
    re.compile(rf"{_ID}\s*->\s*{_ID}(?:\s*->\s*{_ID})*\s*(?:{_ATTR_LIST})?\s*;?"),
]
_HEADER = re.compile(rf"(?:strict\s+)?digraph\s*(?:{_ID})?\s*\{{")


def check_dot(text: str) -> dict:
    """Validate a line-per-statement digraph; returns {node id: attrs}.

    Raises ValueError on any statement outside the grammar, unbalanced
    braces, or an edge endpoint without a node statement.
    """
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or not _HEADER.fullmatch(lines[0]) or lines[-1] != "}":
        raise ValueError("not a digraph block")
    nodes: dict[str, dict] = {}
    edges = []
    for ln in lines[1:-1]:
        if not any(rx.fullmatch(ln) for rx in _STMT):
            raise ValueError(f"bad statement: {ln!r}")
        if "->" in ln.split("[", 1)[0]:
            ends = [p.strip() for p in ln.split("[", 1)[0].rstrip(";").split("->")]
            edges.append(ends)
        elif "[" in ln:
            nid, rest = ln.split("[", 1)
            attrs = dict(re.findall(rf"({_ID})\s*=\s*({_ID})", rest))
            nodes[nid.strip()] = {k: v.strip('"') for k, v in attrs.items()}
    for ends in edges:
        for n in ends:
            if n not in nodes:
                raise ValueError(f"edge endpoint {n} has no node statement")
    bare = re.sub(r'"(?:[^"\\]|\\.)*"', '""', text)
    if bare.count("{") != bare.count("}"):
        raise ValueError("unbalanced braces")
    return nodes


SHAPES = {EntityKind.SUBJECT: "oval", EntityKind.FILE: "box", EntityKind.NETFLOW: "diamond"}


def event_kind(label: str) -> EventKind:
    return EventKind[label.upper()]
