"""Attack reconstruction from alarms.

Two mechanisms feed an attack subgraph: the forward-propagated provenance
context captured when the alarm fired (what led up to it), and a taint
traversal over later edges starting at the alarm subject (what it did next,
including its descendants and anything that consumed what it wrote). A filter
policy tunes out routine activity before the result is written as dot.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .context import EMPTY, ContextStore, ProvenanceContext
from .events import EntityKind, EventKind
from .graph import GraphEdge, GraphReader, NodeVersion, ProvenanceGraph
from .ingest import IoError
from .policy import Alarm
from .tags import ConfidentialityLevel, ConfigError, IntegrityLevel, TagState

__all__ = [
    "AttackSubgraph", "CapExceeded", "ContextStore", "EdgeIndex", "FilterPolicy",
    "ProvenanceContext", "dot_filename", "export_dot", "forward_analysis", "record_context",
    "render_dot",
]

_TAINTING = frozenset({EventKind.WRITE, EventKind.SEND, EventKind.CREATE,
                       EventKind.PIPE_WRITE, EventKind.FORK})
_CONSUMING = frozenset({EventKind.READ, EventKind.RECV, EventKind.PIPE_READ,
                        EventKind.EXEC, EventKind.LOAD, EventKind.MMAP_EXEC})


class CapExceeded(RuntimeError):
    def __init__(self, partial: "AttackSubgraph") -> None:
        super().__init__(f"attack subgraph exceeded {len(partial.events)} events")
        self.partial = partial


def record_context(graph: ProvenanceGraph, seq: int, dst_entity: int, src_entity: int) -> int:
    """context(dst) := context(dst) | context(src) | {seq}; returns the new node."""
    return graph.contexts.record(seq, dst_entity, src_entity)


@dataclass(frozen=True)
class FilterPolicy:
    suppress_kinds: frozenset = frozenset({EventKind.READ, EventKind.LOAD})
    suppress_min_integrity: IntegrityLevel = IntegrityLevel.BENIGN_AUTH
    suppress_max_conf: ConfidentialityLevel = ConfidentialityLevel.PRIVATE
    drop_whitelist_subjects: bool = True
    max_events: int = 10_000

    def __post_init__(self) -> None:
        kinds = set()
        for k in self.suppress_kinds:
            if isinstance(k, EventKind):
                kinds.add(k)
            elif isinstance(k, str) and k.upper() in EventKind.__members__:
                kinds.add(EventKind[k.upper()])
            else:
                raise ConfigError(f"unknown event kind {k!r}")
        object.__setattr__(self, "suppress_kinds", frozenset(kinds))
        for name, enum in (("suppress_min_integrity", IntegrityLevel),
                           ("suppress_max_conf", ConfidentialityLevel)):
            v = getattr(self, name)
            if not isinstance(v, enum):
                try:
                    v = enum[str(v).upper()]
                except KeyError:
                    raise ConfigError(f"{name}: unknown level {v!r}") from None
                object.__setattr__(self, name, v)
        if type(self.max_events) is not int or self.max_events < 1:
            raise ConfigError("max_events must be a positive integer")

    @classmethod
    def from_dict(cls, data: dict) -> "FilterPolicy":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown filter keys: {sorted(unknown)}")
        data = dict(data)
        if "suppress_kinds" in data:
            data["suppress_kinds"] = frozenset(data["suppress_kinds"])
        return cls(**data)

    def suppresses(self, kind: EventKind, subj: TagState, obj: TagState) -> bool:
        if self.drop_whitelist_subjects and subj.code_int == IntegrityLevel.WHITELIST:
            return True
        return (kind in self.suppress_kinds and obj.integrity >= self.suppress_min_integrity
                and obj.conf <= self.suppress_max_conf)


@dataclass
class AttackSubgraph:
    alarm: Alarm
    events: list = field(default_factory=list)
    nodes: list = field(default_factory=list)
    partial: bool = False
    view: Optional[GraphReader] = field(default=None, repr=False, compare=False)

    @property
    def seqs(self) -> list[int]:
        return [e.seq for e in self.events]


def _column(arr, n: int, dtype) -> np.ndarray:
    # Slicing copies, so the live arena stays resizable.
    return np.frombuffer(arr[:n], dtype=dtype)


class EdgeIndex:
    """Per-entity edge lists over a frozen graph view, sorted by seq."""

    def __init__(self, view: GraphReader) -> None:
        a = view._arena
        n_ent, n_ver, n_edge, _ = view._limits()
        self.view = view
        self.n_edges = n_edge
        ver_entity = _column(a.ver_entity, n_ver, np.uint32)
        self.seq = _column(a.edge_seq, n_edge, np.int64)
        self.kind = _column(a.edge_kind, n_edge, np.uint8)
        self.src = _column(a.edge_src, n_edge, np.uint32)
        self.dst = _column(a.edge_dst, n_edge, np.uint32)
        self.ver_tags = _column(a.ver_tags, n_ver, np.uint8)
        src_ent = ver_entity[self.src]
        dst_ent = ver_entity[self.dst]
        self.src_ent = src_ent
        self.dst_ent = dst_ent
        self._by_src = np.argsort(src_ent, kind="stable")
        self._by_dst = np.argsort(dst_ent, kind="stable")
        self._src_sorted = src_ent[self._by_src]
        self._dst_sorted = dst_ent[self._by_dst]
        self.n_entities = n_ent

    def edge_at_seq(self, seq: int) -> int:
        i = int(np.searchsorted(self.seq, seq))
        if i >= self.n_edges or self.seq[i] != seq:
            return -1
        return i

    def _slice(self, order: np.ndarray, keys: np.ndarray, entity: int, start: int) -> np.ndarray:
        lo = int(np.searchsorted(keys, entity, side="left"))
        hi = int(np.searchsorted(keys, entity, side="right"))
        edges = order[lo:hi]
        return edges[int(np.searchsorted(edges, start)):]

    def out_edges(self, entity: int, start: int) -> np.ndarray:
        return self._slice(self._by_src, self._src_sorted, entity, start)

    def in_edges(self, entity: int, start: int) -> np.ndarray:
        return self._slice(self._by_dst, self._dst_sorted, entity, start)


def _edge_tags(ix: EdgeIndex, i: int) -> tuple[TagState, TagState]:
    """(subject tags, object tags) at edge ``i``; fork reports the parent as subject."""
    src = TagState.unpack(int(ix.ver_tags[ix.src[i]]))
    dst = TagState.unpack(int(ix.ver_tags[ix.dst[i]]))
    kind = int(ix.kind[i])
    if kind == EventKind.FORK:
        return src, dst
    if kind in _CONSUMING or kind == EventKind.ACCEPT:
        return dst, src
    return src, dst


def forward_analysis(alarm: Alarm, view: Union[GraphReader, EdgeIndex],
                     fp: Optional[FilterPolicy] = None, strict: bool = False) -> AttackSubgraph:
    """Taint traversal from the alarm subject over edges at or after the trigger.

    A tainted subject contributes all of its later actions; its writes, sends
    and forks taint their targets, and a tainted object taints subjects that
    later consume it. The captured contexts of the alarm's subject and object
    are added as backward explanation. The trigger event is never filtered.
    """
    fp = fp or FilterPolicy()
    ix = view if isinstance(view, EdgeIndex) else EdgeIndex(view)
    g = ix.view
    trigger = ix.edge_at_seq(alarm.trigger_seq)
    if trigger < 0:
        raise KeyError(f"trigger seq {alarm.trigger_seq} not in graph view")
    subject = g.entity_index(alarm.subject)
    keep: set[int] = {trigger}
    partial = False
    cap = fp.max_events

    def admit(i: int) -> bool:
        nonlocal partial
        if i in keep:
            return True
        s, o = _edge_tags(ix, i)
        if fp.suppresses(EventKind(int(ix.kind[i])), s, o):
            return False
        if len(keep) >= cap:
            partial = True
            return False
        keep.add(i)
        return True

    tainted: dict[int, int] = {subject: trigger}
    heap = [(trigger, subject)]
    while heap and not partial:
        t, ent = heapq.heappop(heap)
        if tainted.get(ent, -1) != t:
            continue
        if g.entity_kind(ent) == EntityKind.SUBJECT:
            if fp.drop_whitelist_subjects and ent != subject:
                tags = TagState.unpack(int(ix.ver_tags[g.head_index(ent)]))
                if tags.code_int == IntegrityLevel.WHITELIST:
                    continue
            for i in ix.in_edges(ent, t).tolist():
                admit(i)
            for i in ix.out_edges(ent, t).tolist():
                if not admit(i):
                    continue
                if int(ix.kind[i]) in _TAINTING:
                    tgt = int(ix.dst_ent[i])
                    if i < tainted.get(tgt, ix.n_edges):
                        tainted[tgt] = i
                        heapq.heappush(heap, (i, tgt))
        else:
            for i in ix.out_edges(ent, t).tolist():
                if int(ix.kind[i]) not in _CONSUMING:
                    continue
                if not admit(i):
                    continue
                tgt = int(ix.dst_ent[i])
                if i < tainted.get(tgt, ix.n_edges):
                    tainted[tgt] = i
                    heapq.heappush(heap, (i, tgt))
    store = g.contexts
    for node in (alarm.subject_context, alarm.object_context):
        if partial or node == EMPTY:
            continue
        for seq in store.events(node):
            i = ix.edge_at_seq(seq)
            if i >= 0 and i < ix.n_edges:
                admit(i)
    return _assemble(alarm, ix, keep, partial, strict)


def _assemble(alarm: Alarm, ix: EdgeIndex, keep: set[int], partial: bool, strict: bool) -> AttackSubgraph:
    g = ix.view
    events: list[GraphEdge] = []
    nodes: dict[int, NodeVersion] = {}
    for i in sorted(keep):
        e = g.edge(i)
        events.append(e)
        nodes.setdefault(e.src.index, e.src)
        nodes.setdefault(e.dst.index, e.dst)
    sg = AttackSubgraph(alarm, events, list(nodes.values()), partial, g)
    if partial and strict:
        raise CapExceeded(sg)
    return sg


_SHAPES = {
    EntityKind.SUBJECT: "oval",
    EntityKind.FILE: "box",
    EntityKind.NETFLOW: "diamond",
}


def node_shape(kind: EntityKind) -> str:
    return _SHAPES.get(kind, "parallelogram")


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\r", "") + '"'


def _node_id(n: NodeVersion, g: GraphReader) -> str:
    return f"e{g.entity_index(n.entity)}v{n.version}"


def _label(n: NodeVersion, g: GraphReader) -> str:
    if n.entity.kind == EntityKind.SUBJECT:
        pid = g.pid(n.index)
        return f"{n.name} ({pid})" if n.name else f"pid {pid}"
    return n.name or str(n.entity)


def render_dot(sg: AttackSubgraph, view: GraphReader) -> str:
    """Deterministic dot text; nodes appear in order of first use."""
    if not sg.events:
        raise ValueError("empty attack subgraph")
    a = sg.alarm
    lines = [f"digraph {_quote(f'{a.trigger_seq} {a.policy.value}')} {{",
             "  rankdir=LR;",
             f"  label={_quote(f'{a.policy.value}: {a.object_name}')};"]
    seen: set[str] = set()
    body: list[str] = []
    for k, e in enumerate(sg.events, 1):
        ids = []
        for n in (e.src, e.dst):
            nid = _node_id(n, view)
            ids.append(nid)
            if nid not in seen:
                seen.add(nid)
                lines.append(f"  {nid} [label={_quote(_label(n, view))}, shape={node_shape(n.entity.kind)}];")
        body.append(f"  {ids[0]} -> {ids[1]} [label={_quote(f'{k}. {e.kind.label}')}];")
    lines.extend(body)
    lines.append("}")
    return "\n".join(lines) + "\n"


def dot_filename(alarm: Alarm) -> str:
    return f"{alarm.trigger_seq}_{alarm.policy.value}.dot"


def export_dot(sg: AttackSubgraph, out: Union[str, Path], view: Optional[GraphReader] = None) -> int:
    """Write the subgraph as dot. ``out`` may be a directory, in which case the
    conventional per-alarm file name is used. Returns the byte count."""
    view = view or sg.view
    if view is None:
        raise ValueError("a graph view is required to label nodes")
    text = render_dot(sg, view).encode("utf-8")
    path = Path(out)
    if path.is_dir():
        path = path / dot_filename(sg.alarm)
    try:
        with open(path, "wb") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(exc.errno, f"cannot write dot file: {exc.strerror}", str(path)) from None
    return len(text)


def union_size(subgraphs: Iterable[AttackSubgraph]) -> int:
    """Distinct events across several subgraphs."""
    seqs: set[int] = set()
    for sg in subgraphs:
        seqs.update(e.seq for e in sg.events)
    return len(seqs)
