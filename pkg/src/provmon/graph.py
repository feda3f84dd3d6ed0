"""Compact versioned main-memory provenance graph.

All state lives in append-only ``array`` columns so that resident size stays
proportional to unique entity versions plus retained edges. A node version is
immutable once created; an event that changes an endpoint's tags appends a
new version rather than editing the old one, so flows from different sources
are never conflated.
"""

from __future__ import annotations

from array import array
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

from .context import ContextStore
from .events import (
    FLOW,
    MISSING_IP,
    EntityDescriptor,
    EntityId,
    EntityKind,
    EventKind,
    EventRecord,
    Flow,
    NetflowDescriptor,
    SubjectDescriptor,
)
from .tags import TagPolicyConfig, TagState, initial_tags, propagate_packed

# Resident bytes per arena row (uuid, kind, head, parent / entity, number, tags,
# created_by, name, num, flags / seq, kind, src, dst).
ENTITY_BYTES = 16 + 1 + 4 + 4
VERSION_BYTES = 4 + 4 + 1 + 8 + 4 + 4 + 1
EDGE_BYTES = 8 + 1 + 4 + 4

_NO_SEQ = -1
_FLOW = [FLOW[k] for k in EventKind]
_INTO = Flow.INTO_SUBJECT
_FORK = EventKind.FORK
_EXEC = EventKind.EXEC


class UnknownEntity(KeyError):
    """An event referenced an entity the graph has never seen (ingest bug)."""


@dataclass(frozen=True)
class NodeVersion:
    entity: EntityId
    version: int
    tags: TagState
    created_by: Optional[int]
    name: str
    index: int


class GraphEdge(NamedTuple):
    seq: int
    kind: EventKind
    src: NodeVersion
    dst: NodeVersion


@dataclass(frozen=True)
class GraphStats:
    entities: int = 0
    versions: int = 0
    edges: int = 0
    retained_events: int = 0
    approx_bytes: int = 0


class ApplyOutcome(NamedTuple):
    """Version indices touched by one event.

    ``other`` is the object (or the child, for fork). ``*_before`` and
    ``*_after`` differ exactly when the event created a new version.
    """

    event: EventRecord
    subject: int
    other: int
    subject_before: int
    subject_after: int
    other_before: int
    other_after: int

    @property
    def new_versions(self) -> list[int]:
        out = []
        if self.subject_after != self.subject_before:
            out.append(self.subject_after)
        if self.other_after != self.other_before:
            out.append(self.other_after)
        return out


class _Arena:
    def __init__(self) -> None:
        self.ids: list[EntityId] = []
        self.ent_kind = array("B")
        self.ent_head = array("I")
        self.ent_parent = array("i")
        self.ver_entity = array("I")
        self.ver_no = array("I")
        self.ver_tags = array("B")
        self.ver_created = array("q")
        self.ver_name = array("I")
        self.ver_num = array("i")
        self.ver_flags = array("B")
        self.edge_seq = array("q")
        self.edge_kind = array("B")
        self.edge_src = array("I")
        self.edge_dst = array("I")
        self.strings: list[str] = []
        self.string_ix: dict[str, int] = {}
        self.string_bytes = 0

    def intern(self, s: str) -> int:
        ix = self.string_ix.get(s)
        if ix is None:
            ix = self.string_ix[s] = len(self.strings)
            self.strings.append(s)
            self.string_bytes += len(s.encode("utf-8", "surrogatepass"))
        return ix


class GraphReader:
    """Read API shared by the live graph and its snapshots."""

    _arena: _Arena

    def _limits(self) -> tuple[int, int, int, int]:
        raise NotImplementedError

    def _head_of(self, entity: int) -> int:
        raise NotImplementedError

    def stats(self) -> GraphStats:
        n_ent, n_ver, n_edge, string_bytes = self._limits()
        approx = ENTITY_BYTES * n_ent + VERSION_BYTES * n_ver + EDGE_BYTES * n_edge + string_bytes
        return GraphStats(n_ent, n_ver, n_edge, n_edge, approx)

    def entity_index(self, eid: EntityId) -> int:
        ix = self._index_get(eid)
        if ix is None:
            raise UnknownEntity(eid)
        return ix

    def _index_get(self, eid: EntityId) -> Optional[int]:
        raise NotImplementedError

    def __contains__(self, eid: object) -> bool:
        return self._index_get(eid) is not None  # type: ignore[arg-type]

    def entity_id(self, entity: int) -> EntityId:
        return self._arena.ids[entity]

    def entity_kind(self, entity: int) -> EntityKind:
        return EntityKind(self._arena.ent_kind[entity])

    def head_index(self, entity: int) -> int:
        return self._head_of(entity)

    def head(self, eid: EntityId) -> NodeVersion:
        return self.version(self._head_of(self.entity_index(eid)))

    def tags(self, eid: EntityId) -> TagState:
        return TagState.unpack(self._arena.ver_tags[self._head_of(self.entity_index(eid))])

    def version(self, ix: int) -> NodeVersion:
        a = self._arena
        if ix >= self._limits()[1]:
            raise IndexError(ix)
        created = a.ver_created[ix]
        return NodeVersion(
            entity=a.ids[a.ver_entity[ix]],
            version=a.ver_no[ix],
            tags=TagState.unpack(a.ver_tags[ix]),
            created_by=None if created == _NO_SEQ else created,
            name=self.display_name(ix),
            index=ix,
        )

    def versions_of(self, eid: EntityId) -> list[NodeVersion]:
        ent = self.entity_index(eid)
        a = self._arena
        n_ver = self._limits()[1]
        return [self.version(i) for i in range(n_ver) if a.ver_entity[i] == ent]

    def version_entity(self, ix: int) -> int:
        return self._arena.ver_entity[ix]

    def display_name(self, ix: int) -> str:
        a = self._arena
        ent = a.ver_entity[ix]
        name = a.strings[a.ver_name[ix]]
        kind = a.ent_kind[ent]
        if kind == EntityKind.NETFLOW:
            return f"{name or MISSING_IP}:{a.ver_num[ix]}"
        if kind == EntityKind.SUBJECT or kind == EntityKind.FILE:
            return name
        return name or f"{EntityKind(kind).label}:{a.ids[ent].uuid[:8]}"

    def pid(self, ix: int) -> int:
        return self._arena.ver_num[ix]

    def missing_ip(self, ix: int) -> bool:
        return bool(self._arena.ver_flags[ix])

    def edge(self, i: int) -> GraphEdge:
        a = self._arena
        return GraphEdge(a.edge_seq[i], EventKind(a.edge_kind[i]),
                         self.version(a.edge_src[i]), self.version(a.edge_dst[i]))

    def edges(self) -> Iterator[GraphEdge]:
        for i in range(self._limits()[2]):
            yield self.edge(i)

    def entity_count(self) -> int:
        return self._limits()[0]


class ProvenanceGraph(GraphReader):
    """Single-writer provenance graph. Not safe for concurrent mutation."""

    def __init__(self, tag_config: Optional[TagPolicyConfig] = None,
                 contexts: Optional[ContextStore] = None) -> None:
        self.config = tag_config if tag_config is not None else TagPolicyConfig()
        self.contexts = contexts if contexts is not None else ContextStore()
        self._arena = _Arena()
        self._index: dict[EntityId, int] = {}

    def _limits(self) -> tuple[int, int, int, int]:
        a = self._arena
        return len(a.ids), len(a.ver_entity), len(a.edge_seq), a.string_bytes

    def _head_of(self, entity: int) -> int:
        return self._arena.ent_head[entity]

    def _index_get(self, eid: EntityId) -> Optional[int]:
        return self._index.get(eid)

    @staticmethod
    def _payload(d: EntityDescriptor) -> tuple[str, int, int]:
        if isinstance(d, SubjectDescriptor):
            return d.image, d.pid, 0
        if isinstance(d, NetflowDescriptor):
            return d.remote_ip, d.remote_port, int(d.missing_ip)
        return d.name if d.id.kind != EntityKind.FILE else d.path, 0, 0

    def upsert_entity(self, d: EntityDescriptor) -> NodeVersion:
        """Intern a descriptor.

        First sight creates version 0; an identical re-definition returns the
        current version; a changed payload appends a version that keeps the
        current tags.
        """
        a = self._arena
        name, num, flags = self._payload(d)
        name_ix = a.intern(name)
        ent = self._index.get(d.id)
        if ent is not None:
            head = a.ent_head[ent]
            if a.ver_name[head] == name_ix and a.ver_num[head] == num and a.ver_flags[head] == flags:
                return self.version(head)
            return self.version(self._new_version(ent, head, a.ver_tags[head], _NO_SEQ, name_ix, num, flags))
        ent = len(a.ids)
        self._index[d.id] = ent
        a.ids.append(d.id)
        a.ent_kind.append(d.id.kind)
        self.contexts.add_entity()
        parent = -1
        tags = None
        if isinstance(d, SubjectDescriptor) and d.parent is not None:
            parent = self._index.get(d.parent, -1)
            if parent >= 0:
                tags = a.ver_tags[a.ent_head[parent]]
                self.contexts.inherit(ent, parent)
        if tags is None:
            tags = initial_tags(d, self.config).pack()
        a.ent_parent.append(parent)
        ix = len(a.ver_entity)
        a.ent_head.append(ix)
        a.ver_entity.append(ent)
        a.ver_no.append(0)
        a.ver_tags.append(tags)
        a.ver_created.append(_NO_SEQ)
        a.ver_name.append(name_ix)
        a.ver_num.append(num)
        a.ver_flags.append(flags)
        return self.version(ix)

    def _new_version(self, ent: int, prev: int, tags: int, seq: int,
                     name_ix: Optional[int] = None, num: Optional[int] = None,
                     flags: Optional[int] = None) -> int:
        a = self._arena
        ix = len(a.ver_entity)
        a.ver_entity.append(ent)
        a.ver_no.append(a.ver_no[prev] + 1)
        a.ver_tags.append(tags)
        a.ver_created.append(seq)
        a.ver_name.append(a.ver_name[prev] if name_ix is None else name_ix)
        a.ver_num.append(a.ver_num[prev] if num is None else num)
        a.ver_flags.append(a.ver_flags[prev] if flags is None else flags)
        a.ent_head[ent] = ix
        return ix

    def apply_event(self, e: EventRecord) -> ApplyOutcome:
        """Propagate tags for one event, version changed endpoints, append the edge."""
        index = self._index
        s = index.get(e.subject)
        if s is None:
            raise UnknownEntity(e.subject)
        kind = e.kind
        other = e.object2 if kind is _FORK else e.object
        o = index.get(other) if other is not None else None
        if o is None:
            raise UnknownEntity(other)
        a = self._arena
        head = a.ent_head
        vtags = a.ver_tags
        sv = head[s]
        ov = head[o]
        st = vtags[sv]
        ot = vtags[ov]
        nst, not_ = propagate_packed(kind, st, ot)
        seq = e.seq
        nsv = sv if nst == st else self._new_version(s, sv, nst, seq)
        nov = ov if not_ == ot else self._new_version(o, ov, not_, seq)
        if kind is _EXEC:
            image = e.attrs.get("exe")
            name_ix = a.ver_name[ov] if not image or type(image) is not str else a.intern(image)
            if name_ix != a.ver_name[nsv]:
                if nsv == sv:
                    nsv = self._new_version(s, sv, nst, seq, name_ix)
                else:
                    a.ver_name[nsv] = name_ix
        if _FLOW[kind] is _INTO:
            src, dst, dst_ent, src_ent = nov, nsv, s, o
        else:
            src, dst, dst_ent, src_ent = nsv, nov, o, s
        a.edge_seq.append(seq)
        a.edge_kind.append(kind)
        a.edge_src.append(src)
        a.edge_dst.append(dst)
        # Inline ContextStore.record: this runs once per event.
        ctx = self.contexts
        cseq = ctx._seq
        chead = ctx._head
        left = chead[dst_ent]
        right = chead[src_ent]
        cseq.append(seq)
        ctx._left.append(left)
        ctx._right.append(-1 if right == left else right)
        chead[dst_ent] = len(cseq) - 1
        return ApplyOutcome(e, s, o, sv, nsv, ov, nov)

    def escalate(self, entity: int, tags: TagState, seq: int) -> int:
        """Replace a subject's tags by policy decision (only ever lowers them)."""
        a = self._arena
        head = a.ent_head[entity]
        packed = tags.pack()
        if a.ver_tags[head] == packed:
            return head
        return self._new_version(entity, head, packed, seq)

    def snapshot(self) -> "GraphSnapshot":
        return GraphSnapshot(self)


class GraphSnapshot(GraphReader):
    """Read-only view frozen at creation time; later events do not show through."""

    def __init__(self, graph: ProvenanceGraph) -> None:
        self._arena = graph._arena
        self._frozen = graph._limits()
        self._heads = array("I", graph._arena.ent_head)
        self._index = dict(graph._index)
        self.contexts = graph.contexts
        self.context_heads = graph.contexts.heads()
        self.context_nodes = len(graph.contexts)
        self.config = graph.config

    def _limits(self) -> tuple[int, int, int, int]:
        return self._frozen

    def _head_of(self, entity: int) -> int:
        return self._heads[entity]

    def _index_get(self, eid: EntityId) -> Optional[int]:
        return self._index.get(eid)
