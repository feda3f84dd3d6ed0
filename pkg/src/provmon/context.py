"""Persistent provenance contexts with structural sharing.

A context is a node in an append-only DAG. Each node holds one event ordinal
(or -1 for a pure merge) and up to two parent nodes; the context's event set
is everything reachable from it. Recording a flow A->B costs one node, so the
total size is linear in the number of events however many entities share a
history.
"""

from __future__ import annotations

from array import array
from typing import Iterable, Iterator

EMPTY = -1


class ContextStore:
    def __init__(self) -> None:
        self._seq = array("q")
        self._left = array("i")
        self._right = array("i")
        self._head = array("i")
        self._merges: dict[tuple[int, int], int] = {}

    def __len__(self) -> int:
        return len(self._seq)

    @property
    def approx_bytes(self) -> int:
        return 16 * len(self._seq) + 4 * len(self._head)

    def add_entity(self) -> int:
        self._head.append(EMPTY)
        return len(self._head) - 1

    def head(self, entity: int) -> int:
        return self._head[entity]

    def heads(self) -> array:
        return array("i", self._head)

    def _node(self, seq: int, left: int, right: int) -> int:
        self._seq.append(seq)
        self._left.append(left)
        self._right.append(right)
        return len(self._seq) - 1

    def merge(self, a: int, b: int) -> int:
        """Hash-consed union of two contexts."""
        if a == b or b == EMPTY:
            return a
        if a == EMPTY:
            return b
        key = (a, b) if a < b else (b, a)
        node = self._merges.get(key)
        if node is None:
            node = self._merges[key] = self._node(EMPTY, key[0], key[1])
        return node

    def record(self, seq: int, dst: int, src: int) -> int:
        """context(dst) := context(dst) | context(src) | {seq}."""
        head = self._head
        left = head[dst]
        right = head[src]
        if right == left:
            right = EMPTY
        self._seq.append(seq)
        self._left.append(left)
        self._right.append(right)
        node = head[dst] = len(self._seq) - 1
        return node

    def absorb(self, entity: int, nodes: Iterable[int]) -> int:
        """Union several captured contexts into an entity's context."""
        node = self._head[entity]
        for other in nodes:
            node = self.merge(node, other)
        self._head[entity] = node
        return node

    def inherit(self, child: int, parent: int) -> None:
        self._head[child] = self.merge(self._head[child], self._head[parent])

    def events(self, node: int) -> list[int]:
        """Sorted event ordinals reachable from ``node``."""
        if node == EMPTY:
            return []
        seqs = self._seq
        left = self._left
        right = self._right
        seen = {node}
        stack = [node]
        out = []
        while stack:
            n = stack.pop()
            s = seqs[n]
            if s != EMPTY:
                out.append(s)
            for p in (left[n], right[n]):
                if p != EMPTY and p not in seen:
                    seen.add(p)
                    stack.append(p)
        out.sort()
        return out

    def context(self, node: int) -> "ProvenanceContext":
        return ProvenanceContext(self, node)


class ProvenanceContext:
    """Immutable view of one context node: an ordered set of event ordinals."""

    __slots__ = ("store", "node", "_events")

    def __init__(self, store: ContextStore, node: int) -> None:
        self.store = store
        self.node = node
        self._events: tuple[int, ...] | None = None

    @property
    def events(self) -> tuple[int, ...]:
        if self._events is None:
            self._events = tuple(self.store.events(self.node))
        return self._events

    def merge(self, other: "ProvenanceContext") -> "ProvenanceContext":
        if other.store is not self.store:
            raise ValueError("contexts from different stores")
        return ProvenanceContext(self.store, self.store.merge(self.node, other.node))

    def __iter__(self) -> Iterator[int]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def __contains__(self, seq: object) -> bool:
        return seq in self.events

    def __eq__(self, other: object) -> bool:
        if isinstance(other, ProvenanceContext):
            return self.events == other.events
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self.events)

    def __repr__(self) -> str:
        return f"ProvenanceContext({list(self.events)})"
