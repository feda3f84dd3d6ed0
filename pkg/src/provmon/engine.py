"""End-to-end pipeline: normalized records in, alarms and attack subgraphs out."""

from __future__ import annotations

import gc
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .events import EntityDescriptor, EventRecord
from .forensics import AttackSubgraph, EdgeIndex, FilterPolicy, forward_analysis, union_size
from .graph import GraphSnapshot, GraphStats, ProvenanceGraph
from .ingest import IngestConfig, IngestStats, QuarantineEntry, open_stream
from .policy import Alarm, DetectionConfig, PolicyEngine
from .tags import TagPolicyConfig

log = logging.getLogger("provmon")


@dataclass
class RunMetrics:
    records: int = 0
    wall_ms: float = 0.0
    events_per_sec: float = 0.0
    approx_bytes: int = 0
    filtered_events: int = 0
    alarms: int = 0
    context_bytes: int = 0
    events: int = 0
    entities: int = 0
    versions: int = 0
    edges: int = 0
    quarantined: int = 0
    duplicates_dropped: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunResult:
    alarms: list[Alarm]
    subgraphs: list[AttackSubgraph]
    ingest: IngestStats
    graph: GraphStats
    metrics: RunMetrics
    quarantine: list[QuarantineEntry] = field(default_factory=list)
    snapshot: Optional[GraphSnapshot] = None


class Engine:
    """One single-writer pipeline instance."""

    def __init__(self, tag_policy: Optional[TagPolicyConfig] = None,
                 detection: Optional[DetectionConfig] = None,
                 filter_policy: Optional[FilterPolicy] = None,
                 ingest: Optional[IngestConfig] = None) -> None:
        self.graph = ProvenanceGraph(tag_policy)
        self.policy = PolicyEngine(self.graph, detection)
        self.filter_policy = filter_policy or FilterPolicy()
        self.ingest_config = ingest or IngestConfig()

    @property
    def alarms(self) -> list[Alarm]:
        return self.policy.alarms

    def feed(self, records: Iterable[Union[EventRecord, EntityDescriptor]]) -> int:
        """Apply normalized records in order; returns the number of events applied."""
        apply = self.graph.apply_event
        upsert = self.graph.upsert_entity
        evaluate = self.policy.evaluate
        n = 0
        # The loop allocates many short-lived tuples but no reference cycles;
        # generational collection would only rescan the long-lived state.
        was_enabled = gc.isenabled()
        gc.disable()
        try:
            for r in records:
                if type(r) is EventRecord:
                    evaluate(apply(r))
                    n += 1
                else:
                    upsert(r)
        finally:
            if was_enabled:
                gc.enable()
        return n

    def reconstruct(self) -> tuple[GraphSnapshot, list[AttackSubgraph]]:
        snap = self.graph.snapshot()
        if not self.alarms:
            return snap, []
        index = EdgeIndex(snap)
        return snap, [forward_analysis(a, index, self.filter_policy) for a in self.alarms]

    def run_file(self, path: Union[str, Path], tap: Optional[list] = None) -> RunResult:
        """Run the whole pipeline over a trace file. Normalized records are
        appended to ``tap`` when one is given."""
        t0 = time.perf_counter()
        stream = open_stream(path, self.ingest_config)
        n_events = self.feed(stream if tap is None else _tee(stream, tap))
        t1 = time.perf_counter()
        snap, subgraphs = self.reconstruct()
        wall = time.perf_counter() - t0
        ingest = stream.stats
        log.info("applied %d events in %.2fs, reconstruction %.2fs", n_events, t1 - t0, wall - t1 + t0)
        return self._result(ingest, stream.quarantine, snap, subgraphs, wall, n_events)

    def run_records(self, records: Iterable[Union[EventRecord, EntityDescriptor]],
                    ingest: Optional[IngestStats] = None) -> RunResult:
        t0 = time.perf_counter()
        records = list(records)
        n_events = self.feed(records)
        snap, subgraphs = self.reconstruct()
        wall = time.perf_counter() - t0
        if ingest is None:
            ingest = IngestStats(lines_read=len(records), events_delivered=n_events,
                                 definitions_interned=len(records) - n_events)
        return self._result(ingest, [], snap, subgraphs, wall, n_events)

    def _result(self, ingest: IngestStats, quarantine: list, snap: GraphSnapshot,
                subgraphs: list[AttackSubgraph], wall: float, n_events: int) -> RunResult:
        gs = snap.stats()
        metrics = RunMetrics(
            records=ingest.lines_read,
            wall_ms=round(wall * 1000.0, 3),
            events_per_sec=ingest.lines_read / wall if wall > 0 else 0.0,
            approx_bytes=gs.approx_bytes,
            filtered_events=union_size(subgraphs),
            alarms=len(self.alarms),
            context_bytes=self.graph.contexts.approx_bytes,
            events=n_events,
            entities=gs.entities,
            versions=gs.versions,
            edges=gs.edges,
            quarantined=ingest.quarantined,
            duplicates_dropped=ingest.duplicates_dropped,
        )
        return RunResult(list(self.alarms), subgraphs, ingest, gs, metrics, quarantine, snap)


def _tee(records: Iterable, sink: list) -> Iterable:
    for r in records:
        sink.append(r)
        yield r


def run_trace(path: Union[str, Path], **configs) -> RunResult:
    return Engine(**configs).run_file(path)
