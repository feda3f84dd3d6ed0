"""Streaming provenance analysis over OS audit event traces."""

from .context import ContextStore, ProvenanceContext
from .engine import Engine, RunMetrics, RunResult, run_trace
from .events import (
    EntityId,
    EntityKind,
    EventKind,
    EventRecord,
    FileDescriptor,
    MalformedRecord,
    NetflowDescriptor,
    OtherDescriptor,
    SubjectDescriptor,
    UnknownKind,
    serialize_record,
    validate_record,
)
from .forensics import AttackSubgraph, CapExceeded, FilterPolicy, export_dot, forward_analysis
from .graph import GraphEdge, GraphStats, NodeVersion, ProvenanceGraph, UnknownEntity
from .ingest import (
    FormatError,
    IngestConfig,
    IngestStats,
    IoError,
    OrderViolation,
    QuarantineEntry,
    normalize,
    open_stream,
)
from .csr import read_csr, write_csr
from .policy import Alarm, DetectionConfig, Policy, PolicyEngine, parse_alarm_line, render_alarm
from .scenarios import GroundTruth, ScenarioSpec, SpecError, generate, inject_faults
from .tags import (
    ConfidentialityLevel,
    ConfigError,
    IntegrityLevel,
    TagPolicyConfig,
    TagState,
    initial_tags,
    join_conf,
    meet_integrity,
    propagate,
)

__version__ = "0.1.0"
