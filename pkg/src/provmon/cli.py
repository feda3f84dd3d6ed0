"""Command-line entry point: ``provmon run | gen | csr``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import orjson

from .csr import read_csr, write_csr
from .engine import Engine
from .events import serialize_record
from .forensics import FilterPolicy, export_dot
from .ingest import FormatError, IoError, OrderViolation, open_stream, write_quarantine
from .policy import DetectionConfig, alarm_to_json, render_alarm
from .scenarios import FAULT_CLASSES, ScenarioSpec, SpecError, write_trace
from .tags import ConfigError, TagPolicyConfig

log = logging.getLogger("provmon")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ALARMS = 2


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("PROVMON_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="provmon: %(levelname)s: %(message)s")


def _load_json(path: Optional[str], what: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    try:
        data = orjson.loads(p.read_bytes())
    except orjson.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _write_lines(path: Path, lines) -> None:
    with open(path, "wb") as fh:
        for line in lines:
            fh.write(line)
            fh.write(b"\n")


def cmd_run(args: argparse.Namespace) -> int:
    inp = Path(args.input)
    if not inp.is_file():
        raise UsageError(f"input trace not found: {inp}")
    tag_cfg = TagPolicyConfig.from_dict(_load_json(args.tag_policy, "tag policy"))
    det_cfg = DetectionConfig.from_dict(_load_json(args.detect, "detection config"))
    filt = FilterPolicy.from_dict(_load_json(args.filter, "filter policy"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    engine = Engine(tag_cfg, det_cfg, filt)
    records: Optional[list] = [] if args.csr else None
    result = engine.run_file(inp, tap=records)
    if records is not None:
        result.ingest.bytes_csr = write_csr(records, out / "trace.csr.gz").bytes_csr

    with open(out / "alarms.log", "w", encoding="utf-8") as fh:
        for a in result.alarms:
            fh.write(render_alarm(a) + "\n")
    _write_lines(out / "alarms.jsonl", (alarm_to_json(a) for a in result.alarms))
    for sg in result.subgraphs:
        export_dot(sg, out)
    write_quarantine(result.quarantine, out / "quarantine.jsonl")
    metrics = result.metrics.as_dict()
    metrics["ingest"] = result.ingest.as_dict()
    (out / "metrics.json").write_bytes(orjson.dumps(metrics, option=orjson.OPT_INDENT_2))
    print(f"{len(result.alarms)} alarms, {result.metrics.records} records, "
          f"{result.metrics.events_per_sec:,.0f} records/s")
    return EXIT_ALARMS if result.alarms else EXIT_OK


def parse_faults(text: Optional[str]) -> dict:
    """``missing_ip=5,unconnected=2`` or a JSON object."""
    if not text:
        return {}
    text = text.strip()
    if text.startswith("{"):
        try:
            mix = orjson.loads(text)
        except orjson.JSONDecodeError as exc:
            raise SpecError(f"bad fault spec: {exc}") from None
        if not isinstance(mix, dict):
            raise SpecError("fault spec must be an object")
        return mix
    mix = {}
    for part in text.split(","):
        name, sep, count = part.partition("=")
        name = name.strip()
        if not sep or name not in FAULT_CLASSES:
            raise SpecError(f"bad fault entry {part!r}; classes: {', '.join(FAULT_CLASSES)}")
        try:
            mix[name] = int(count)
        except ValueError:
            raise SpecError(f"bad fault count in {part!r}") from None
    return mix


def cmd_gen(args: argparse.Namespace) -> int:
    spec = ScenarioSpec(args.scenario, args.seed, args.noise, parse_faults(args.faults),
                        attack=not args.noise_only)
    path, truth = write_trace(spec, args.out)
    print(f"{path} ({len(truth.attack_events)} attack events)")
    return EXIT_OK


def cmd_csr(args: argparse.Namespace) -> int:
    inp = Path(args.input)
    stream = open_stream(inp)
    records = list(stream)
    stats = write_csr(records, args.out)
    back = read_csr(args.out)
    if back != records:
        print("round-trip mismatch", file=sys.stderr)
        return EXIT_ERROR
    if args.verbose_out:
        _write_lines(Path(args.verbose_out), (orjson.dumps(serialize_record(r)) for r in back))
    with open(inp, "rb") as fh:
        gz = fh.read(2) == b"\x1f\x8b"
    size_in = stats.bytes_in if gz else inp.stat().st_size
    ratio = stats.bytes_csr / size_in if size_in else 0.0
    print(f"records={len(records)} bytes_in={size_in} bytes_csr={stats.bytes_csr} ratio={ratio:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="provmon", description="Streaming provenance analysis over audit traces.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="analyze a trace; exit 2 when alarms fire")
    r.add_argument("--input", required=True, help="verbose JSON-lines trace (plain or gzip)")
    r.add_argument("--tag-policy", help="tag policy JSON")
    r.add_argument("--detect", help="detection config JSON")
    r.add_argument("--filter", help="filter policy JSON")
    r.add_argument("--out", default="provmon-out", help="output directory")
    r.add_argument("--csr", action="store_true", help="also write the normalized trace as CSR")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen", help="generate a labeled scenario trace")
    g.add_argument("--scenario", required=True, choices=["bovia", "pandex", "stretch"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=int, default=0, help="number of background events")
    g.add_argument("--faults", help="fault mix, e.g. missing_ip=10,unconnected=5")
    g.add_argument("--noise-only", action="store_true", help="omit the attack; background activity only")
    g.add_argument("--out", default=".", help="output directory")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("csr", help="convert a trace to CSR and verify the round trip")
    c.add_argument("--input", required=True)
    c.add_argument("--out", required=True, help="CSR output file")
    c.add_argument("--verbose-out", help="also write the decoded trace back as JSON lines")
    c.set_defaults(func=cmd_csr)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, SpecError, FormatError, OrderViolation, IoError, OSError) as exc:
        print(f"provmon: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
