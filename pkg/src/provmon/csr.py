"""Compact tabular trace encoding.

Layout (gzip-compressed, UTF-8 text)::

    #provmon-csr 1
    <number of interned strings>
    <one JSON string literal per line>
    <body lines>

An event body line is ``seq<TAB>ts<TAB>kind<TAB>subj<TAB>obj<TAB>obj2<TAB>attrs``
where kind is the numeric event code, entity columns are indices of interned
``"<kind>:<uuid>"`` strings (empty when absent) and attrs is a comma list of
``keyIx:valueIx`` pairs whose values are interned JSON encodings. Entity
definitions may be carried inline as ``@`` followed by the verbose JSON object.
"""

from __future__ import annotations

import gzip
import io
import os
from pathlib import Path
from typing import Iterable, Iterator, Union

import orjson

from .events import (
    ENTITY_KINDS,
    EntityDescriptor,
    EntityId,
    EventKind,
    EventRecord,
    RecordValidator,
    serialize_record,
)
from .ingest import FormatError, IngestStats, IoError

MAGIC = "#provmon-csr 1"

_KINDS = list(EventKind)


class _Interner:
    def __init__(self) -> None:
        self.index: dict[str, int] = {}
        self.table: list[str] = []

    def __call__(self, s: str) -> int:
        ix = self.index.get(s)
        if ix is None:
            ix = self.index[s] = len(self.table)
            self.table.append(s)
        return ix


def encode(records: Iterable[Union[EventRecord, EntityDescriptor]]) -> tuple[bytes, int]:
    """Uncompressed CSR text and the verbose JSON-lines size of the same records."""
    intern = _Interner()
    ent_ix: dict[EntityId, str] = {}
    body: list[str] = []
    verbose = 0
    dumps = orjson.dumps

    def ent(eid: EntityId | None) -> str:
        if eid is None:
            return ""
        s = ent_ix.get(eid)
        if s is None:
            s = ent_ix[eid] = str(intern(str(eid)))
        return s

    for r in records:
        if type(r) is EventRecord:
            verbose += len(dumps(serialize_record(r))) + 1
            attrs = r.attrs
            refs = ",".join(f"{intern(k)}:{intern(dumps(v).decode())}" for k, v in attrs.items()) if attrs else ""
            body.append(f"{r.seq}\t{r.ts}\t{int(r.kind)}\t{ent(r.subject)}\t{ent(r.object)}\t{ent(r.object2)}\t{refs}\n")
        else:
            line = dumps(serialize_record(r)).decode()
            verbose += len(line) + 1
            body.append(f"@{line}\n")
    head = [MAGIC, "\n", str(len(intern.table)), "\n"]
    for s in intern.table:
        head.append(orjson.dumps(s).decode())
        head.append("\n")
    return ("".join(head) + "".join(body)).encode("utf-8", "surrogatepass"), verbose


def write_csr(records: Iterable[Union[EventRecord, EntityDescriptor]], out: Union[str, Path]) -> IngestStats:
    """Write records as gzipped CSR.

    ``bytes_in`` is the size the same records take in the verbose JSON-lines
    form and ``bytes_csr`` the compressed size on disk.
    """
    text, verbose = encode(records)
    try:
        with open(out, "wb") as raw:
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, compresslevel=6, mtime=0) as gz:
                gz.write(text)
        size = os.path.getsize(out)
    except OSError as exc:
        raise IoError(exc.errno, f"cannot write CSR: {exc.strerror}", str(out)) from None
    return IngestStats(bytes_in=verbose, bytes_csr=size)


def decode(lines: Iterator[str]) -> Iterator[Union[EventRecord, EntityDescriptor]]:
    first = next(lines, "").rstrip("\n")
    if first != MAGIC:
        raise FormatError("not a provmon CSR file")
    try:
        count = int(next(lines))
        table = [orjson.loads(next(lines)) for _ in range(count)]
    except (StopIteration, ValueError, orjson.JSONDecodeError):
        raise FormatError("truncated or corrupt CSR string table") from None
    ents: dict[str, EntityId] = {}
    validator = RecordValidator()

    def ent(field: str) -> EntityId | None:
        if not field:
            return None
        eid = ents.get(field)
        if eid is None:
            kind, _, uuid = table[int(field)].partition(":")
            eid = ents[field] = EntityId(ENTITY_KINDS[kind], uuid)
        return eid

    for line in lines:
        if line.startswith("@"):
            yield validator(orjson.loads(line[1:]))
            continue
        try:
            seq, ts, kind, subj, obj, obj2, refs = line.rstrip("\n").split("\t")
            attrs = {}
            if refs:
                for pair in refs.split(","):
                    k, v = pair.split(":")
                    attrs[table[int(k)]] = orjson.loads(table[int(v)])
            yield EventRecord(int(seq), int(ts), _KINDS[int(kind)], ent(subj), ent(obj), ent(obj2), attrs)
        except (ValueError, IndexError, KeyError, orjson.JSONDecodeError):
            raise FormatError(f"corrupt CSR body line: {line[:80]!r}") from None


def read_csr(path: Union[str, Path]) -> list[Union[EventRecord, EntityDescriptor]]:
    try:
        with gzip.open(path, "rt", encoding="utf-8", newline="\n") as fh:
            return list(decode(iter(fh)))
    except (OSError, EOFError) as exc:
        if isinstance(exc, gzip.BadGzipFile):
            raise FormatError(f"{path}: not gzip data") from None
        raise IoError(f"cannot read CSR {path}: {exc}") from None


def encoded_size(records: Iterable[Union[EventRecord, EntityDescriptor]]) -> int:
    """Compressed size of the CSR form without touching disk."""
    text, _ = encode(records)
    buf = io.BytesIO()
    with gzip.GzipFile(filename="", mode="wb", fileobj=buf, compresslevel=6, mtime=0) as gz:
        gz.write(text)
    return len(buf.getvalue())
