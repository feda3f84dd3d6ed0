"""Labeled synthetic traces: three attack scripts, background noise, input faults.

Each attack script is a short sequence of definitions and events whose
expected alarms are fixed by construction. Noise is drawn from whitelisted
and benign subjects working on their own files, trusted network peers and
pipes, so under the default configuration it raises nothing. Attack events
are spread uniformly through the noise, then faults are applied, then event
ordinals and timestamps are assigned.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Optional, Union

import orjson

from .engine import RunMetrics, RunResult
from .events import EVENT_KINDS, EntityId, EntityKind, EventRecord, FileDescriptor, NetflowDescriptor, \
    OtherDescriptor, SubjectDescriptor

__all__ = [
    "FAULT_CLASSES", "GroundTruth", "RunMetrics", "ScenarioKind", "ScenarioSpec", "SpecError",
    "generate", "inject_faults", "measure", "random_trace", "write_trace",
]


class SpecError(ValueError):
    pass


class ScenarioKind(Enum):
    BOVIA = "bovia"
    PANDEX = "pandex"
    STRETCH = "stretch"


FAULT_CLASSES = ("missing_ip", "duplicate_definition", "uuid_reuse", "undefined_uuid",
                 "missing_name", "unconnected")

ATTACK_IP = "129.55.12.167"
ATTACK_IP_2 = "128.55.12.167"
DEFAULT_TIME_BASE = 1_473_413_317_000


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind = ScenarioKind.BOVIA
    seed: int = 0
    noise_events: int = 0
    fault_mix: dict = field(default_factory=dict)
    time_base: int = DEFAULT_TIME_BASE
    attack: bool = True

    def __post_init__(self) -> None:
        kind = self.kind
        if not isinstance(kind, ScenarioKind):
            try:
                kind = ScenarioKind(kind)
            except ValueError:
                raise SpecError(f"unknown scenario {self.kind!r}") from None
            object.__setattr__(self, "kind", kind)
        if type(self.seed) is not int or not 0 <= self.seed < 1 << 64:
            raise SpecError("seed must be a 64-bit unsigned integer")
        if type(self.noise_events) is not int or self.noise_events < 0:
            raise SpecError("noise_events must be a non-negative integer")
        if type(self.time_base) is not int or self.time_base < 0:
            raise SpecError("time_base must be non-negative epoch milliseconds")
        for k, v in self.fault_mix.items():
            if k not in FAULT_CLASSES:
                raise SpecError(f"unknown fault class {k!r}")
            if type(v) is not int or v < 0:
                raise SpecError(f"fault count for {k} must be a non-negative integer")


@dataclass
class GroundTruth:
    scenario: str
    seed: int
    attack_events: list = field(default_factory=list)
    expected_alarms: dict = field(default_factory=dict)
    faults: dict = field(default_factory=dict)

    @property
    def attack_seqs(self) -> list[int]:
        return [a["seq"] for a in self.attack_events]

    def to_json(self) -> bytes:
        return orjson.dumps({
            "scenario": self.scenario, "seed": self.seed,
            "attack_events": self.attack_events,
            "expected_alarms": self.expected_alarms, "faults": self.faults,
        }, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)

    @classmethod
    def from_json(cls, data: Union[bytes, str]) -> "GroundTruth":
        d = orjson.loads(data)
        return cls(d["scenario"], d["seed"], d["attack_events"], d["expected_alarms"], d.get("faults", {}))


# Proto-records: [record dict, origin, label]. origin is "a" (attack) or "n"
# (noise); label is the attack step name or a noise role.
Proto = list


class _Script:
    """Builder for one attack script."""

    def __init__(self, uuids: random.Random) -> None:
        self._uuids = uuids
        self.items: list[Proto] = []

    def _uuid(self) -> str:
        return f"{self._uuids.getrandbits(128):032x}"

    def subject(self, image: str, pid: int, parent: Optional[str] = None) -> str:
        u = self._uuid()
        self.items.append([{"def": "subject", "uuid": u, "pid": pid, "image": image, "parent": parent}, "a", None])
        return u

    def file(self, path: str) -> str:
        u = self._uuid()
        self.items.append([{"def": "file", "uuid": u, "url": path}, "a", None])
        return u

    def netflow(self, ip: str, port: int) -> str:
        u = self._uuid()
        self.items.append([{"def": "netflow", "uuid": u, "ip": ip, "port": port}, "a", None])
        return u

    def ev(self, kind: str, subj: str, obj: Optional[str] = None, step: str = "",
           policy: Optional[str] = None, obj2: Optional[str] = None, **attrs: Any) -> None:
        rec = {"kind": kind, "subj": subj, "obj": obj, "obj2": obj2, "attrs": attrs}
        self.items.append([rec, "a", {"step": step or kind, "policy": policy}])

    def fork(self, parent: str, image: str, pid: int, step: str = "fork") -> str:
        child = self.subject(image, pid, parent)
        self.ev("fork", parent, None, step, obj2=child)
        return child


def _bovia(s: _Script) -> dict:
    srv = s.subject("/usr/sbin/nginx", 1001)
    n8000 = s.netflow(ATTACK_IP, 8000)
    s.ev("recv", srv, n8000, "server reads attacker request")
    dropper = s.file("/var/www/tmp/dropper")
    s.ev("create", srv, dropper, "server writes dropper")
    s.ev("exec", srv, dropper, "dropper launched", "UntrustedLoad+WrittenThenExec", exe="/var/www/tmp/dropper")
    n443 = s.netflow(ATTACK_IP, 443)
    s.ev("connect", srv, n443, "dropper calls back")
    sh = s.fork(srv, "/bin/sh", 1002, "dropper spawns shell")
    log = s.file("/var/www/tmp/.cache.log")
    s.ev("create", sh, log, "shell opens output log")
    cmds = {"ls": None, "whoami": "/etc/passwd", "hostname": "/etc/hostname", "uname": None}
    for i, (cmd, reads) in enumerate(cmds.items()):
        c = s.fork(sh, "/bin/sh", 1003 + i, f"shell runs {cmd}")
        binary = s.file(f"/bin/{cmd}")
        s.ev("exec", c, binary, f"{cmd} starts", exe=f"/bin/{cmd}")
        if reads:
            f = s.file(reads)
            s.ev("read", c, f, f"{cmd} reads {reads}", "ConfLeak")
        s.ev("write", c, log, f"{cmd} output to log")
    s.ev("recv", srv, n443, "dropper fetches second stage")
    stage2 = s.file("/var/www/tmp/stage2")
    s.ev("create", srv, stage2, "second stage written")
    s.ev("chmod", srv, stage2, "second stage made executable", "PermissionChange", perms="0755")
    s2 = s.fork(srv, "/var/www/tmp/dropper", 1010, "dropper spawns second stage")
    s.ev("exec", s2, stage2, "second stage launched", "WrittenThenExec", exe="/var/www/tmp/stage2")
    s.ev("read", s2, log, "second stage reads log", "ConfLeak")
    n2525 = s.netflow(ATTACK_IP, 2525)
    s.ev("connect", s2, n2525, "second stage connects out")
    s.ev("send", s2, n2525, "log exfiltrated", "ConfLeak")
    return {"UntrustedLoad": 1, "WrittenThenExec": 2, "ConfLeak": 4, "PermissionChange": 1, "Downgrade": 0}


def _pandex(s: _Script) -> dict:
    sshd = s.subject("/usr/sbin/sshd", 900)
    peer = s.netflow(ATTACK_IP_2, 51234)
    s.ev("recv", sshd, peer, "sshd session from attacker")
    bash = s.fork(sshd, "/bin/bash", 901, "sshd spawns bash")
    s.ev("exec", bash, s.file("/bin/bash"), "bash starts", exe="/bin/bash")
    scp = s.fork(bash, "/usr/bin/scp", 902, "bash runs scp")
    s.ev("exec", scp, s.file("/usr/bin/scp"), "scp starts", exe="/usr/bin/scp")
    s.ev("recv", scp, peer, "scp receives archiver")
    arch_f = s.file("/tmp/archiver")
    s.ev("create", scp, arch_f, "scp writes archiver")
    s.ev("chmod", bash, arch_f, "archiver made executable", "PermissionChange", perms="+x")
    arch = s.fork(bash, "/bin/bash", 903, "bash launches archiver")
    s.ev("exec", arch, arch_f, "archiver runs", "UntrustedLoad+WrittenThenExec", exe="/tmp/archiver")
    db_f = s.file("/tmp/dropbear/dropbear")
    dbk_f = s.file("/tmp/dropbear/dropbearkey")
    s.ev("create", arch, db_f, "archiver extracts dropbear")
    s.ev("create", arch, dbk_f, "archiver extracts dropbearkey")
    s.ev("chmod", arch, dbk_f, "dropbearkey made executable", "PermissionChange", perms="0700")
    dk = s.fork(bash, "/bin/bash", 904, "bash launches dropbearkey")
    s.ev("exec", dk, dbk_f, "dropbearkey runs", "UntrustedLoad+WrittenThenExec", exe="/tmp/dropbear/dropbearkey")
    key = s.file("/tmp/dropbear/dropbear_rsa_host_key")
    s.ev("create", dk, key, "dropbearkey writes host key")
    db = s.fork(arch, "/tmp/archiver", 905, "archiver launches dropbear")
    s.ev("exec", db, db_f, "dropbear runs", "WrittenThenExec", exe="/tmp/dropbear/dropbear")
    s.ev("read", db, key, "dropbear loads host key", "ConfLeak")
    c = s.fork(db, "/tmp/dropbear/dropbear", 906, "dropbear session command")
    s.ev("exec", c, s.file("/usr/bin/id"), "id starts", exe="/usr/bin/id")
    s.ev("read", c, s.file("/etc/passwd"), "id reads passwd", "ConfLeak")
    out = s.file("/tmp/.o")
    s.ev("create", c, out, "command output written")
    s.ev("read", arch, out, "archiver collects output", "ConfLeak")
    n2525 = s.netflow(ATTACK_IP_2, 2525)
    s.ev("connect", arch, n2525, "archiver connects out")
    s.ev("send", arch, n2525, "output exfiltrated", "ConfLeak")
    return {"UntrustedLoad": 2, "WrittenThenExec": 3, "ConfLeak": 4, "PermissionChange": 2, "Downgrade": 0}


def _stretch(s: _Script) -> dict:
    ff = s.subject("/usr/lib/firefox/firefox", 3244)
    web = s.netflow(ATTACK_IP_2, 80)
    s.ev("recv", ff, web, "browser downloads payload")
    mn_f = s.file("/home/steve/traffic_gen/mozillanightly")
    s.ev("create", ff, mn_f, "payload saved")
    s.ev("chmod", ff, mn_f, "payload made executable", "PermissionChange", perms="0755")
    mn = s.fork(ff, "/usr/lib/firefox/firefox", 3548, "browser launches payload")
    s.ev("exec", mn, mn_f, "payload runs", "UntrustedLoad+WrittenThenExec",
         exe="/home/steve/traffic_gen/mozillanightly")
    c2 = s.netflow(ATTACK_IP_2, 443)
    s.ev("recv", mn, c2, "payload fetches tool")
    ps_f = s.file("/home/steve/traffic_gen/photosnap")
    s.ev("create", mn, ps_f, "tool written")
    ps = s.fork(mn, "/home/steve/traffic_gen/mozillanightly", 3560, "payload launches tool")
    s.ev("exec", ps, ps_f, "tool runs", "WrittenThenExec", exe="/home/steve/traffic_gen/photosnap")
    for path in ("/etc/passwd", "/etc/hosts", "/home/steve/.ssh/id_rsa"):
        s.ev("read", ps, s.file(path), f"tool reads {path}", "ConfLeak")
    output = s.file("/home/steve/traffic_gen/output.dat")
    s.ev("write", ps, output, "tool writes output file", "Downgrade")
    n2525 = s.netflow(ATTACK_IP_2, 2525)
    s.ev("connect", ps, n2525, "tool connects out")
    s.ev("send", ps, n2525, "tool exfiltrates", "ConfLeak")
    s.ev("read", mn, output, "payload collects output", "ConfLeak")
    s.ev("send", mn, c2, "payload exfiltrates output", "ConfLeak")
    s.ev("write", mn, s.file("/home/steve/.bashrc"), "payload persists", "Downgrade")
    for f in (ps_f, output, mn_f):
        s.ev("unlink", mn, f, "cleanup")
    return {"UntrustedLoad": 1, "WrittenThenExec": 2, "ConfLeak": 6, "PermissionChange": 1, "Downgrade": 2}


_SCRIPTS = {ScenarioKind.BOVIA: _bovia, ScenarioKind.PANDEX: _pandex, ScenarioKind.STRETCH: _stretch}


class _Noise:
    """Background activity that stays clean under the default tag policy."""

    def __init__(self, rng: random.Random, uuids: random.Random, n_events: int) -> None:
        self.rng = rng
        self.uuids = uuids
        self.n_events = n_events
        n_subj = max(8, n_events // 1000)
        n_files = max(24, n_events // 150)
        n_net = max(12, n_events // 1000)
        self.subjects = [self._subject_spec(i) for i in range(n_subj)]
        self.files = [self._file_spec(i) for i in range(n_files)]
        self.libs = [("/usr/lib/libc.so.6", "lib"), ("/usr/lib/libm.so.6", "lib"),
                     ("/usr/lib/libssl.so.3", "lib"), ("/usr/share/zoneinfo/UTC", "share")]
        self.tty = ("/dev/tty", "tty")
        self.recv_nets = [(f"10.{i // 250 % 250}.{i % 250}.{1 + i % 200}", 80 + i % 3) for i in range(n_net)]
        self.send_nets = [(f"10.200.{i // 250 % 250}.{i % 250}", 514) for i in range(n_net)]
        self.pipes = [f"pipe{i}" for i in range(max(4, n_events // 20000))]
        self.bins = ["/bin/ls", "/bin/cat", "/usr/bin/grep", "/usr/bin/sort", "/usr/bin/awk"]
        self._defined: dict[tuple, str] = {}
        self._next_pid = 20000

    def _subject_spec(self, i: int) -> tuple:
        r = i % 4
        if r == 0:
            return ("/usr/bin/python3", 10000 + i)
        if r == 1:
            return (f"/home/alice/bin/job{i}", 10000 + i)
        if r == 2:
            return (f"/opt/app/bin/svc{i}", 10000 + i)
        return ("/bin/bash", 10000 + i)

    def _file_spec(self, i: int) -> str:
        r = i % 3
        if r == 0:
            return f"/home/alice/work/f{i}.txt"
        if r == 1:
            return f"/var/log/app{i}.log"
        return f"/home/alice/.cache/c{i}"

    def _uuid(self) -> str:
        return f"{self.uuids.getrandbits(128):032x}"

    def _ref(self, key: tuple, make) -> Iterator[Proto]:
        u = self._defined.get(key)
        if u is None:
            u = self._defined[key] = self._uuid()
            rec, role = make(u)
            yield [rec, "n", role]
        self._last = u

    def _subj(self, i: int) -> Iterator[Proto]:
        image, pid = self.subjects[i]
        yield from self._ref(("s", i), lambda u: (
            {"def": "subject", "uuid": u, "pid": pid, "image": image, "parent": None}, "subject"))

    def _file(self, path: str, role: str = "file") -> Iterator[Proto]:
        yield from self._ref(("f", path), lambda u: ({"def": "file", "uuid": u, "url": path}, role))

    def _net(self, addr: tuple, role: str) -> Iterator[Proto]:
        yield from self._ref(("n", addr), lambda u: (
            {"def": "netflow", "uuid": u, "ip": addr[0], "port": addr[1]}, role))

    def _pipe(self, hint: str) -> Iterator[Proto]:
        yield from self._ref(("p", hint), lambda u: ({"def": "pipe", "uuid": u, "hint": hint}, "pipe"))

    @staticmethod
    def _ev(kind: str, s: str, o: Optional[str], obj2: Optional[str] = None, role: str = "event", **attrs: Any) -> Proto:
        return [{"kind": kind, "subj": s, "obj": o, "obj2": obj2, "attrs": attrs}, "n", role]

    def events(self) -> Iterator[Proto]:
        """Yield noise proto-records; exactly ``n_events`` events plus their definitions."""
        rng = self.rng
        ev = self._ev
        left = self.n_events
        choices = ["read", "write", "tty", "load", "recv", "send", "pipe", "close", "fork"]
        weights = [34, 24, 8, 10, 6, 6, 8, 3, 1]
        while left > 0:
            action = rng.choices(choices, weights)[0]
            if action == "fork" and left < 3:
                action = "read"
            si = rng.randrange(len(self.subjects))
            yield from self._subj(si)
            s = self._last
            if action in ("read", "write", "close"):
                yield from self._file(self.files[rng.randrange(len(self.files))])
                kind = {"read": "read", "write": "write", "close": "close"}[action]
                yield ev(kind, s, self._last, role="rw")
                left -= 1
            elif action == "tty":
                yield from self._file(self.tty[0], "tty")
                yield ev("write", s, self._last, role="rw")
                left -= 1
            elif action == "load":
                path, _ = self.libs[rng.randrange(len(self.libs))]
                yield from self._file(path, "lib")
                yield ev("load", s, self._last)
                left -= 1
            elif action == "recv":
                yield from self._net(self.recv_nets[rng.randrange(len(self.recv_nets))], "recv_net")
                yield ev("recv", s, self._last)
                left -= 1
            elif action == "send":
                yield from self._net(self.send_nets[rng.randrange(len(self.send_nets))], "send_net")
                n = self._last
                yield ev("send", s, n)
                left -= 1
            elif action == "pipe":
                yield from self._pipe(self.pipes[rng.randrange(len(self.pipes))])
                yield ev(rng.choice(("pipe_read", "pipe_write")), s, self._last)
                left -= 1
            else:
                exe = rng.choice(self.bins)
                self._next_pid += 1
                child = self._uuid()
                yield [{"def": "subject", "uuid": child, "pid": self._next_pid, "image": exe,
                        "parent": s}, "n", "child"]
                yield ev("fork", s, None, child)
                yield from self._file(exe, "bin")
                yield ev("exec", child, self._last, role="exec", exe=exe)
                yield from self._file(self.tty[0], "tty")
                yield ev("write", child, self._last, role="rw")
                left -= 3


def _is_event(rec: dict) -> bool:
    return "def" not in rec


def _build(spec: ScenarioSpec) -> tuple[list[Proto], dict, Iterator[Proto], int]:
    uuids = random.Random(f"{spec.seed}:uuid")
    script = _Script(uuids)
    expected = _SCRIPTS[spec.kind](script)
    if not spec.attack:
        script.items.clear()
        expected = {p: 0 for p in expected}
    noise = _Noise(random.Random(f"{spec.seed}:noise"), uuids, spec.noise_events)
    return script.items, expected, noise.events(), spec.noise_events


def _interleave(attack: list[Proto], noise: Iterator[Proto], n_noise: int, rng: random.Random) -> Iterator[Proto]:
    """Spread attack events (with their pending definitions) uniformly over noise events."""
    chunks: list[list[Proto]] = []
    cur: list[Proto] = []
    for item in attack:
        cur.append(item)
        if _is_event(item[0]):
            chunks.append(cur)
            cur = []
    if cur:
        chunks.append(cur)
    slots = sorted(rng.randrange(n_noise + 1) for _ in chunks)
    ci = 0
    seen = 0
    for item in noise:
        while ci < len(chunks) and slots[ci] <= seen:
            yield from chunks[ci]
            ci += 1
        yield item
        if _is_event(item[0]):
            seen += 1
    while ci < len(chunks):
        yield from chunks[ci]
        ci += 1


def _candidates(items: list[Proto], pred) -> list[int]:
    return [i for i, it in enumerate(items) if pred(it)]


def inject_faults(items: list[Proto], fault_mix: dict, seed: int = 0) -> list[Proto]:
    """Apply input-quality faults to a proto-record list (returns a new list).

    Faults never remove an attack event or change an attack entity's tags.
    Raises ``SpecError`` when a class has fewer candidates than requested.
    """
    for k in fault_mix:
        if k not in FAULT_CLASSES:
            raise SpecError(f"unknown fault class {k!r}")
    if not any(fault_mix.values()):
        return list(items)
    rng = random.Random(f"{seed}:faults")
    items = [[dict(rec), origin, label] for rec, origin, label in items]
    uuids = random.Random(f"{seed}:fault-uuid")

    def pick(cands: list[int], n: int, what: str) -> list[int]:
        if n > len(cands):
            raise SpecError(f"{what}: {n} requested but only {len(cands)} candidates")
        return sorted(rng.sample(cands, n))

    n = fault_mix.get("missing_ip", 0)
    if n:
        cands = _candidates(items, lambda it: it[0].get("def") == "netflow" and it[0]["ip"]
                            and (it[1] == "a" or it[2] == "send_net"))
        for i in pick(cands, n, "missing_ip"):
            items[i][0]["ip"] = ""
    n = fault_mix.get("missing_name", 0)
    if n:
        exec_subjects = {it[0]["subj"] for it in items
                         if _is_event(it[0]) and it[0]["kind"] == "exec" and it[0]["attrs"].get("exe")}
        cands = _candidates(items, lambda it: it[0].get("def") == "subject" and it[0]["image"]
                            and it[0]["uuid"] in exec_subjects)
        noise_only = [i for i in cands if items[i][1] == "n"]
        for i in pick(noise_only if len(noise_only) >= n else cands, n, "missing_name"):
            items[i][0]["image"] = ""
    n = fault_mix.get("unconnected", 0)
    if n:
        cands = _candidates(items, lambda it: it[1] == "n" and it[2] == "rw" and _is_event(it[0]))
        for i in pick(cands, n, "unconnected"):
            items[i][0]["obj"] = None
    inserts: list[tuple[int, Proto]] = []
    n = fault_mix.get("duplicate_definition", 0)
    if n:
        cands = _candidates(items, lambda it: "def" in it[0])
        for i in pick(cands, n, "duplicate_definition"):
            inserts.append((i + 1, [dict(items[i][0]), "n", "duplicate"]))
    n = fault_mix.get("uuid_reuse", 0)
    if n:
        cands = _candidates(items, lambda it: it[0].get("def") == "subject")
        for k, i in enumerate(pick(cands, n, "uuid_reuse")):
            rec = {"def": "file", "uuid": items[i][0]["uuid"], "url": f"/tmp/reused{k}"}
            inserts.append((i + 1, [rec, "n", "reuse"]))
    n = fault_mix.get("undefined_uuid", 0)
    if n:
        cands = _candidates(items, lambda it: _is_event(it[0]))
        for i in pick(cands, n, "undefined_uuid"):
            ghost = f"{uuids.getrandbits(128):032x}"
            rec = {"kind": "read", "subj": items[i][0]["subj"], "obj": ghost, "obj2": None, "attrs": {}}
            inserts.append((i + 1, [rec, "n", "ghost"]))
    if inserts:
        inserts.sort(key=lambda x: x[0])
        out: list[Proto] = []
        j = 0
        for i, it in enumerate(items):
            while j < len(inserts) and inserts[j][0] == i:
                out.append(inserts[j][1])
                j += 1
            out.append(it)
        out.extend(x[1] for x in inserts[j:])
        items = out
    return items


def iter_trace(spec: ScenarioSpec) -> tuple[Iterator[bytes], GroundTruth]:
    """Stream the trace lines; the ground truth is complete once the iterator is exhausted."""
    attack, expected, noise, n_noise = _build(spec)
    merged = _interleave(attack, noise, n_noise, random.Random(f"{spec.seed}:interleave"))
    if any(spec.fault_mix.values()):
        merged = iter(inject_faults(list(merged), spec.fault_mix, spec.seed))
    truth = GroundTruth(spec.kind.value, spec.seed, [], dict(expected), dict(spec.fault_mix))
    return _emit(merged, spec, truth), truth


def _emit(items, spec: ScenarioSpec, truth: GroundTruth) -> Iterator[bytes]:
    rng = random.Random(f"{spec.seed}:time")
    seq = 0
    ts = spec.time_base
    dumps = orjson.dumps
    events = truth.attack_events
    for rec, origin, label in items:
        if "def" in rec:
            yield dumps(rec) + b"\n"
            continue
        seq += 1
        if origin == "a":
            ts += 1000 + rng.randrange(1000)
            events.append({"seq": seq, "kind": rec["kind"], "step": label["step"], "policy": label["policy"]})
        else:
            ts += rng.randrange(3)
        yield dumps({"seq": seq, "ts": ts, "kind": rec["kind"], "subj": rec["subj"],
                     "obj": rec["obj"], "obj2": rec["obj2"], "attrs": rec["attrs"]}) + b"\n"


def generate(spec: ScenarioSpec, out: Union[str, Path, None] = None) -> tuple[Union[Path, bytes], GroundTruth]:
    """Produce a trace and its ground truth.

    With ``out`` (a file path) the trace is written there and a
    ``.truth.json`` sidecar next to it; otherwise the trace bytes are returned.
    """
    lines, truth = iter_trace(spec)
    if out is None:
        return b"".join(lines), truth
    path = Path(out)
    with open(path, "wb") as fh:
        buf: list[bytes] = []
        for line in lines:
            buf.append(line)
            if len(buf) >= 8192:
                fh.write(b"".join(buf))
                buf.clear()
        fh.write(b"".join(buf))
    sidecar = path.with_name(path.name.removesuffix(".jsonl") + ".truth.json")
    sidecar.write_bytes(truth.to_json())
    return path, truth


def write_trace(spec: ScenarioSpec, out_dir: Union[str, Path]) -> tuple[Path, GroundTruth]:
    """Write ``<scenario>-<seed>.jsonl`` and its sidecar under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path, truth = generate(spec, out_dir / f"{spec.kind.value}-{spec.seed}.jsonl")
    return path, truth  # type: ignore[return-value]


def measure(result: RunResult) -> RunMetrics:
    """Run metrics of a completed pipeline run."""
    return result.metrics


def random_trace(seed: int, n_events: int, n_entities: int = 40) -> list:
    """Random normalized records for property tests.

    Entities cover every kind and every initial tag class; events use every
    kind with random endpoints. Returns descriptors interleaved with events,
    each entity defined before first use.
    """
    rng = random.Random(seed)
    subjects: list[SubjectDescriptor] = []
    objects: list = []
    records: list = []
    images = ["/bin/ls", "/usr/sbin/nginx", "/opt/tool", "/home/u/a.out", "/usr/lib/firefox/firefox", ""]
    paths = ["/etc/shadow", "/etc/passwd", "/usr/lib/libc.so.6", "/usr/sbin/sshd", "/opt/x/data",
             "/home/u/f", "/tmp/t", ""]
    ips = [ATTACK_IP, "10.1.2.3", "", "192.168.1.9", "8.8.8.8"]
    n_subj = max(2, n_entities // 3)
    n_obj = max(2, n_entities - n_subj)

    def uid() -> str:
        return f"{rng.getrandbits(128):032x}"

    def new_subject(parent: Optional[EntityId] = None) -> SubjectDescriptor:
        d = SubjectDescriptor(EntityId(EntityKind.SUBJECT, uid()), rng.randrange(1, 65535),
                              rng.choice(images), parent)
        subjects.append(d)
        records.append(d)
        return d

    def new_object():
        r = rng.random()
        if r < 0.5:
            d = FileDescriptor(EntityId(EntityKind.FILE, uid()), rng.choice(paths) + ("" if rng.random() < 0.5 else str(len(objects))))
        elif r < 0.75:
            d = NetflowDescriptor(EntityId(EntityKind.NETFLOW, uid()), rng.choice(ips), rng.randrange(65536))
        else:
            kind = rng.choice((EntityKind.PIPE, EntityKind.SRCSINK, EntityKind.MEMORY))
            d = OtherDescriptor(EntityId(kind, uid()), f"h{len(objects)}")
        objects.append(d)
        records.append(d)
        return d

    kinds = list(EVENT_KINDS.values())
    seq = 0
    ts = 1_000_000
    for _ in range(n_events):
        if len(subjects) < n_subj and (not subjects or rng.random() < 0.2):
            new_subject()
        if len(objects) < n_obj and (not objects or rng.random() < 0.2):
            new_object()
        kind = rng.choice(kinds)
        subj = rng.choice(subjects)
        seq += rng.randrange(1, 3)
        ts += rng.randrange(5)
        if kind.label == "fork":
            child = new_subject(subj.id) if rng.random() < 0.5 or len(subjects) < 2 else rng.choice(subjects)
            records.append(EventRecord(seq, ts, kind, subj.id, None, child.id, {}))
            continue
        obj = rng.choice(objects)
        attrs = {}
        if kind.label == "chmod":
            attrs["perms"] = rng.choice(["0755", "0644", "+x", "u-w"])
        elif kind.label == "exec":
            attrs["exe"] = obj.name if isinstance(obj, FileDescriptor) else ""
        obj2 = rng.choice(objects).id if kind.label == "rename" else None
        records.append(EventRecord(seq, ts, kind, subj.id, obj.id, obj2, attrs))
    return records
