"""Integrity and confidentiality lattices, initial tag assignment, propagation rules."""

from __future__ import annotations

import ipaddress
import json
from dataclasses import dataclass, field, fields
from enum import IntEnum
import re
from fnmatch import translate
from pathlib import Path
from typing import Any, NamedTuple, Union

from .events import (
    CODE_LOADS,
    DATA_READS,
    DATA_WRITES,
    EntityDescriptor,
    EventKind,
    FileDescriptor,
    NetflowDescriptor,
    SubjectDescriptor,
)


class ConfigError(ValueError):
    pass


class IntegrityLevel(IntEnum):
    MALICIOUS = 0
    UNTRUSTED = 1
    BENIGN = 2
    BENIGN_AUTH = 3
    INVULNERABLE = 4
    WHITELIST = 5


class ConfidentialityLevel(IntEnum):
    PUBLIC = 0
    PRIVATE = 1
    SENSITIVE = 2
    SECRET = 3


DATA_LEVELS = frozenset({IntegrityLevel.BENIGN_AUTH, IntegrityLevel.BENIGN,
                         IntegrityLevel.UNTRUSTED, IntegrityLevel.MALICIOUS})

_IL = IntegrityLevel
_CL = ConfidentialityLevel


class TagState(NamedTuple):
    code_int: IntegrityLevel
    data_int: IntegrityLevel
    conf: ConfidentialityLevel

    @classmethod
    def for_object(cls, integrity: IntegrityLevel, conf: ConfidentialityLevel) -> "TagState":
        return cls(integrity, integrity, conf)

    @property
    def integrity(self) -> IntegrityLevel:
        """Single integrity of an object; the weaker of the two for subjects."""
        return min(self.code_int, self.data_int)

    def pack(self) -> int:
        return self.code_int * 24 + self.data_int * 4 + self.conf

    @classmethod
    def unpack(cls, packed: int) -> "TagState":
        return _UNPACKED[packed]


_UNPACKED = [TagState(_IL(p // 24), _IL(p % 24 // 4), _CL(p % 4)) for p in range(144)]
PACKED_STATES = 144


def meet_integrity(a: IntegrityLevel, b: IntegrityLevel) -> IntegrityLevel:
    return a if a <= b else b


def join_conf(a: ConfidentialityLevel, b: ConfidentialityLevel) -> ConfidentialityLevel:
    return a if a >= b else b


def _level(enum: type[IntEnum], value: Any, what: str) -> Any:
    if isinstance(value, enum):
        return value
    try:
        return enum[str(value).upper()]
    except KeyError:
        raise ConfigError(f"{what}: unknown level {value!r}") from None


def _check_glob(pattern: Any, what: str) -> str:
    if type(pattern) is not str or not pattern:
        raise ConfigError(f"{what}: empty or non-string glob {pattern!r}")
    depth = 0
    for ch in pattern:
        if ch == "[":
            depth += 1
        elif ch == "]" and depth:
            depth -= 1
    if depth:
        raise ConfigError(f"{what}: unbalanced '[' in glob {pattern!r}")
    return pattern


_GLOB_CLASSES = ("secret_file_globs", "sensitive_file_globs", "whitelist_binary_globs",
                 "invulnerable_binary_globs", "benign_auth_globs")


@dataclass
class TagPolicyConfig:
    """Initial tag sources. Glob classes are tried in field order; first match wins."""

    trusted_ip_list: list = field(default_factory=lambda: ["10.0.0.0/8", "127.0.0.0/8", "192.168.0.0/16"])
    secret_file_globs: list = field(default_factory=lambda: [
        "/etc/shadow", "/etc/master.passwd", "/etc/spwd.db", "*/.ssh/id_*", "*host_key*",
    ])
    sensitive_file_globs: list = field(default_factory=lambda: [
        "/etc/passwd", "/etc/hosts", "/etc/hostname", "/etc/network/*", "/etc/sudoers",
        "/etc/login.conf*", "*\\Documents\\*",
    ])
    whitelist_binary_globs: list = field(default_factory=lambda: [
        "/bin/*", "/usr/bin/*", "/usr/local/bin/*", "/lib/*", "/usr/lib/*.so*",
        "C:\\Windows\\System32\\*",
    ])
    invulnerable_binary_globs: list = field(default_factory=lambda: [
        "*/firefox", "*\\firefox.exe", "*/nginx", "*/sshd",
    ])
    benign_auth_globs: list = field(default_factory=lambda: ["/usr/share/*", "/opt/*"])
    default_file_integrity: IntegrityLevel = IntegrityLevel.BENIGN
    default_file_conf: ConfidentialityLevel = ConfidentialityLevel.PRIVATE
    trusted_netflow_integrity: IntegrityLevel = IntegrityLevel.BENIGN
    netflow_conf: ConfidentialityLevel = ConfidentialityLevel.PRIVATE
    default_subject_tags: TagState = TagState(_IL.BENIGN, _IL.BENIGN, _CL.PUBLIC)

    def __post_init__(self) -> None:
        self.default_file_integrity = _level(_IL, self.default_file_integrity, "default_file_integrity")
        self.default_file_conf = _level(_CL, self.default_file_conf, "default_file_conf")
        self.trusted_netflow_integrity = _level(_IL, self.trusted_netflow_integrity, "trusted_netflow_integrity")
        self.netflow_conf = _level(_CL, self.netflow_conf, "netflow_conf")
        st = self.default_subject_tags
        if isinstance(st, dict):
            st = (st.get("code_int", "benign"), st.get("data_int", "benign"), st.get("conf", "public"))
        code, data, conf = st
        st = TagState(_level(_IL, code, "default_subject_tags"), _level(_IL, data, "default_subject_tags"),
                      _level(_CL, conf, "default_subject_tags"))
        if st.data_int not in DATA_LEVELS:
            raise ConfigError("default_subject_tags: data integrity must be benign_auth or lower")
        self.default_subject_tags = st
        try:
            self._networks = [ipaddress.ip_network(n, strict=False) for n in self.trusted_ip_list]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"trusted_ip_list: {exc}") from None
        seen: dict[str, str] = {}
        for name in _GLOB_CLASSES:
            for pattern in getattr(self, name):
                _check_glob(pattern, name)
                if pattern in seen and seen[pattern] != name:
                    raise ConfigError(f"glob {pattern!r} listed in both {seen[pattern]} and {name}")
                seen[pattern] = name
        self._matchers = [(name, re.compile("|".join(translate(p) for p in getattr(self, name))))
                          for name in _GLOB_CLASSES if getattr(self, name)]

    @classmethod
    def from_dict(cls, data: dict) -> "TagPolicyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown tag policy keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TagPolicyConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def ip_trusted(self, ip: str) -> bool:
        if not ip:
            return False
        addr = ipaddress.ip_address(ip)
        return any(addr in net for net in self._networks)

    def classify_path(self, path: str) -> str | None:
        if not path:
            return None
        for name, rx in self._matchers:
            if rx.match(path):
                return name
        return None


def initial_tags(d: EntityDescriptor, cfg: TagPolicyConfig) -> TagState:
    """Tags for an entity seen for the first time, from configured source lists."""
    if isinstance(d, NetflowDescriptor):
        if cfg.ip_trusted(d.remote_ip):
            return TagState.for_object(cfg.trusted_netflow_integrity, cfg.netflow_conf)
        return TagState.for_object(_IL.UNTRUSTED, cfg.netflow_conf)
    if isinstance(d, SubjectDescriptor):
        cls = cfg.classify_path(d.image)
        if cls == "whitelist_binary_globs":
            return TagState(_IL.WHITELIST, _IL.BENIGN_AUTH, _CL.PUBLIC)
        if cls == "invulnerable_binary_globs":
            return TagState(_IL.INVULNERABLE, cfg.default_subject_tags.data_int, _CL.PUBLIC)
        if cls == "benign_auth_globs":
            return TagState(_IL.BENIGN_AUTH, _IL.BENIGN_AUTH, _CL.PUBLIC)
        return cfg.default_subject_tags
    default = TagState.for_object(cfg.default_file_integrity, cfg.default_file_conf)
    if not isinstance(d, FileDescriptor):
        return default
    cls = cfg.classify_path(d.path)
    if cls is None:
        return default
    if cls == "secret_file_globs":
        return TagState.for_object(cfg.default_file_integrity, _CL.SECRET)
    if cls == "sensitive_file_globs":
        return TagState.for_object(cfg.default_file_integrity, _CL.SENSITIVE)
    if cls == "whitelist_binary_globs":
        return TagState.for_object(_IL.WHITELIST, _CL.PUBLIC)
    if cls == "invulnerable_binary_globs":
        return TagState.for_object(_IL.INVULNERABLE, _CL.PUBLIC)
    return TagState.for_object(_IL.BENIGN_AUTH, _CL.PUBLIC)


def propagate(e: Any, subj: TagState, obj: TagState) -> tuple[TagState, TagState]:
    """Tag transformation for one event.

    ``e`` is an ``EventRecord`` or a bare ``EventKind``. For fork, ``subj`` is
    the parent and ``obj`` the child. Whitelisted subjects are inert: they
    neither acquire nor pass on anything, except that a forked child starts
    from its whitelisted parent's state.
    """
    kind = getattr(e, "kind", e)
    if kind is EventKind.FORK:
        child = TagState(meet_integrity(obj.code_int, subj.code_int),
                         meet_integrity(obj.data_int, subj.data_int),
                         join_conf(obj.conf, subj.conf))
        return subj, child
    if subj.code_int == _IL.WHITELIST:
        return subj, obj
    if kind in DATA_READS or kind in CODE_LOADS:
        incoming = obj.integrity
        code = subj.code_int
        if kind in CODE_LOADS:
            code = meet_integrity(code, incoming)
        return TagState(code, meet_integrity(subj.data_int, incoming), join_conf(subj.conf, obj.conf)), obj
    if kind in DATA_WRITES:
        level = meet_integrity(obj.integrity, subj.integrity)
        return subj, TagState(level, level, join_conf(obj.conf, subj.conf))
    return subj, obj


_packed_memo: dict[int, tuple[int, int]] = {}


def propagate_packed(kind: int, subj: int, obj: int) -> tuple[int, int]:
    """:func:`propagate` over packed tag codes, memoized per (kind, subj, obj)."""
    key = (kind * PACKED_STATES + subj) * PACKED_STATES + obj
    hit = _packed_memo.get(key)
    if hit is None:
        s, o = propagate(EventKind(kind), _UNPACKED[subj], _UNPACKED[obj])
        hit = _packed_memo[key] = (s.pack(), o.pack())
    return hit
