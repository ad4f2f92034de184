"""Group and service registry stores.

A store is a keyed map of entries with a monotone version counter and a
bounded changelog.  Replicas stay in sync by pulling changelog records newer
than their own version (selective updates) or, when the changelog no longer
reaches back far enough, by restoring a full snapshot.
"""
from __future__ import annotations

import zlib
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

from .stanza import (
    Child,
    Identifier,
    ParseError,
    encode_element,
    parse_element,
    parse_identifier,
    render_identifier,
)

DEFAULT_RETENTION = 10_000
DIFF_PAGE_LIMIT = 200

SNAPSHOT_MAGIC = "MOBREG-SNAPSHOT v1"


class InvariantViolation(ValueError):
    """An entry or operation violates a store invariant."""


class NotFound(KeyError):
    """The entry id is not present in the store."""


class VersionTooOld(ValueError):
    """The requested base version predates the retained changelog."""


class CorruptSnapshot(ValueError):
    """Snapshot bytes failed checksum or schema validation."""


class Availability(Enum):
    AVAILABLE = "Available"
    UNAVAILABLE = "Unavailable"


class ChangeOp(Enum):
    UPSERT = "upsert"
    DELETE = "delete"


@dataclass
class ServiceEntry:
    """One registered service: identity, access point, availability, metadata."""

    service_name: str
    access_point: Identifier
    service_id: str
    description: str
    service_groups: list[str]
    availability: Availability = Availability.AVAILABLE
    location: str | None = None
    provider: str = ""
    other_info: dict[str, str] = field(default_factory=dict)
    version: int = 0

    @property
    def entry_id(self) -> str:
        return self.service_id

    def search_text(self) -> tuple[str, str]:
        return self.service_name, self.description

    def groups(self) -> list[str]:
        return self.service_groups

    def validate(self) -> None:
        if not self.service_id:
            raise InvariantViolation("service_id must be non-empty")
        if not self.service_groups:
            raise InvariantViolation(
                f"service {self.service_id!r} must belong to >= 1 group"
            )
        if not isinstance(self.availability, Availability):
            raise InvariantViolation("availability must be Available/Unavailable")

    def copy(self) -> "ServiceEntry":
        return replace(
            self,
            service_groups=list(self.service_groups),
            other_info=dict(self.other_info),
        )

    def to_element(self) -> bytes:
        children = [
            Child("name", self.service_name),
            Child("access", render_identifier(self.access_point)),
            Child("description", self.description),
        ]
        children.extend(Child("group", g) for g in self.service_groups)
        children.append(Child("availability", self.availability.value))
        if self.location is not None:
            children.append(Child("location", self.location))
        children.append(Child("provider", self.provider))
        for key in sorted(self.other_info):
            children.append(Child("info", self.other_info[key], {"key": key}))
        children.append(Child("version", str(self.version)))
        return encode_element("entry", [("id", self.service_id)], children)

    @classmethod
    def from_element(cls, data: bytes) -> "ServiceEntry":
        name, attrs, children, _ = parse_element(data)
        if name != "entry" or "id" not in attrs:
            raise ValueError("not an <entry> element")
        fields: dict[str, str] = {}
        groups: list[str] = []
        info: dict[str, str] = {}
        for child in children:
            if child.name == "group":
                groups.append(child.text)
            elif child.name == "info":
                info[child.attrs["key"]] = child.text
            else:
                fields[child.name] = child.text
        return cls(
            service_name=fields["name"],
            access_point=parse_identifier(fields["access"]),
            service_id=attrs["id"],
            description=fields["description"],
            service_groups=groups,
            availability=Availability(fields["availability"]),
            location=fields.get("location"),
            provider=fields["provider"],
            other_info=info,
            version=int(fields["version"]),
        )


@dataclass
class GroupEntry:
    """One service group: identity, domain, and its multicast access point."""

    group_name: str
    group_domain: str
    group_description: str
    registrant: str
    group_id: str
    group_access_point: Identifier
    other_info: dict[str, str] = field(default_factory=dict)
    version: int = 0

    @property
    def entry_id(self) -> str:
        return self.group_id

    def search_text(self) -> tuple[str, str]:
        return self.group_name, self.group_description

    def groups(self) -> list[str]:
        return [self.group_id]

    def validate(self) -> None:
        if not self.group_id:
            raise InvariantViolation("group_id must be non-empty")
        ap = self.group_access_point
        if ap.group_id != self.group_id or ap.service_id is not None:
            raise InvariantViolation(
                f"group access point {render_identifier(ap)!r} must be "
                f"{self.group_id!r}@<net>"
            )

    def copy(self) -> "GroupEntry":
        return replace(self, other_info=dict(self.other_info))

    def to_element(self) -> bytes:
        children = [
            Child("name", self.group_name),
            Child("domain", self.group_domain),
            Child("description", self.group_description),
            Child("registrant", self.registrant),
            Child("access", render_identifier(self.group_access_point)),
        ]
        for key in sorted(self.other_info):
            children.append(Child("info", self.other_info[key], {"key": key}))
        children.append(Child("version", str(self.version)))
        return encode_element("entry", [("id", self.group_id)], children)

    @classmethod
    def from_element(cls, data: bytes) -> "GroupEntry":
        name, attrs, children, _ = parse_element(data)
        if name != "entry" or "id" not in attrs:
            raise ValueError("not an <entry> element")
        fields: dict[str, str] = {}
        info: dict[str, str] = {}
        for child in children:
            if child.name == "info":
                info[child.attrs["key"]] = child.text
            else:
                fields[child.name] = child.text
        return cls(
            group_name=fields["name"],
            group_domain=fields["domain"],
            group_description=fields["description"],
            registrant=fields["registrant"],
            group_id=attrs["id"],
            group_access_point=parse_identifier(fields["access"]),
            other_info=info,
            version=int(fields["version"]),
        )


_ENTRY_TYPES = {"service": ServiceEntry, "group": GroupEntry}


@dataclass
class ChangeRecord:
    version: int
    entry_id: str
    op: ChangeOp
    entry: ServiceEntry | GroupEntry | None = None

    def copy(self) -> "ChangeRecord":
        entry = self.entry.copy() if self.entry is not None else None
        return ChangeRecord(self.version, self.entry_id, self.op, entry)


@dataclass
class Query:
    mode: str
    value: str

    @classmethod
    def by_id(cls, entry_id: str) -> "Query":
        return cls("id", entry_id)

    @classmethod
    def by_name(cls, needle: str) -> "Query":
        return cls("name", needle)

    @classmethod
    def by_group(cls, group_id: str) -> "Query":
        return cls("group", group_id)


class RegistryStore:
    """Single-owner mutable store; values it hands out are copies."""

    def __init__(self, kind: str, retention: int = DEFAULT_RETENTION):
        if kind not in _ENTRY_TYPES:
            raise ValueError(f"unknown store kind {kind!r}")
        self.kind = kind
        self.retention = retention
        self.entries: dict[str, ServiceEntry | GroupEntry] = {}
        self.store_version = 0
        self.changelog: deque[ChangeRecord] = deque()
        # All records with version <= compacted_below have been discarded.
        self.compacted_below = 0

    def _append(self, record: ChangeRecord) -> None:
        self.changelog.append(record)
        while len(self.changelog) > self.retention:
            dropped = self.changelog.popleft()
            self.compacted_below = dropped.version

    def upsert(self, entry: ServiceEntry | GroupEntry) -> int:
        entry.validate()
        stored = entry.copy()
        self.store_version += 1
        stored.version = self.store_version
        self.entries[stored.entry_id] = stored
        self._append(
            ChangeRecord(self.store_version, stored.entry_id, ChangeOp.UPSERT,
                         stored.copy())
        )
        return self.store_version

    def remove(self, entry_id: str) -> int:
        if entry_id not in self.entries:
            raise NotFound(entry_id)
        del self.entries[entry_id]
        self.store_version += 1
        self._append(ChangeRecord(self.store_version, entry_id, ChangeOp.DELETE))
        return self.store_version

    def get(self, entry_id: str) -> ServiceEntry | GroupEntry | None:
        entry = self.entries.get(entry_id)
        return entry.copy() if entry is not None else None

    def lookup(self, query: Query) -> list[ServiceEntry | GroupEntry]:
        if query.mode == "id":
            entry = self.entries.get(query.value)
            hits = [entry] if entry is not None else []
        elif query.mode == "name":
            needle = query.value.lower()
            hits = [
                e for e in self.entries.values()
                if any(needle in text.lower() for text in e.search_text())
            ]
        elif query.mode == "group":
            hits = [e for e in self.entries.values() if query.value in e.groups()]
        else:
            raise ValueError(f"unknown query mode {query.mode!r}")
        hits.sort(key=lambda e: (-e.version, e.entry_id))
        return [e.copy() for e in hits]

    def diff_since(self, version: int,
                   page_size: int = DIFF_PAGE_LIMIT) -> list[ChangeRecord]:
        """First page of changelog records newer than ``version``.

        Callers apply the page and repeat from its last version until an
        empty page comes back.
        """
        if version > self.store_version:
            raise InvariantViolation(
                f"diff base {version} is ahead of store version "
                f"{self.store_version}"
            )
        if version < self.compacted_below:
            raise VersionTooOld(
                f"records up to {self.compacted_below} were compacted; "
                f"full sync required"
            )
        page_size = min(page_size, DIFF_PAGE_LIMIT)
        page = [r for r in self.changelog if r.version > version][:page_size]
        return [r.copy() for r in page]

    def apply_change(self, record: ChangeRecord) -> None:
        """Replica-side raw apply; preserves the origin's version numbers."""
        if record.version != self.store_version + 1:
            raise InvariantViolation(
                f"change {record.version} does not follow replica version "
                f"{self.store_version}"
            )
        if record.op is ChangeOp.UPSERT:
            if record.entry is None:
                raise InvariantViolation("upsert record without entry")
            self.entries[record.entry_id] = record.entry.copy()
        else:
            self.entries.pop(record.entry_id, None)
        self.store_version = record.version
        self._append(record.copy())

    def snapshot(self) -> bytes:
        lines = [self.entries[eid].to_element() + b"\n"
                 for eid in sorted(self.entries)]
        body = b"".join(lines)
        header = (
            f"{SNAPSHOT_MAGIC} {self.kind} {self.store_version} "
            f"{len(self.entries)} {zlib.crc32(body):08x}\n"
        )
        return header.encode("utf-8") + body

    def state_equal(self, other: "RegistryStore") -> bool:
        return (self.store_version == other.store_version
                and self.entries == other.entries)


def restore(data: bytes) -> RegistryStore:
    """Rebuild a store from snapshot bytes; raises CorruptSnapshot."""
    newline = data.find(b"\n")
    if newline < 0:
        raise CorruptSnapshot("missing header line")
    try:
        header = data[:newline].decode("utf-8")
    except UnicodeDecodeError:
        raise CorruptSnapshot("undecodable header") from None
    parts = header.split(" ")
    if len(parts) != 6 or " ".join(parts[:2]) != SNAPSHOT_MAGIC:
        raise CorruptSnapshot(f"bad header {header!r}")
    kind, version_text, count_text, crc_text = parts[2:]
    if kind not in _ENTRY_TYPES:
        raise CorruptSnapshot(f"unknown store kind {kind!r}")
    try:
        store_version = int(version_text)
        count = int(count_text)
        crc = int(crc_text, 16)
    except ValueError:
        raise CorruptSnapshot(f"bad header fields {header!r}") from None
    body = data[newline + 1:]
    if zlib.crc32(body) != crc:
        raise CorruptSnapshot("body checksum mismatch")
    store = RegistryStore(kind)
    entry_type = _ENTRY_TYPES[kind]
    lines = body.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if len(lines) != count:
        raise CorruptSnapshot(
            f"header claims {count} entries, body has {len(lines)}"
        )
    for line in lines:
        try:
            entry = entry_type.from_element(line)
            entry.validate()
        except (ParseError, InvariantViolation, ValueError, KeyError) as exc:
            raise CorruptSnapshot(f"bad entry line: {exc}") from None
        if entry.entry_id in store.entries:
            raise CorruptSnapshot(f"duplicate entry id {entry.entry_id!r}")
        if entry.version > store_version:
            raise CorruptSnapshot(
                f"entry {entry.entry_id!r} version {entry.version} exceeds "
                f"store version {store_version}"
            )
        store.entries[entry.entry_id] = entry
    store.store_version = store_version
    store.compacted_below = store_version
    return store
