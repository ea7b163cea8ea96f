"""Append-only event log with materialized per-key records.

On disk a registry is one UTF-8 file: a header line
``{"format_version":1,"registry_id":...}`` followed by one JSON event per
line.  A record counts as written once its terminating newline is on disk;
a torn final line is dropped on open.  Everything else in the registry
(current records, batch and secret indexes) is a fold over the events and can
be rebuilt with :func:`replay`.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable

from . import currency_bank, protocol_core
from .timestamps import format_ts, parse_ts, utc

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

PRODUCT_KINDS = {protocol_core.MINTED, protocol_core.VERIFIED, protocol_core.RESEALED}
NOTE_KINDS = {currency_bank.NOTE_ENROLLED, currency_bank.NOTE_VERIFIED}


class RegistryError(Exception):
    pass


class StorageFailure(RegistryError):
    """I/O failed; the caller may retry."""


class CorruptLog(RegistryError):
    pass


@dataclass(frozen=True)
class Event:
    seq: int
    kind: str
    key: str
    payload: dict
    recorded_at: datetime

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "key": self.key,
            "payload": self.payload,
            "recorded_at": format_ts(self.recorded_at),
        }

    def to_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "Event":
        seq = data["seq"]
        if not isinstance(seq, int) or isinstance(seq, bool):
            raise ValueError("seq must be an integer")
        if not isinstance(data["payload"], dict):
            raise ValueError("payload must be an object")
        return cls(seq, str(data["kind"]), str(data["key"]), data["payload"], parse_ts(data["recorded_at"]))


def header_line(registry_id: str) -> str:
    return json.dumps({"format_version": FORMAT_VERSION, "registry_id": registry_id},
                      sort_keys=True, separators=(",", ":")) + "\n"


def apply_event(records: dict[str, Any], event: Event) -> None:
    if event.kind in PRODUCT_KINDS:
        records[event.key] = protocol_core.apply_product_event(records.get(event.key), event)
    elif event.kind in NOTE_KINDS:
        records[event.key] = currency_bank.apply_note_event(records.get(event.key), event)
    else:
        raise ValueError(f"unknown event kind {event.kind!r}")


@dataclass
class ScanResult:
    registry_id: str | None
    events: list[Event]
    valid_bytes: int  # offset just past the last committed line
    torn_tail: bool


def scan(data: bytes) -> ScanResult:
    """Parse raw log bytes, tolerating only a torn final record."""
    lines = data.split(b"\n")
    tail = lines.pop()  # bytes after the last newline; non-empty means a torn write
    torn = bool(tail)
    if not lines:
        return ScanResult(None, [], 0, torn)

    offset = 0
    try:
        header = json.loads(lines[0])
        registry_id = header["registry_id"]
        version = header["format_version"]
    except (ValueError, KeyError, TypeError):
        if len(lines) == 1:
            return ScanResult(None, [], 0, True)
        raise CorruptLog("malformed header") from None
    if version != FORMAT_VERSION:
        raise CorruptLog(f"unsupported format_version {version!r}")
    offset = len(lines[0]) + 1

    events: list[Event] = []
    for i, raw in enumerate(lines[1:], start=1):
        try:
            event = Event.from_dict(json.loads(raw))
        except (ValueError, KeyError, TypeError) as exc:
            if i == len(lines) - 1 and not torn:
                # the final record is the only one a crash can have damaged
                torn = True
                break
            raise CorruptLog(f"malformed record on line {i + 1}: {exc}") from None
        expected = len(events) + 1
        if event.seq != expected:
            raise CorruptLog(f"sequence gap on line {i + 1}: expected {expected}, found {event.seq}")
        events.append(event)
        offset += len(raw) + 1
    return ScanResult(registry_id, events, offset, torn)


def replay(events: Iterable[Event]) -> dict[str, Any]:
    """Materialize every key's record from an event sequence."""
    records: dict[str, Any] = {}
    for event in events:
        apply_event(records, event)
    return records


def replay_bytes(data: bytes) -> dict[str, Any]:
    return replay(scan(data).events)


class Registry:
    """Event store with a single writer.

    ``path=None`` keeps the log in memory only.  Reads go through the
    materialized records and never block; writes and read-modify-write
    transactions hold :attr:`lock`.
    """

    def __init__(self, path: str | os.PathLike | None = None, registry_id: str = "default", fsync: bool = False):
        self.path = Path(path) if path is not None else None
        self.registry_id = registry_id
        self.fsync = fsync
        self.lock = threading.RLock()
        self._records: dict[str, Any] = {}
        self._events: dict[str, list[Event]] = {}
        self._batches: dict[tuple[str, str, str], int] = {}
        self._secrets: set[str] = set()
        self._seq = 0
        self._fh = None
        if self.path is not None:
            self._open_file()

    def _open_file(self) -> None:
        try:
            data = self.path.read_bytes() if self.path.exists() else b""
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc
        result = scan(data)
        try:
            if result.registry_id is None:
                self.path.write_bytes(header_line(self.registry_id).encode())
            else:
                self.registry_id = result.registry_id
                if result.valid_bytes < len(data):
                    log.warning("discarding %d torn bytes at end of %s", len(data) - result.valid_bytes, self.path)
                    with open(self.path, "r+b") as fh:
                        fh.truncate(result.valid_bytes)
            self._fh = open(self.path, "ab")
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc
        for event in result.events:
            self._apply(event)

    def close(self) -> None:
        with self.lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _apply(self, event: Event) -> None:
        apply_event(self._records, event)
        self._events.setdefault(event.key, []).append(event)
        self._seq = event.seq
        if event.kind == protocol_core.MINTED:
            self._index_mint(event)

    def append(self, kind: str, key: str, payload: dict, recorded_at: datetime) -> int:
        """Write one event and fold it into the materialized state.

        Returns the assigned sequence number.  The event is on disk (flushed,
        and fsynced if configured) before this returns.
        """
        with self.lock:
            event = Event(self._seq + 1, kind, key, payload, utc(recorded_at))
            # fold first: a rejected event must never reach the log
            probe = {key: self._records.get(key)}
            apply_event(probe, event)
            if self._fh is not None:
                try:
                    self._fh.write(event.to_line().encode("utf-8"))
                    self._fh.flush()
                    if self.fsync:
                        os.fsync(self._fh.fileno())
                except OSError as exc:
                    raise StorageFailure(str(exc)) from exc
            self._records[key] = probe[key]
            self._events.setdefault(key, []).append(event)
            self._seq = event.seq
            if kind == protocol_core.MINTED:
                self._index_mint(event)
            return event.seq

    def _index_mint(self, event: Event) -> None:
        ident = protocol_core.ProductIdentity.from_key(event.key)
        batch = (ident.manufacturer_id, ident.product_name, ident.batch_number)
        self._batches[batch] = self._batches.get(batch, 0) + 1
        for name in protocol_core.SECRET_FIELDS:
            if event.payload.get(name):
                self._secrets.add(event.payload[name])

    def transact(self, key: str, step: Callable[[Any], tuple[Any, list]]) -> Any:
        """Atomically read ``key``, let ``step`` decide, and append its events.

        ``step(record)`` returns ``(result, [(kind, key, payload, recorded_at), ...])``.
        """
        with self.lock:
            result, events = step(self._records.get(key))
            for kind, k, payload, at in events:
                self.append(kind, k, payload, at)
            return result

    def lookup(self, key: str) -> Any:
        return self._records.get(key)

    def events(self, key: str) -> list[Event]:
        return list(self._events.get(key, ()))

    def all_events(self) -> list[Event]:
        merged = [e for evs in self._events.values() for e in evs]
        merged.sort(key=lambda e: e.seq)
        return merged

    def snapshot(self) -> dict[str, Any]:
        with self.lock:
            return dict(self._records)

    def batch_size(self, manufacturer_id: str, product_name: str, batch_number: str) -> int:
        return self._batches.get((manufacturer_id, product_name, batch_number), 0)

    def secret_in_use(self, raw: str) -> bool:
        return raw in self._secrets

    @property
    def last_seq(self) -> int:
        return self._seq

    def __len__(self) -> int:
        return self._seq

    def keys(self) -> list[str]:
        return list(self._records)
