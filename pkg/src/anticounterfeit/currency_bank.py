"""Central-bank registry binding note serial numbers to UPO fingerprints.

A note is checked in three steps: screen the UPO itself, read its
fingerprint and serial, and ask the issuing bank whether that pair is on
record.  This module is the bank's side of the last step.  Matching is fuzzy
on the fingerprint (similarity against a calibrated threshold) and exact on
the serial.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from datetime import datetime
from enum import Enum
from typing import TYPE_CHECKING
from urllib.parse import quote, unquote

from . import upo
from .timestamps import now_utc, utc

if TYPE_CHECKING:
    from .registry import Event, Registry

NOTE_ENROLLED = "NoteEnrolled"
NOTE_VERIFIED = "NoteVerified"


class DuplicateSerial(Exception):
    pass


class NoteVerdictTag(str, Enum):
    AUTHENTIC = "authentic"
    FINGERPRINT_MISMATCH = "fingerprint_mismatch"
    UNKNOWN_SERIAL = "unknown_serial"
    DUPLICATE_PRESENTATION = "duplicate_presentation"


@dataclass(frozen=True)
class NoteVerdict:
    tag: NoteVerdictTag
    similarity: float | None = None
    advisory: bool = False

    def to_dict(self) -> dict:
        out = {"verdict": self.tag.value}
        if self.similarity is not None:
            out["similarity"] = round(self.similarity, 6)
        if self.advisory:
            out["advisory"] = True
        return out


@dataclass(frozen=True)
class Presentation:
    timestamp: datetime
    similarity: float
    verdict: NoteVerdictTag
    digest: str
    fingerprint: upo.Fingerprint | None = None  # kept for authentic presentations only


@dataclass(frozen=True)
class NoteRecord:
    currency_id: str
    serial: str
    denomination: int
    enrolled_fingerprint: upo.Fingerprint
    enrolled_at: datetime
    presentations: tuple[Presentation, ...] = ()

    @property
    def flagged(self) -> bool:
        """True once any presentation failed; such serials warrant investigation."""
        return any(p.verdict != NoteVerdictTag.AUTHENTIC for p in self.presentations)


def note_key(currency_id: str, serial: str) -> str:
    return f"note/{quote(currency_id, safe='')}/{quote(serial, safe='')}"


def parse_note_key(key: str) -> tuple[str, str]:
    kind, currency, serial = key.split("/")
    if kind != "note":
        raise ValueError(f"not a note key: {key!r}")
    return unquote(currency), unquote(serial)


def fingerprint_digest(fp: upo.Fingerprint) -> str:
    return hashlib.sha256(fp.encode().encode()).hexdigest()


def apply_note_event(record: NoteRecord | None, event: "Event") -> NoteRecord:
    p = event.payload
    if event.kind == NOTE_ENROLLED:
        if record is not None:
            raise ValueError(f"{event.key} enrolled twice")
        currency, serial = parse_note_key(event.key)
        return NoteRecord(
            currency, serial, int(p["denomination"]),
            upo.Fingerprint.from_dict(p["fingerprint"]), event.recorded_at,
        )
    if record is None:
        raise ValueError(f"{event.kind} for unenrolled {event.key}")
    if event.kind == NOTE_VERIFIED:
        fp = p.get("fingerprint")
        presentation = Presentation(
            event.recorded_at, float(p["similarity"]), NoteVerdictTag(p["verdict"]), p["digest"],
            upo.Fingerprint.from_dict(fp) if fp else None,
        )
        return replace(record, presentations=record.presentations + (presentation,))
    raise ValueError(f"unknown note event kind {event.kind!r}")


def decide_note(record: NoteRecord | None, measured: upo.Fingerprint, threshold: float) -> tuple[NoteVerdictTag, float | None]:
    if record is None:
        return NoteVerdictTag.UNKNOWN_SERIAL, None
    if measured.grid_size != record.enrolled_fingerprint.grid_size:
        return NoteVerdictTag.FINGERPRINT_MISMATCH, -1.0
    sim = upo.similarity(record.enrolled_fingerprint, measured)
    if sim < threshold:
        return NoteVerdictTag.FINGERPRINT_MISMATCH, sim
    # Re-measurements of one note always match each other when the threshold
    # sits in the calibration gap, so a miss here means two objects share a serial.
    for prior in record.presentations:
        if prior.fingerprint is not None and upo.similarity(prior.fingerprint, measured) < threshold:
            return NoteVerdictTag.DUPLICATE_PRESENTATION, sim
    return NoteVerdictTag.AUTHENTIC, sim


def offline_check(reference: upo.Fingerprint, measured: upo.Fingerprint,
                  threshold: float = upo.DEFAULT_THRESHOLD) -> bool:
    """Local match without consulting the bank."""
    return upo.match(reference, measured, threshold)


class CentralBank:
    def __init__(
        self,
        registry: "Registry",
        currency_id: str = "EUR",
        threshold: float = upo.DEFAULT_THRESHOLD,
        min_online_denomination: int = 0,
    ):
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        self.registry = registry
        self.currency_id = currency_id
        self.threshold = threshold
        self.min_online_denomination = min_online_denomination

    def key(self, serial: str) -> str:
        return note_key(self.currency_id, serial)

    def lookup(self, serial: str) -> NoteRecord | None:
        return self.registry.lookup(self.key(serial))

    def enroll(self, serial: str, denomination: int, fingerprint: upo.Fingerprint,
               now: datetime | None = None) -> NoteRecord:
        if not isinstance(serial, str) or not serial:
            raise ValueError("serial must be a non-empty string")
        if not isinstance(denomination, int) or isinstance(denomination, bool) or denomination < 1:
            raise ValueError("denomination must be a positive integer (minor units)")
        now = utc(now) if now is not None else now_utc()
        key = self.key(serial)
        with self.registry.lock:
            if self.registry.lookup(key) is not None:
                raise DuplicateSerial(f"serial {serial!r} already enrolled for {self.currency_id}")
            self.registry.append(NOTE_ENROLLED, key, {"denomination": denomination, "fingerprint": fingerprint.to_dict()}, now)
            return self.registry.lookup(key)

    def verify_note(self, serial: str, measured: upo.Fingerprint, threshold: float | None = None,
                    now: datetime | None = None) -> NoteVerdict:
        tau = self.threshold if threshold is None else threshold
        if not 0.0 < tau < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        now = utc(now) if now is not None else now_utc()
        key = self.key(serial)

        def step(record):
            tag, sim = decide_note(record, measured, tau)
            if record is None:
                return NoteVerdict(tag), []
            payload = {
                "verdict": tag.value,
                "similarity": sim,
                "threshold": tau,
                "digest": fingerprint_digest(measured),
                "fingerprint": measured.to_dict() if tag == NoteVerdictTag.AUTHENTIC else None,
            }
            advisory = record.denomination < self.min_online_denomination
            return NoteVerdict(tag, sim, advisory), [(NOTE_VERIFIED, key, payload, now)]

        return self.registry.transact(key, step)
