"""Single-use concealed-code protocol for packaged goods.

Every unit carries public identifiers (manufacturer, product, batch, serial)
and a secret code hidden inside its tamper-evident packaging.  The first
correct presentation of the code is answered ``genuine``; later ones are
answered with the time of that first check, and once a code has been seen
``clone_alert_threshold`` times the answer says so explicitly.

State lives in the registry as an event log.  This module holds the data
types, the pure transition rules (:func:`decide_verification`,
:func:`apply_product_event`) and :class:`ProductAuthority`, which runs them
against a registry under its writer lock.
"""

from __future__ import annotations

import hmac
import random
from dataclasses import dataclass, replace
from datetime import datetime
from enum import Enum
from functools import cached_property
from typing import TYPE_CHECKING, Any
from urllib.parse import quote, unquote

from .codegen import CodePolicy, PolicyInvalid, SecretCode, generate_code
from .timestamps import format_ts, now_utc, utc

if TYPE_CHECKING:
    from .registry import Event, Registry

MAX_FIELD_LENGTH = 128
DEFAULT_CLONE_ALERT_THRESHOLD = 3
RESEAL_BATCH = "reseal"

MINTED = "Minted"
VERIFIED = "Verified"
RESEALED = "Resealed"

PRIMARY = "primary"
INSPECTION = "inspection"


class ProtocolError(Exception):
    pass


class DuplicateBatch(ProtocolError):
    pass


class UnknownIdentity(ProtocolError):
    pass


class AlreadyRetired(ProtocolError):
    pass


class InvalidIdentity(ProtocolError, ValueError):
    pass


class Verdict(str, Enum):
    COUNTERFEIT = "counterfeit"
    GENUINE = "genuine"
    PREVIOUSLY_VERIFIED = "previously_verified"
    CLONE_ALERT = "clone_alert"


class StateTag(str, Enum):
    UNVERIFIED = "Unverified"
    VERIFIED_ONCE = "VerifiedOnce"
    MULTIPLY_CLAIMED = "MultiplyClaimed"
    RETIRED = "Retired"


@dataclass(frozen=True, order=True)
class ProductIdentity:
    manufacturer_id: str
    product_name: str
    batch_number: str
    serial_number: str

    def __post_init__(self):
        for name in ("manufacturer_id", "product_name", "batch_number", "serial_number"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise InvalidIdentity(f"{name} must be a non-empty string")
            if len(value) > MAX_FIELD_LENGTH:
                raise InvalidIdentity(f"{name} longer than {MAX_FIELD_LENGTH} characters")

    @cached_property  # hot path: every lookup and append needs it
    def key(self) -> str:
        parts = (self.manufacturer_id, self.product_name, self.batch_number, self.serial_number)
        return "product/" + "/".join(quote(p, safe="") for p in parts)

    @classmethod
    def from_key(cls, key: str) -> "ProductIdentity":
        kind, *parts = key.split("/")
        if kind != "product" or len(parts) != 4:
            raise InvalidIdentity(f"not a product key: {key!r}")
        return cls(*(unquote(p) for p in parts))

    def to_dict(self) -> dict:
        return {
            "manufacturer_id": self.manufacturer_id,
            "product_name": self.product_name,
            "batch_number": self.batch_number,
            "serial_number": self.serial_number,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProductIdentity":
        return cls(data["manufacturer_id"], data["product_name"], data["batch_number"], data["serial_number"])


@dataclass(frozen=True)
class VerificationState:
    presentation_count: int = 0
    first_verified_at: datetime | None = None
    failed_attempts: int = 0
    retired: bool = False

    @property
    def tag(self) -> StateTag:
        if self.retired:
            return StateTag.RETIRED
        if self.presentation_count == 0:
            return StateTag.UNVERIFIED
        if self.presentation_count == 1:
            return StateTag.VERIFIED_ONCE
        return StateTag.MULTIPLY_CLAIMED


@dataclass(frozen=True)
class ProductRecord:
    identity: ProductIdentity
    secret: SecretCode
    minted_at: datetime
    state: VerificationState = VerificationState()
    inspection_secret: SecretCode | None = None
    inspection_state: VerificationState | None = None
    lineage: ProductIdentity | None = None
    successor: ProductIdentity | None = None

    @property
    def retired(self) -> bool:
        return self.state.retired


@dataclass(frozen=True)
class VerificationOutcome:
    verdict: Verdict
    original_timestamp: datetime | None = None
    presentation_count: int | None = None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"verdict": self.verdict.value}
        if self.original_timestamp is not None:
            out["original_timestamp"] = format_ts(self.original_timestamp)
        if self.presentation_count is not None:
            out["presentation_count"] = self.presentation_count
        return out


def _same_code(stored: SecretCode, presented: str) -> bool:
    raw = stored.raw
    candidate = "".join(ch for ch in presented if ch != "-" and not ch.isspace())
    if raw == raw.upper():
        candidate = candidate.upper()
    return hmac.compare_digest(raw.encode(), candidate.encode())


# --- pure transitions ------------------------------------------------------


def decide_verification(
    record: ProductRecord | None, presented: str, threshold: int = DEFAULT_CLONE_ALERT_THRESHOLD
) -> tuple[VerificationOutcome, dict | None]:
    """Verdict for one presentation and the Verified-event payload to record.

    The payload is None when there is nothing to record (unknown identity).
    """
    counterfeit = VerificationOutcome(Verdict.COUNTERFEIT)
    if record is None:
        return counterfeit, None
    if record.retired:
        return counterfeit, {"verdict": Verdict.COUNTERFEIT.value, "channel": None}

    channel, state = None, None
    if _same_code(record.secret, presented):
        channel, state = PRIMARY, record.state
    elif record.inspection_secret is not None and _same_code(record.inspection_secret, presented):
        channel, state = INSPECTION, record.inspection_state
    if channel is None:
        return counterfeit, {"verdict": Verdict.COUNTERFEIT.value, "channel": None}

    count = state.presentation_count + 1
    if count == 1:
        outcome = VerificationOutcome(Verdict.GENUINE)
    elif count >= threshold:
        outcome = VerificationOutcome(Verdict.CLONE_ALERT, state.first_verified_at, count)
    else:
        outcome = VerificationOutcome(Verdict.PREVIOUSLY_VERIFIED, state.first_verified_at)
    return outcome, {"verdict": outcome.verdict.value, "channel": channel}


def _bump(state: VerificationState, at: datetime) -> VerificationState:
    return replace(
        state,
        presentation_count=state.presentation_count + 1,
        first_verified_at=state.first_verified_at or at,
    )


def apply_product_event(record: ProductRecord | None, event: "Event") -> ProductRecord:
    """Fold one event into the record it concerns."""
    p = event.payload
    if event.kind == MINTED:
        if record is not None:
            raise ValueError(f"{event.key} minted twice")
        inspection = p.get("inspection_secret")
        lineage = p.get("lineage")
        return ProductRecord(
            identity=ProductIdentity.from_key(event.key),
            secret=SecretCode(p["secret"][:-1], p["secret"][-1]),
            minted_at=event.recorded_at,
            inspection_secret=SecretCode(inspection[:-1], inspection[-1]) if inspection else None,
            inspection_state=VerificationState() if inspection else None,
            lineage=ProductIdentity.from_dict(lineage) if lineage else None,
        )
    if record is None:
        raise ValueError(f"{event.kind} event for unminted {event.key}")
    if event.kind == VERIFIED:
        if p["verdict"] == Verdict.COUNTERFEIT.value:
            return replace(record, state=replace(record.state, failed_attempts=record.state.failed_attempts + 1))
        if p["channel"] == INSPECTION:
            return replace(record, inspection_state=_bump(record.inspection_state, event.recorded_at))
        return replace(record, state=_bump(record.state, event.recorded_at))
    if event.kind == RESEALED:
        return replace(
            record,
            state=replace(record.state, retired=True),
            inspection_state=replace(record.inspection_state, retired=True) if record.inspection_state else None,
            successor=ProductIdentity.from_dict(p["successor"]),
        )
    raise ValueError(f"unknown product event kind {event.kind!r}")


def replay_state(events: list["Event"]) -> ProductRecord | None:
    record = None
    for event in events:
        record = apply_product_event(record, event)
    return record


# --- authority -------------------------------------------------------------


def _serial(n: int, width: int) -> str:
    return str(n).zfill(width)


def _now(now: datetime | None) -> datetime:
    return utc(now) if now is not None else now_utc()


class ProductAuthority:
    """Manufacturer-side registry front: mint, verify, reseal, audit."""

    def __init__(
        self,
        registry: "Registry",
        clone_alert_threshold: int = DEFAULT_CLONE_ALERT_THRESHOLD,
        policy: CodePolicy = CodePolicy(),
    ):
        if clone_alert_threshold < 2:
            raise ValueError("clone_alert_threshold must be >= 2")
        policy.validate()
        self.registry = registry
        self.clone_alert_threshold = clone_alert_threshold
        self.policy = policy

    def _fresh_code(self, policy: CodePolicy, rng, taken: set[str]) -> SecretCode:
        while True:
            code = generate_code(policy, rng)
            if code.raw not in taken and not self.registry.secret_in_use(code.raw):
                taken.add(code.raw)
                return code

    def mint_batch(
        self,
        manufacturer_id: str,
        product_name: str,
        batch_number: str,
        count: int,
        policy: CodePolicy | None = None,
        with_inspection_codes: bool = False,
        rng_seed: int | None = None,
        now: datetime | None = None,
    ) -> list[ProductRecord]:
        policy = policy or self.policy
        policy.validate()
        if not isinstance(count, int) or isinstance(count, bool) or count < 1:
            raise PolicyInvalid("count must be a positive integer")
        now = _now(now)
        ProductIdentity(manufacturer_id, product_name, batch_number, "0")  # field validation only
        rng = random.Random(rng_seed) if rng_seed is not None else None
        width = max(6, len(str(count)))

        with self.registry.lock:
            if self.registry.batch_size(manufacturer_id, product_name, batch_number):
                raise DuplicateBatch(f"batch {batch_number!r} already minted for {manufacturer_id}/{product_name}")
            taken: set[str] = set()
            planned = []
            for i in range(1, count + 1):
                identity = ProductIdentity(manufacturer_id, product_name, batch_number, _serial(i, width))
                payload = {"secret": self._fresh_code(policy, rng, taken).raw, "inspection_secret": None, "lineage": None}
                if with_inspection_codes:
                    payload["inspection_secret"] = self._fresh_code(policy, rng, taken).raw
                planned.append((identity, payload))
            for identity, payload in planned:
                self.registry.append(MINTED, identity.key, payload, now)
            return [self.registry.lookup(identity.key) for identity, _ in planned]

    def verify(self, identity: ProductIdentity, presented: str, now: datetime | None = None) -> VerificationOutcome:
        now = _now(now)
        if not isinstance(presented, str):
            presented = ""

        def step(record):
            outcome, payload = decide_verification(record, presented, self.clone_alert_threshold)
            events = [(VERIFIED, identity.key, payload, now)] if payload is not None else []
            return outcome, events

        return self.registry.transact(identity.key, step)

    def reseal(
        self,
        old_identity: ProductIdentity,
        customs_authority_id: str,
        policy: CodePolicy | None = None,
        now: datetime | None = None,
        rng_seed: int | None = None,
    ) -> ProductRecord:
        policy = policy or self.policy
        policy.validate()
        now = _now(now)
        rng = random.Random(rng_seed) if rng_seed is not None else None
        with self.registry.lock:
            old = self.registry.lookup(old_identity.key)
            if old is None:
                raise UnknownIdentity(f"no record for {old_identity.key}")
            if old.retired:
                raise AlreadyRetired(f"{old_identity.key} was already resealed")
            n = self.registry.batch_size(customs_authority_id, old_identity.product_name, RESEAL_BATCH) + 1
            new_identity = ProductIdentity(customs_authority_id, old_identity.product_name, RESEAL_BATCH, _serial(n, 6))
            code = self._fresh_code(policy, rng, set())
            self.registry.append(
                RESEALED, old_identity.key,
                {"successor": new_identity.to_dict(), "authority": customs_authority_id}, now,
            )
            self.registry.append(
                MINTED, new_identity.key,
                {"secret": code.raw, "inspection_secret": None, "lineage": old_identity.to_dict()}, now,
            )
            return self.registry.lookup(new_identity.key)

    def audit(self, identity: ProductIdentity) -> list["Event"]:
        """Event history for ``identity`` with secrets removed."""
        return [redact(e) for e in self.registry.events(identity.key)]

    def lineage_chain(self, identity: ProductIdentity) -> list[ProductIdentity]:
        """``identity`` followed by each predecessor it was resealed from."""
        chain = [identity]
        seen = {identity}
        while True:
            minted = [e for e in self.registry.events(chain[-1].key) if e.kind == MINTED]
            if not minted or not minted[0].payload.get("lineage"):
                return chain
            prev = ProductIdentity.from_dict(minted[0].payload["lineage"])
            if prev in seen:
                raise ValueError("lineage cycle")
            seen.add(prev)
            chain.append(prev)


SECRET_FIELDS = ("secret", "inspection_secret")


def redact(event: "Event") -> "Event":
    if event.kind != MINTED:
        return event
    payload = {k: v for k, v in event.payload.items() if k not in SECRET_FIELDS}
    payload["has_inspection_code"] = bool(event.payload.get("inspection_secret"))
    return replace(event, payload=payload)

