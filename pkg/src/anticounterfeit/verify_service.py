"""HTTP front door for verification.

The whole industry publishes one verification address; a label pointing
anywhere else is itself evidence of a counterfeit
(:func:`classify_label_domain`).  :class:`VerifyApp` implements the
endpoints as a plain ``request -> Response`` function so that it can be
driven directly in tests; :func:`make_server` mounts it on the stdlib
threading HTTP server.

Endpoints::

    POST /v1/verify          public, rate limited
    POST /v1/mint            operator token; the only response carrying codes
    POST /v1/reseal          customs token; discloses the replacement code once
    GET  /v1/audit/{manufacturer}/{product}/{batch}/{serial}
    POST /v1/notes/enroll    operator token
    POST /v1/notes/verify    note token required when restricted_note_mode is on
    GET  /v1/domains
    GET  /v1/domains/{domain}
"""

from __future__ import annotations

import hmac
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field, fields
from datetime import datetime
from enum import Enum
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable
from urllib.parse import unquote, urlsplit

from . import upo
from .codegen import PolicyInvalid
from .currency_bank import CentralBank, DuplicateSerial
from .protocol_core import (
    AlreadyRetired,
    DuplicateBatch,
    InvalidIdentity,
    ProductAuthority,
    ProductIdentity,
    UnknownIdentity,
)
from .registry import Registry, StorageFailure
from .timestamps import format_ts, now_utc

log = logging.getLogger(__name__)

ENV_PREFIX = "ANTICF_"


# --- common-knowledge domain rule -----------------------------------------


class MalformedDomain(ValueError):
    pass


class DomainClass(str, Enum):
    CANONICAL_ENDPOINT = "canonical_endpoint"
    COUNTERFEIT_INDICATOR = "counterfeit_indicator"


_LABEL = re.compile(r"^(?!-)[a-z0-9-]{1,63}(?<!-)$")


def normalize_domain(domain: str) -> str:
    """Lowercase, drop one trailing dot, IDNA-encode; raise MalformedDomain otherwise."""
    if not isinstance(domain, str):
        raise MalformedDomain("domain must be a string")
    name = domain.strip()
    if name.endswith("."):
        name = name[:-1]
    if not name:
        raise MalformedDomain("empty domain")
    try:
        name = name.encode("idna").decode("ascii").lower()
    except UnicodeError as exc:
        raise MalformedDomain(f"{domain!r}: {exc}") from None
    labels = name.split(".")
    if len(name) > 253 or not all(_LABEL.match(label) for label in labels):
        raise MalformedDomain(f"{domain!r} is not a hostname")
    return name


class DomainRegistry:
    """The published verification address plus any registered aliases."""

    def __init__(self, canonical_domains):
        self.canonical_domains = frozenset(normalize_domain(d) for d in canonical_domains)
        if not self.canonical_domains:
            raise ValueError("at least one canonical domain is required")

    def __contains__(self, domain: str) -> bool:
        return normalize_domain(domain) in self.canonical_domains


def classify_label_domain(label_domain: str, registry: DomainRegistry) -> DomainClass:
    if normalize_domain(label_domain) in registry.canonical_domains:
        return DomainClass.CANONICAL_ENDPOINT
    return DomainClass.COUNTERFEIT_INDICATOR


# --- rate limiting ----------------------------------------------------------


@dataclass(frozen=True)
class RateLimitPolicy:
    bucket_capacity: int = 10
    refill_per_minute: int = 5

    def __post_init__(self):
        if self.bucket_capacity < 1 or self.refill_per_minute < 1:
            raise ValueError("bucket_capacity and refill_per_minute must be >= 1")


class RateLimiter:
    """Token buckets keyed by arbitrary hashables.

    A request names several keys (client address, product identity); it is
    admitted only if every bucket has a token, and then takes one from each.
    """

    def __init__(self, policy: RateLimitPolicy = RateLimitPolicy(), clock: Callable[[], float] = time.monotonic):
        self.policy = policy
        self.clock = clock
        self._rate = policy.refill_per_minute / 60.0
        self._buckets: dict[Any, tuple[float, float]] = {}
        self._lock = threading.Lock()

    def _level(self, key, now: float) -> float:
        tokens, last = self._buckets.get(key, (float(self.policy.bucket_capacity), now))
        return min(float(self.policy.bucket_capacity), tokens + (now - last) * self._rate)

    def acquire(self, *keys) -> float | None:
        """Take a token from every bucket; None if admitted, else seconds to wait."""
        with self._lock:
            now = self.clock()
            levels = {k: self._level(k, now) for k in keys}
            short = [lvl for lvl in levels.values() if lvl < 1.0]
            if short:
                return (1.0 - min(short)) / self._rate
            for k, lvl in levels.items():
                self._buckets[k] = (lvl - 1.0, now)
            return None


# --- configuration ----------------------------------------------------------


@dataclass
class ServiceConfig:
    listen: str = "127.0.0.1:8080"
    registry_path: str | None = "registry.log"
    registry_id: str = "default"
    fsync: bool = False
    canonical_domains: list[str] = field(default_factory=lambda: ["verify.pharma-auth.example"])
    bucket_capacity: int = 10
    refill_per_minute: int = 5
    clone_alert_threshold: int = 3
    currencies: list[str] = field(default_factory=lambda: ["EUR"])
    match_threshold: float = upo.DEFAULT_THRESHOLD
    restricted_note_mode: bool = False
    min_online_denomination: int = 0
    operator_tokens: list[str] = field(default_factory=list)
    customs_tokens: list[str] = field(default_factory=list)
    note_tokens: list[str] = field(default_factory=list)

    @property
    def rate_limit(self) -> RateLimitPolicy:
        return RateLimitPolicy(self.bucket_capacity, self.refill_per_minute)

    @property
    def address(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, env: dict | None = None) -> "ServiceConfig":
        """Read a JSON config file, then apply ``ANTICF_<KEY>`` environment overrides."""
        data: dict[str, Any] = {}
        if path is not None:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            if not isinstance(data, dict):
                raise ValueError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        env = os.environ if env is None else env
        defaults = cls()
        for name in known:
            raw = env.get(ENV_PREFIX + name.upper())
            if raw is not None:
                data[name] = _coerce(raw, getattr(defaults, name))
        return cls(**data)


def _coerce(raw: str, like: Any) -> Any:
    if isinstance(like, bool):
        return raw.strip().lower() in {"1", "true", "yes", "on"}
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, list):
        return [item.strip() for item in raw.split(",") if item.strip()]
    if like is None and raw == "":
        return None
    return raw


# --- application -------------------------------------------------------------


@dataclass
class Response:
    status: int
    body: dict | None = None
    headers: list[tuple[str, str]] = field(default_factory=list)

    def payload(self) -> bytes:
        if self.body is None:
            return b""
        return json.dumps(self.body, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    def header_lines(self) -> list[tuple[str, str]]:
        return [
            ("Content-Type", "application/json"),
            ("Content-Length", str(len(self.payload()))),
            *self.headers,
            ("Connection", "close"),
        ]

    def to_bytes(self) -> bytes:
        status = HTTPStatus(self.status)
        head = f"HTTP/1.1 {status.value} {status.phrase}\r\n"
        head += "".join(f"{k}: {v}\r\n" for k, v in self.header_lines())
        return head.encode("latin-1") + b"\r\n" + self.payload()


class HTTPError(Exception):
    def __init__(self, status: int, message: str, headers: list | None = None):
        super().__init__(message)
        self.status = status
        self.message = message
        self.headers = headers or []


def _error(status: int, message: str) -> HTTPError:
    return HTTPError(status, message)


IDENTITY_FIELDS = ("manufacturer_id", "product_name", "batch_number", "serial_number")


class VerifyApp:
    def __init__(
        self,
        config: ServiceConfig,
        registry: Registry | None = None,
        clock: Callable[[], datetime] = now_utc,
        monotonic: Callable[[], float] = time.monotonic,
    ):
        self.config = config
        self.registry = registry if registry is not None else Registry(
            config.registry_path, config.registry_id, fsync=config.fsync
        )
        self.clock = clock
        self.domains = DomainRegistry(config.canonical_domains)
        self.authority = ProductAuthority(self.registry, config.clone_alert_threshold)
        self.banks = {
            c: CentralBank(self.registry, c, config.match_threshold, config.min_online_denomination)
            for c in config.currencies
        }
        self.limiter = RateLimiter(config.rate_limit, monotonic)

    # request plumbing

    def handle(self, method: str, target: str, headers: dict[str, str] | None = None,
               body: bytes = b"", client: str = "unknown") -> Response:
        headers = {k.lower(): v for k, v in (headers or {}).items()}
        path = urlsplit(target).path
        try:
            return self._route(method.upper(), path, headers, body, client)
        except HTTPError as exc:
            return Response(exc.status, {"error": exc.message}, exc.headers)
        except StorageFailure as exc:
            log.error("storage failure: %s", exc)
            return Response(503, {"error": "storage unavailable, retry later"})

    def _route(self, method, path, headers, body, client) -> Response:
        parts = [unquote(p) for p in path.strip("/").split("/")]
        if parts[:1] != ["v1"] or len(parts) < 2:
            raise _error(404, "not found")
        route = parts[1]
        routes = {
            ("POST", "verify"): lambda: self.verify(self._json(body), client),
            ("POST", "mint"): lambda: self.mint(self._json(body), headers),
            ("POST", "reseal"): lambda: self.reseal(self._json(body), headers),
            ("GET", "audit"): lambda: self.audit(parts[2:]),
            ("GET", "domains"): lambda: self.domains_endpoint(parts[2:]),
        }
        if route == "notes" and len(parts) == 3:
            if (method, parts[2]) == ("POST", "verify"):
                return self.note_verify(self._json(body), headers, client)
            if (method, parts[2]) == ("POST", "enroll"):
                return self.note_enroll(self._json(body), headers)
        handler = routes.get((method, route))
        if handler is None or (route not in ("audit", "domains") and len(parts) != 2):
            known = any(r == route for _, r in routes) or route == "notes"
            raise _error(405 if known else 404, "method not allowed" if known else "not found")
        return handler()

    @staticmethod
    def _json(body: bytes) -> dict:
        try:
            data = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            raise _error(400, "body must be a JSON object") from None
        if not isinstance(data, dict):
            raise _error(400, "body must be a JSON object")
        return data

    @staticmethod
    def _strings(data: dict, names) -> list[str]:
        out = []
        for name in names:
            value = data.get(name)
            if not isinstance(value, str):
                raise _error(400, f"missing or non-string field {name!r}")
            out.append(value)
        return out

    def _identity(self, data: dict) -> ProductIdentity:
        try:
            return ProductIdentity(*self._strings(data, IDENTITY_FIELDS))
        except InvalidIdentity as exc:
            raise _error(400, str(exc)) from None

    @staticmethod
    def _bearer(headers: dict) -> str | None:
        auth = headers.get("authorization", "")
        scheme, _, token = auth.partition(" ")
        return token.strip() if scheme.lower() == "bearer" and token.strip() else None

    def _require(self, headers: dict, tokens: list[str]) -> None:
        token = self._bearer(headers)
        if token is None or not any(hmac.compare_digest(token.encode(), t.encode()) for t in tokens):
            raise HTTPError(401, "missing or invalid credential", [("WWW-Authenticate", "Bearer")])

    def _throttle(self, *keys) -> None:
        wait = self.limiter.acquire(*keys)
        if wait is not None:
            seconds = max(1, math.ceil(wait))
            raise HTTPError(429, "rate limited", [("Retry-After", str(seconds))])

    def _bank(self, data: dict) -> CentralBank:
        (currency,) = self._strings(data, ["currency_id"])
        bank = self.banks.get(currency)
        if bank is None:
            raise _error(400, f"unknown currency_id {currency!r}")
        return bank

    @staticmethod
    def _fingerprint(data: dict) -> upo.Fingerprint:
        raw = data.get("fingerprint")
        if not isinstance(raw, dict):
            raise _error(400, "missing fingerprint object")
        try:
            return upo.Fingerprint.from_dict(raw)
        except ValueError as exc:
            raise _error(400, f"bad fingerprint: {exc}") from None

    # endpoints

    def verify(self, data: dict, client: str) -> Response:
        identity = self._identity(data)
        (code,) = self._strings(data, ["code"])
        self._throttle(("client", client), ("identity", identity.key))
        outcome = self.authority.verify(identity, code, self.clock())
        return Response(200, outcome.to_dict())

    def mint(self, data: dict, headers: dict) -> Response:
        self._require(headers, self.config.operator_tokens)
        m, p, b = self._strings(data, IDENTITY_FIELDS[:3])
        count = data.get("count")
        inspection = data.get("inspection_codes", False)
        if not isinstance(count, int) or isinstance(count, bool) or count < 1:
            raise _error(400, "count must be a positive integer")
        if not isinstance(inspection, bool):
            raise _error(400, "inspection_codes must be a boolean")
        try:
            records = self.authority.mint_batch(m, p, b, count, with_inspection_codes=inspection, now=self.clock())
        except DuplicateBatch as exc:
            raise _error(409, str(exc)) from None
        except (InvalidIdentity, PolicyInvalid) as exc:
            raise _error(400, str(exc)) from None
        out = []
        for rec in records:
            item = {**rec.identity.to_dict(), "code": rec.secret.display()}
            if rec.inspection_secret is not None:
                item["inspection_code"] = rec.inspection_secret.display()
            out.append(item)
        return Response(201, {"records": out})

    def reseal(self, data: dict, headers: dict) -> Response:
        self._require(headers, self.config.customs_tokens)
        identity = self._identity(data)
        (authority,) = self._strings(data, ["customs_authority_id"])
        try:
            rec = self.authority.reseal(identity, authority, now=self.clock())
        except UnknownIdentity as exc:
            raise _error(404, str(exc)) from None
        except AlreadyRetired as exc:
            raise _error(409, str(exc)) from None
        except InvalidIdentity as exc:
            raise _error(400, str(exc)) from None
        body = {**rec.identity.to_dict(), "code": rec.secret.display(), "lineage": identity.to_dict()}
        return Response(201, body)

    def audit(self, parts: list[str]) -> Response:
        if len(parts) != 4:
            raise _error(404, "audit path is /v1/audit/{manufacturer}/{product}/{batch}/{serial}")
        try:
            identity = ProductIdentity(*parts)
        except InvalidIdentity as exc:
            raise _error(400, str(exc)) from None
        events = [e.to_dict() for e in self.authority.audit(identity)]
        return Response(200, {"identity": identity.to_dict(), "events": events})

    def domains_endpoint(self, parts: list[str]) -> Response:
        if not parts:
            return Response(200, {"canonical_domains": sorted(self.domains.canonical_domains)})
        if len(parts) != 1:
            raise _error(404, "not found")
        try:
            verdict = classify_label_domain(parts[0], self.domains)
        except MalformedDomain as exc:
            raise _error(400, str(exc)) from None
        return Response(200, {"domain": parts[0], "classification": verdict.value})

    def note_enroll(self, data: dict, headers: dict) -> Response:
        self._require(headers, self.config.operator_tokens)
        bank = self._bank(data)
        (serial,) = self._strings(data, ["serial"])
        denomination = data.get("denomination")
        if not isinstance(denomination, int) or isinstance(denomination, bool) or denomination < 1:
            raise _error(400, "denomination must be a positive integer")
        fp = self._fingerprint(data)
        try:
            rec = bank.enroll(serial, denomination, fp, self.clock())
        except DuplicateSerial as exc:
            raise _error(409, str(exc)) from None
        except ValueError as exc:
            raise _error(400, str(exc)) from None
        return Response(201, {
            "currency_id": rec.currency_id,
            "serial": rec.serial,
            "denomination": rec.denomination,
            "enrolled_at": format_ts(rec.enrolled_at),
        })

    def note_verify(self, data: dict, headers: dict, client: str) -> Response:
        if self.config.restricted_note_mode:
            self._require(headers, self.config.note_tokens + self.config.operator_tokens)
        bank = self._bank(data)
        (serial,) = self._strings(data, ["serial"])
        fp = self._fingerprint(data)
        self._throttle(("client", client), ("note", bank.key(serial)))
        verdict = bank.verify_note(serial, fp, now=self.clock())
        return Response(200, verdict.to_dict())


# --- server -------------------------------------------------------------------

MAX_BODY = 1 << 20


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    app: VerifyApp  # set on the subclass built by make_server

    def _dispatch(self):
        try:
            length = int(self.headers.get("Content-Length") or 0)
        except ValueError:
            length = -1
        if length < 0:
            resp = Response(400, {"error": "bad Content-Length"})
        elif length > MAX_BODY:
            resp = Response(413, {"error": "body too large"})
        else:
            body = self.rfile.read(length) if length else b""
            resp = self.app.handle(self.command, self.path, dict(self.headers.items()), body, self.client_address[0])
        self.send_response_only(resp.status)
        for k, v in resp.header_lines():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(resp.payload())
        self.close_connection = True

    do_GET = _dispatch
    do_POST = _dispatch

    def log_message(self, fmt, *args):
        log.info("%s %s", self.address_string(), fmt % args)


def make_server(app: VerifyApp, address: tuple[str, int] | None = None) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"app": app})
    server = ThreadingHTTPServer(address or app.config.address, handler)
    server.daemon_threads = True
    return server


def serve(config: ServiceConfig) -> None:
    app = VerifyApp(config)
    server = make_server(app)
    host, port = server.server_address[:2]
    log.info("listening on %s:%s", host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        app.registry.close()
