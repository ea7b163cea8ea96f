"""Counterfeiting scenarios played through the real protocol.

Bob (the manufacturer, or a central bank) issues genuine goods; Mallory
injects counterfeits built with one strategy; everything is sold in a random
order and each buyer (Alice) checks her item with probability
``consumer_verify_rate``.  Checks go through the same :class:`ProductAuthority`,
:class:`CentralBank` and domain rule the service uses, so the reported rates
are what the protocol actually delivers against that strategy.

Runs are deterministic per seed.  Each item draws one uniform number that
decides whether its buyer checks it, so runs that differ only in
``consumer_verify_rate`` are coupled.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Any

import numpy as np

from . import upo
from .codegen import CodePolicy, generate_code
from .currency_bank import CentralBank, NoteVerdictTag
from .protocol_core import ProductAuthority, ProductIdentity, Verdict
from .registry import Registry
from .verify_service import DomainClass, DomainRegistry, classify_label_domain

SCHEMA_VERSION = 1
CANONICAL_DOMAIN = "verify.pharma-auth.example"
MALLORY_DOMAIN = "verify.pharma-auth-secure.example"
EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)

PRODUCT_STRATEGIES = {"HonestSupply", "CloneOneCode", "RandomGuessCode", "OwnWebsiteLabel", "NoCodeAtAll"}
NOTE_STRATEGIES = {"NotePrintedInk", "NoteCandyBar", "NoteSerialReuse"}

LABEL_REJECTED = "label_domain_rejected"
MISSING_CODE = "missing_code"
ACCEPTED = {Verdict.GENUINE.value, NoteVerdictTag.AUTHENTIC.value}


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class Strategy:
    tag: str
    copies: int | None = None
    dpi: float | None = None
    fidelity: float | None = None

    def validate(self) -> None:
        if self.tag not in PRODUCT_STRATEGIES | NOTE_STRATEGIES:
            raise ConfigInvalid(f"unknown strategy {self.tag!r}")
        if self.tag == "CloneOneCode" and (self.copies is None or self.copies < 2):
            raise ConfigInvalid("CloneOneCode needs copies >= 2")
        if self.tag == "NotePrintedInk" and not (self.dpi and self.dpi > 0):
            raise ConfigInvalid("NotePrintedInk needs dpi > 0")
        if self.tag == "NoteCandyBar" and not (self.fidelity is not None and 0 <= self.fidelity <= 1):
            raise ConfigInvalid("NoteCandyBar needs fidelity in [0, 1]")

    @property
    def is_note(self) -> bool:
        return self.tag in NOTE_STRATEGIES

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"tag": self.tag}
        for name in ("copies", "dpi", "fidelity"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Strategy":
        unknown = set(data) - {"tag", "copies", "dpi", "fidelity"}
        if unknown:
            raise ConfigInvalid(f"unknown strategy fields {sorted(unknown)}")
        return cls(data["tag"], data.get("copies"), data.get("dpi"), data.get("fidelity"))

    def __str__(self) -> str:
        params = ", ".join(f"{k}={v}" for k, v in self.to_dict().items() if k != "tag")
        return f"{self.tag}({params})" if params else self.tag


@dataclass(frozen=True)
class ScenarioConfig:
    n_genuine: int
    n_counterfeit: int
    strategy: Strategy
    consumer_verify_rate: float = 1.0
    clone_alert_threshold: int = 3
    rng_seed: int = 0
    sell_fraction: float = 1.0
    code_policy: CodePolicy = CodePolicy()
    match_threshold: float = upo.DEFAULT_THRESHOLD

    def validate(self) -> None:
        self.strategy.validate()
        if self.n_genuine < 0 or self.n_counterfeit < 0:
            raise ConfigInvalid("populations must be >= 0")
        if not 0.0 <= self.consumer_verify_rate <= 1.0:
            raise ConfigInvalid("consumer_verify_rate must lie in [0, 1]")
        if not 0.0 <= self.sell_fraction <= 1.0:
            raise ConfigInvalid("sell_fraction must lie in [0, 1]")
        if self.clone_alert_threshold < 2:
            raise ConfigInvalid("clone_alert_threshold must be >= 2")
        counterfeits = 0 if self.strategy.tag == "HonestSupply" else self.n_counterfeit
        if counterfeits and self.n_genuine == 0:
            raise ConfigInvalid(f"{self.strategy.tag} copies genuine items, so n_genuine must be >= 1")
        if self.strategy.tag == "CloneOneCode":
            groups = math.ceil(self.n_counterfeit / self.strategy.copies)
            if groups > self.n_genuine:
                raise ConfigInvalid(f"{groups} cloned codes needed but only {self.n_genuine} genuine items")

    def to_dict(self) -> dict:
        return {
            "n_genuine": self.n_genuine,
            "n_counterfeit": self.n_counterfeit,
            "strategy": self.strategy.to_dict(),
            "consumer_verify_rate": self.consumer_verify_rate,
            "clone_alert_threshold": self.clone_alert_threshold,
            "rng_seed": self.rng_seed,
            "sell_fraction": self.sell_fraction,
            "match_threshold": self.match_threshold,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        try:
            strategy = Strategy.from_dict(data.pop("strategy"))
            policy = data.pop("code_policy", None)
            cfg = cls(strategy=strategy, **data)
        except (KeyError, TypeError) as exc:
            raise ConfigInvalid(f"bad scenario: {exc}") from None
        if policy is not None:
            cfg = replace(cfg, code_policy=CodePolicy(**policy))
        return cfg


@dataclass
class Item:
    counterfeit: bool
    label_domain: str = CANONICAL_DOMAIN
    identity: ProductIdentity | None = None
    code: str | None = None
    code_group: int | None = None  # genuine index whose code this item carries (clone strategy)
    serial: str | None = None
    note: Any = None  # FleckMap or Forgery presented at the bank


@dataclass
class Presentation:
    item: int
    counterfeit: bool
    checked: bool
    verdict: str | None
    code_group: int | None


@dataclass
class ScenarioReport:
    config: ScenarioConfig
    total_genuine: int
    total_counterfeit: int
    sold_counterfeit: int
    checked_counterfeit: int
    detected_counterfeit: int
    checked_genuine: int
    flagged_genuine: int
    cloned_code_verifiers: int
    cloned_code_flagged: int
    histogram: dict[str, int]
    presentations: list[Presentation] = field(repr=False, default_factory=list)

    @property
    def unsold_counterfeit(self) -> int:
        return self.total_counterfeit - self.sold_counterfeit

    @property
    def undetected_counterfeits(self) -> int:
        return self.sold_counterfeit - self.detected_counterfeit

    @property
    def detection_at_point_of_check(self) -> float | None:
        if not self.checked_counterfeit:
            return None
        return self.detected_counterfeit / self.checked_counterfeit

    @property
    def cumulative_detection(self) -> float | None:
        if not self.sold_counterfeit:
            return None
        return self.detected_counterfeit / self.sold_counterfeit

    @property
    def false_accusations(self) -> float:
        return self.flagged_genuine / self.checked_genuine if self.checked_genuine else 0.0

    @property
    def cloned_code_detection(self) -> float | None:
        """Share of everyone who checked a cloned code and was told it was not genuine."""
        if not self.cloned_code_verifiers:
            return None
        return self.cloned_code_flagged / self.cloned_code_verifiers

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "detection_at_point_of_check": self.detection_at_point_of_check,
            "cumulative_detection": self.cumulative_detection,
            "false_accusations": self.false_accusations,
            "undetected_counterfeits": self.undetected_counterfeits,
            "counts": {
                "total_genuine": self.total_genuine,
                "total_counterfeit": self.total_counterfeit,
                "sold_counterfeit": self.sold_counterfeit,
                "unsold_counterfeit": self.unsold_counterfeit,
                "checked_counterfeit": self.checked_counterfeit,
                "detected_counterfeit": self.detected_counterfeit,
                "checked_genuine": self.checked_genuine,
                "flagged_genuine": self.flagged_genuine,
                "cloned_code_verifiers": self.cloned_code_verifiers,
                "cloned_code_flagged": self.cloned_code_flagged,
            },
            "cloned_code_detection": self.cloned_code_detection,
            "histogram": dict(sorted(self.histogram.items())),
        }

    def to_table(self) -> str:
        def fmt(v):
            if v is None:
                return "n/a"
            if isinstance(v, float):
                return f"{v:.4f}"
            return str(v)

        rows = [
            ("strategy", str(self.config.strategy)),
            ("seed", self.config.rng_seed),
            ("consumer_verify_rate", self.config.consumer_verify_rate),
            ("detection_at_point_of_check", self.detection_at_point_of_check),
            ("cumulative_detection", self.cumulative_detection),
            ("false_accusations", self.false_accusations),
            ("undetected_counterfeits", self.undetected_counterfeits),
            ("cloned_code_detection", self.cloned_code_detection),
        ]
        rows += [(k, v) for k, v in self.to_dict()["counts"].items()]
        rows += [(f"verdict[{k}]", v) for k, v in sorted(self.histogram.items())]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {fmt(v)}" for k, v in rows)


# --- scenario construction --------------------------------------------------


def _build_products(cfg: ScenarioConfig, rng: random.Random, authority: ProductAuthority) -> list[Item]:
    records = []
    if cfg.n_genuine:
        records = authority.mint_batch("bob", "drug", "B1", cfg.n_genuine, policy=cfg.code_policy,
                                       rng_seed=rng.getrandbits(64), now=EPOCH)
    items = [Item(False, identity=r.identity, code=r.secret.display(cfg.code_policy)) for r in records]
    tag = cfg.strategy.tag
    n = 0 if tag == "HonestSupply" else cfg.n_counterfeit
    for k in range(n):
        if tag == "CloneOneCode":
            g = k // cfg.strategy.copies
            items[g].code_group = g
            items.append(Item(True, identity=records[g].identity, code=items[g].code, code_group=g))
        elif tag == "RandomGuessCode":
            target = rng.choice(records)
            guess = generate_code(cfg.code_policy, rng).display(cfg.code_policy)
            items.append(Item(True, identity=target.identity, code=guess))
        elif tag == "OwnWebsiteLabel":
            target = rng.choice(records)
            fake = generate_code(cfg.code_policy, rng).display(cfg.code_policy)
            items.append(Item(True, label_domain=MALLORY_DOMAIN, identity=target.identity, code=fake))
        elif tag == "NoCodeAtAll":
            items.append(Item(True, identity=rng.choice(records).identity, code=None))
    return items


def _build_notes(cfg: ScenarioConfig, rng: random.Random, bank: CentralBank) -> list[Item]:
    fab = upo.FabricationParams()
    sensor = upo.SensorParams()
    items = []
    for i in range(cfg.n_genuine):
        note = upo.fabricate(replace(fab, rng_seed=rng.getrandbits(63)))
        serial = f"S{i:08d}"
        bank.enroll(serial, 5000, upo.measure(note, replace(sensor, rng_seed=rng.getrandbits(63))), EPOCH)
        items.append(Item(False, serial=serial, note=note))
    s = cfg.strategy
    for k in range(cfg.n_counterfeit):
        target = items[k % cfg.n_genuine]
        scan = upo.measure(target.note, replace(sensor, rng_seed=rng.getrandbits(63)))
        if s.tag == "NotePrintedInk":
            fake = upo.approximate_clone(scan, upo.PrintedInk(s.dpi), rng.getrandbits(63), sensor, fab)
        elif s.tag == "NoteCandyBar":
            fake = upo.approximate_clone(scan, upo.CandyBar(s.fidelity), rng.getrandbits(63), sensor, fab)
        else:  # NoteSerialReuse: a real UPO of Mallory's own, wearing a genuine serial
            fake = upo.fabricate(replace(fab, rng_seed=rng.getrandbits(63)))
        items.append(Item(True, serial=target.serial, note=fake))
    return items


def run_scenario(config: ScenarioConfig, sale_order: list[int] | None = None,
                 check_draws: list[float] | None = None) -> ScenarioReport:
    """Simulate one market.

    ``sale_order`` (a permutation of item indices; genuine items first, then
    counterfeits) and ``check_draws`` (one uniform number per item; the buyer
    checks iff draw < consumer_verify_rate) override the seeded randomness,
    which lets tests enumerate every ordering.
    """
    config.validate()
    rng = random.Random(config.rng_seed)
    registry = Registry()
    authority = ProductAuthority(registry, config.clone_alert_threshold, config.code_policy)
    bank = CentralBank(registry, "SIM", config.match_threshold)
    domains = DomainRegistry([CANONICAL_DOMAIN])

    items = _build_notes(config, rng, bank) if config.strategy.is_note else _build_products(config, rng, authority)
    n = len(items)
    draws = check_draws if check_draws is not None else [rng.random() for _ in range(n)]
    if sale_order is None:
        sale_order = list(range(n))
        rng.shuffle(sale_order)
    if sorted(sale_order) != list(range(n)) or len(draws) != n:
        raise ConfigInvalid("sale_order must be a permutation of all items, with one check draw per item")
    sold = sale_order[: round(config.sell_fraction * n)]
    sensor = upo.SensorParams()
    sensor_rng = np.random.default_rng(config.rng_seed)

    histogram: dict[str, int] = {}
    presentations = []
    for step, idx in enumerate(sold):
        item = items[idx]
        checked = draws[idx] < config.consumer_verify_rate
        verdict = None
        if checked:
            now = EPOCH + timedelta(minutes=step + 1)
            if config.strategy.is_note:
                measured = upo.measure(item.note, replace(sensor, rng_seed=int(sensor_rng.integers(2**63))))
                verdict = bank.verify_note(item.serial, measured, now=now).tag.value
            elif classify_label_domain(item.label_domain, domains) is DomainClass.COUNTERFEIT_INDICATOR:
                verdict = LABEL_REJECTED
            elif item.code is None:
                verdict = MISSING_CODE
            else:
                verdict = authority.verify(item.identity, item.code, now).verdict.value
            histogram[verdict] = histogram.get(verdict, 0) + 1
        presentations.append(Presentation(idx, item.counterfeit, checked, verdict, item.code_group))

    fakes = [p for p in presentations if p.counterfeit]
    reals = [p for p in presentations if not p.counterfeit]
    cloned = [p for p in presentations if p.code_group is not None and p.checked]
    return ScenarioReport(
        config=config,
        total_genuine=sum(not it.counterfeit for it in items),
        total_counterfeit=sum(it.counterfeit for it in items),
        sold_counterfeit=len(fakes),
        checked_counterfeit=sum(p.checked for p in fakes),
        detected_counterfeit=sum(p.checked and p.verdict not in ACCEPTED for p in fakes),
        checked_genuine=sum(p.checked for p in reals),
        flagged_genuine=sum(p.checked and p.verdict not in ACCEPTED for p in reals),
        cloned_code_verifiers=len(cloned),
        cloned_code_flagged=sum(p.verdict not in ACCEPTED for p in cloned),
        histogram=histogram,
        presentations=presentations,
    )


def run_many(config: ScenarioConfig, runs: int) -> list[ScenarioReport]:
    """Independent runs with seeds ``rng_seed, rng_seed + 1, ...``."""
    return [run_scenario(replace(config, rng_seed=config.rng_seed + i)) for i in range(runs)]


def summarize(reports: list[ScenarioReport]) -> dict:
    def stats(values):
        values = [v for v in values if v is not None]
        if not values:
            return None
        return {"mean": sum(values) / len(values), "min": min(values), "max": max(values), "n": len(values)}

    return {
        "schema_version": SCHEMA_VERSION,
        "runs": len(reports),
        "config": reports[0].config.to_dict() if reports else None,
        "detection_at_point_of_check": stats([r.detection_at_point_of_check for r in reports]),
        "cumulative_detection": stats([r.cumulative_detection for r in reports]),
        "false_accusations": stats([r.false_accusations for r in reports]),
        "cloned_code_detection": stats([r.cloned_code_detection for r in reports]),
        "undetected_counterfeits": stats([r.undetected_counterfeits for r in reports]),
    }
