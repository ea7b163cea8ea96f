"""Acceptance gate: ten end-to-end criteria, each printing one PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s`` to see the lines
inline; without ``-s`` they are written straight to the terminal anyway.
"""

import json
import random
import threading
import time
from dataclasses import replace
from datetime import timedelta

import numpy as np
import pytest

from anticounterfeit import upo
from anticounterfeit.adversary_sim import ScenarioConfig, Strategy, run_scenario
from anticounterfeit.codegen import CodePolicy
from anticounterfeit.protocol_core import ProductAuthority, ProductIdentity, StateTag, Verdict
from anticounterfeit.registry import Registry, apply_event, replay
from anticounterfeit.verify_service import DomainRegistry, classify_label_domain
from conftest import T0
from oracles import enumerate_clone_market
from test_adversary_sim import order_to_indices
from test_verify_service import fixture_app, normalize_ts, render_body


@pytest.fixture
def verdict_line(capsys, request):
    def emit(label, ok, detail, elapsed=None):
        timing = f" [{elapsed:.1f}s]" if elapsed is not None else ""
        with capsys.disabled():
            print(f"\n{label}: {'PASS' if ok else 'FAIL'} - {detail}{timing}")
        assert ok, detail

    return emit


def test_c01_single_use(verdict_line):
    start = time.perf_counter()
    authority = ProductAuthority(Registry(), clone_alert_threshold=3)
    records = authority.mint_batch("acme", "drugX", "C1", 1000, rng_seed=1, now=T0)
    bad = 0
    for i, rec in enumerate(records):
        first_at = T0 + timedelta(seconds=i)
        code = rec.secret.display()
        a = authority.verify(rec.identity, code, first_at)
        b = authority.verify(rec.identity, code, first_at + timedelta(days=1))
        c = authority.verify(rec.identity, code, first_at + timedelta(days=2))
        ok = (a.verdict is Verdict.GENUINE
              and b.verdict is Verdict.PREVIOUSLY_VERIFIED and b.original_timestamp == first_at
              and c.verdict is Verdict.CLONE_ALERT and c.original_timestamp == first_at
              and c.presentation_count == 3)
        bad += not ok
    elapsed = time.perf_counter() - start
    verdict_line("C1 single-use semantics", bad == 0 and elapsed < 5,
                 f"{1000 - bad}/1000 records followed genuine -> previously_verified -> clone_alert", elapsed)


def test_c02_linearizable(verdict_line):
    trials, workers = 1000, 64
    authority = ProductAuthority(Registry())
    records = authority.mint_batch("acme", "drugX", "C2", trials, rng_seed=2, now=T0)
    counts = [0] * trials
    lock = threading.Lock()
    barrier = threading.Barrier(workers)

    def worker():
        for t in range(trials):
            barrier.wait()
            rec = records[t]
            if authority.verify(rec.identity, rec.secret.raw, T0).verdict is Verdict.GENUINE:
                with lock:
                    counts[t] += 1

    start = time.perf_counter()
    threads = [threading.Thread(target=worker) for _ in range(workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    elapsed = time.perf_counter() - start
    violations = sum(c != 1 for c in counts)
    presentations = {authority.registry.lookup(r.identity.key).state.presentation_count for r in records}
    verdict_line("C2 linearizability", violations == 0 and presentations == {workers} and elapsed < 30,
                 f"{violations} violations in {trials} trials of {workers} concurrent verifications", elapsed)


def random_guesses(n, seed, policy=CodePolicy()):
    # checksum-valid guesses, so none is turned away by the check character alone
    rng = np.random.default_rng(seed)
    body = rng.integers(0, 32, size=(n, policy.body_length))
    check = (body @ (2 * np.arange(policy.body_length) + 1)) % 32
    symbols = np.array(list(policy.alphabet))[np.concatenate([body, check[:, None]], axis=1)]
    return symbols.view(f"<U{policy.body_length + 1}").ravel().tolist()


def test_c03_guessing(verdict_line):
    start = time.perf_counter()
    authority = ProductAuthority(Registry())
    identities = [r.identity for r in authority.mint_batch("acme", "drugX", "C3", 10_000, rng_seed=3, now=T0)]
    genuine = 0
    for i, guess in enumerate(random_guesses(1_000_000, 3)):
        genuine += authority.verify(identities[i % 10_000], guess, T0).verdict is Verdict.GENUINE
    elapsed = time.perf_counter() - start
    verdict_line("C3 guessing resistance", genuine == 0 and elapsed < 60,
                 f"{genuine} genuine verdicts from 10^6 guesses against 10^4 records", elapsed)


def test_c04_common_knowledge_domain(verdict_line, golden):
    corpus = json.loads((golden / "domain_corpus.json").read_text(encoding="utf-8"))
    registry = DomainRegistry(corpus["canonical_domains"])
    errors = sum(classify_label_domain(c["domain"], registry).value != c["expected"] for c in corpus["cases"])
    lookalikes = sum(c["expected"] == "counterfeit_indicator" for c in corpus["cases"])
    verdict_line("C4 common-knowledge domain rule", errors == 0 and len(corpus["cases"]) == 50 and lookalikes == 40,
                 f"{errors} errors over {len(corpus['cases'])} label domains")


def test_c05_reseal(verdict_line):
    authority = ProductAuthority(Registry())
    old = authority.mint_batch("acme", "drugX", "C5", 1, rng_seed=5, now=T0)[0]
    new = authority.reseal(old.identity, "customs-nl", now=T0, rng_seed=6)
    old_counterfeit = sum(authority.verify(old.identity, old.secret.raw, T0).verdict is Verdict.COUNTERFEIT
                          for _ in range(100))
    new_verdicts = [authority.verify(new.identity, new.secret.raw, T0).verdict for _ in range(2)]
    # rebuild the chain from audit histories alone
    chain, ident = [new.identity], new.identity
    while True:
        minted = authority.audit(ident)[0]
        if not minted.payload.get("lineage"):
            break
        ident = ProductIdentity.from_dict(minted.payload["lineage"])
        chain.append(ident)
    retired = authority.registry.lookup(old.identity.key).state.tag is StateTag.RETIRED
    ok = (old_counterfeit == 100 and new_verdicts == [Verdict.GENUINE, Verdict.PREVIOUSLY_VERIFIED]
          and chain == [new.identity, old.identity] and retired)
    verdict_line("C5 customs reseal", ok,
                 f"old secret counterfeit {old_counterfeit}/100, new secret {[v.value for v in new_verdicts]}, "
                 f"lineage depth {len(chain)}")


def test_c06_upo_separation(verdict_line):
    start = time.perf_counter()
    report = upo.collision_study(1000, upo.FabricationParams(rng_seed=1), upo.SensorParams(rng_seed=2))
    elapsed = time.perf_counter() - start
    tau = report.suggested_threshold
    impostor_matches = int((report.impostor_scores >= tau).sum())
    frr = float((report.genuine_scores < tau).mean())
    ok = (impostor_matches == 0 and frr <= 0.01 and report.empirical_frr <= 0.01
          and report.genuine_min > report.impostor_max and elapsed < 300)
    verdict_line("C6 UPO separation", ok,
                 f"impostor matches {impostor_matches}/{report.impostor_pairs}, FRR {frr}, "
                 f"gap ({report.impostor_max:.4f}, {report.genuine_min:.4f}), tau {tau:.4f}",
                 elapsed)


ATTACKS = [upo.PrintedInk(150), upo.PrintedInk(300), upo.PrintedInk(600), upo.PrintedInk(1200),
           upo.CandyBar(0.5), upo.CandyBar(0.9), upo.CandyBar(0.99)]


def test_c07_attack_detection(verdict_line):
    start = time.perf_counter()
    instances = 1000
    tau = upo.DEFAULT_THRESHOLD
    rows, ok = [], True
    for k, attack in enumerate(ATTACKS):
        rejected = mag_success = 0
        for i in range(instances):
            seed = 100_000 * k + i
            target = upo.fabricate(upo.FabricationParams(rng_seed=seed))
            enrolled = upo.measure(target, upo.SensorParams(rng_seed=3 * seed))
            scan = upo.measure(target, upo.SensorParams(rng_seed=3 * seed + 1))
            probe = upo.measure(upo.approximate_clone(scan, attack, rng=seed), upo.SensorParams(rng_seed=3 * seed + 2))
            rejected += not upo.match(enrolled, probe, tau)
            mag_success += upo.match(enrolled, probe, tau, channels=("magnetic",))
        two_success = instances - rejected
        ok &= rejected >= 0.99 * instances and mag_success > two_success
        param = attack.resolution_dpi if isinstance(attack, upo.PrintedInk) else attack.slice_fidelity
        rows.append(f"{type(attack).__name__}({param}) "
                    f"rejected {rejected}/{instances}, magnetic-only accepted {mag_success}")
    elapsed = time.perf_counter() - start
    verdict_line("C7 attack detection", ok, "; ".join(rows), elapsed)


def test_c08_clone_economy(verdict_line):
    rates = []
    for seed in range(20):
        cfg = ScenarioConfig(50, 10, Strategy("CloneOneCode", copies=10), 1.0, rng_seed=seed)
        rates.append(run_scenario(cfg).cloned_code_detection)
    mismatches = cases = 0
    for n_genuine, copies, threshold in [(1, 7, 3), (2, 6, 3), (3, 5, 2), (4, 4, 4)]:
        cfg = ScenarioConfig(n_genuine, copies, Strategy("CloneOneCode", copies=copies), 1.0, threshold)
        for order, detected, flagged in enumerate_clone_market(n_genuine, copies, threshold):
            report = run_scenario(cfg, sale_order=order_to_indices(order, n_genuine),
                                  check_draws=[0.0] * (n_genuine + copies))
            mismatches += (report.detected_counterfeit, report.cloned_code_flagged) != (detected, flagged)
            cases += 1
    ok = min(rates) >= 10 / 11 and mismatches == 0
    verdict_line("C8 clone economy", ok,
                 f"min cloned-code detection {min(rates):.4f} over 20 seeds (need >= {10 / 11:.4f}); "
                 f"{mismatches} mismatches against {cases} enumerated sale orders")


def test_c09_persistence(verdict_line, tmp_path):
    start = time.perf_counter()
    path = tmp_path / "big.log"
    rng = random.Random(9)
    reg = Registry(path, "c9")
    authority = ProductAuthority(reg)
    records = authority.mint_batch("acme", "drugX", "C9", 20_000, with_inspection_codes=True, rng_seed=9, now=T0)
    while reg.last_seq < 100_000:
        rec = rng.choice(records)
        roll = rng.random()
        now = T0 + timedelta(seconds=reg.last_seq)
        if roll < 0.002 and reg.lookup(rec.identity.key).successor is None:
            authority.reseal(rec.identity, "customs", now=now, rng_seed=reg.last_seq)
        else:
            code = rec.secret.raw if roll < 0.6 else rec.inspection_secret.raw if roll < 0.8 else "WRONG"
            authority.verify(rec.identity, code, now)
    live = reg.snapshot()
    events = reg.all_events()
    reg.close()
    data = path.read_bytes()

    with Registry(path) as reopened:
        full_ok = reopened.snapshot() == live and replay(events) == live

    # truncation faults: the recovered store must equal the state after its
    # last complete record, rebuilt here from the in-memory event list
    line_ends = np.flatnonzero(np.frombuffer(data, dtype=np.uint8) == ord("\n")) + 1
    cuts = sorted(random.Random(99).sample(range(len(data) + 1), 100))
    state, applied, failures = {}, 0, 0
    for cut in cuts:
        committed_events = max(0, int(np.searchsorted(line_ends, cut, side="right")) - 1)
        while applied < committed_events:
            apply_event(state, events[applied])
            applied += 1
        torn = tmp_path / "torn.log"
        torn.write_bytes(data[:cut])
        with Registry(torn) as recovered:
            failures += recovered.snapshot() != state or recovered.last_seq != committed_events
        torn.unlink()
    elapsed = time.perf_counter() - start
    verdict_line("C9 persistence", full_ok and failures == 0 and len(events) == 100_000,
                 f"replay of {len(events)} events equal to live store: {full_ok}; "
                 f"{failures} failures over {len(cuts)} truncation offsets", elapsed)


def test_c10_wire_conformance(verdict_line, golden):
    app, exchanges, codes = fixture_app(golden)
    matched, verdicts = 0, set()
    for ex in exchanges:
        req = ex["request"]
        resp = app.handle(req["method"], req["target"], req["headers"], render_body(req["body"], codes))
        matched += normalize_ts(resp.to_bytes().decode()) == ex["response"]
        verdicts.add(ex["verdict"])
    expected = {"counterfeit", "genuine", "previously_verified", "clone_alert", "authentic",
                "fingerprint_mismatch", "unknown_serial", "duplicate_presentation"}
    verdict_line("C10 wire conformance", matched == len(exchanges) and verdicts == expected,
                 f"{matched}/{len(exchanges)} fixtures byte-identical, one per verdict string")
