import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anticounterfeit.adversary_sim import (
    ConfigInvalid,
    ScenarioConfig,
    Strategy,
    run_many,
    run_scenario,
    summarize,
)
from oracles import enumerate_clone_market


def clone_cfg(n_genuine=3, copies=4, threshold=3, **kw):
    return ScenarioConfig(n_genuine, copies, Strategy("CloneOneCode", copies=copies),
                          clone_alert_threshold=threshold, **kw)


def order_to_indices(order, n_genuine):
    next_clone = n_genuine
    out = []
    for label in order:
        if label == "c":
            out.append(next_clone)
            next_clone += 1
        else:
            out.append(int(label[1:]))
    return out


@pytest.mark.parametrize("n_genuine,copies,threshold", [(1, 3, 3), (3, 4, 3), (2, 5, 2), (2, 4, 4)])
def test_clone_race_matches_enumeration(n_genuine, copies, threshold):
    cfg = clone_cfg(n_genuine, copies, threshold)
    n = n_genuine + copies
    orders = 0
    for order, detected, flagged in enumerate_clone_market(n_genuine, copies, threshold):
        report = run_scenario(cfg, sale_order=order_to_indices(order, n_genuine), check_draws=[0.0] * n)
        assert report.detected_counterfeit == detected, order
        assert report.cloned_code_flagged == flagged, order
        assert report.cloned_code_verifiers == copies + 1
        # the owner of the cloned code is accused exactly when a clone got there first
        holders = [x for x in order if x in ("g0", "c")]
        assert report.flagged_genuine == (holders[0] == "c")
        orders += 1
    assert orders > 1


def conservation(report):
    sold_real = sum(not p.counterfeit for p in report.presentations)
    checked = sum(p.checked for p in report.presentations)
    return (
        report.sold_counterfeit + report.unsold_counterfeit == report.total_counterfeit
        and report.detected_counterfeit + report.undetected_counterfeits == report.sold_counterfeit
        and report.detected_counterfeit <= report.checked_counterfeit <= report.sold_counterfeit
        and report.flagged_genuine <= report.checked_genuine <= sold_real
        and sum(report.histogram.values()) == checked
        and report.checked_counterfeit + report.checked_genuine == checked
    )


product_strategies = st.sampled_from([
    Strategy("HonestSupply"), Strategy("CloneOneCode", copies=2), Strategy("CloneOneCode", copies=5),
    Strategy("RandomGuessCode"), Strategy("OwnWebsiteLabel"), Strategy("NoCodeAtAll"),
])


@settings(max_examples=60, deadline=None)
@given(strategy=product_strategies, n_genuine=st.integers(5, 30), n_counterfeit=st.integers(0, 20),
       rate=st.floats(0, 1), sell=st.floats(0, 1), seed=st.integers(0, 10_000), threshold=st.integers(2, 5))
def test_conservation_and_single_genuine(strategy, n_genuine, n_counterfeit, rate, sell, seed, threshold):
    cfg = ScenarioConfig(n_genuine, n_counterfeit, strategy, rate, threshold, seed, sell)
    try:
        cfg.validate()
    except ConfigInvalid:
        return
    report = run_scenario(cfg)
    assert conservation(report)
    groups = {}
    for p in report.presentations:
        if p.code_group is not None and p.verdict == "genuine":
            groups[p.code_group] = groups.get(p.code_group, 0) + 1
    assert all(v == 1 for v in groups.values())
    if strategy.tag != "CloneOneCode":
        assert report.flagged_genuine == 0


@pytest.mark.parametrize("seed", range(5))
def test_detection_monotone_in_verify_rate(seed):
    previous = -1
    for rate in (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0):
        cfg = ScenarioConfig(40, 30, Strategy("CloneOneCode", copies=3), rate, rng_seed=seed)
        detected = run_scenario(cfg).detected_counterfeit
        assert detected >= previous
        previous = detected


def test_reproducible_and_serializable():
    cfg = clone_cfg(rng_seed=11, consumer_verify_rate=0.6)
    a, b = run_scenario(cfg), run_scenario(cfg)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert a.to_table() == b.to_table()
    assert ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert a.to_dict()["schema_version"] == 1


def test_honest_supply_never_accuses():
    report = run_scenario(ScenarioConfig(200, 50, Strategy("HonestSupply"), rng_seed=3))
    assert report.total_counterfeit == 0
    assert report.false_accusations == 0.0
    assert report.histogram == {"genuine": 200}
    assert report.cumulative_detection is None


def test_random_guessing_always_fails():
    report = run_scenario(ScenarioConfig(100, 10_000, Strategy("RandomGuessCode"), rng_seed=1))
    assert report.detected_counterfeit == 10_000
    assert report.histogram["counterfeit"] == 10_000
    assert report.false_accusations == 0.0


def test_own_website_label_is_rejected_by_domain():
    report = run_scenario(ScenarioConfig(50, 50, Strategy("OwnWebsiteLabel"), rng_seed=2))
    assert report.histogram["label_domain_rejected"] == 50
    assert report.detection_at_point_of_check == 1.0


@pytest.mark.parametrize("rate", [0.0, 0.3, 0.7, 1.0])
def test_no_code_detection_tracks_check_rate(rate):
    reports = run_many(ScenarioConfig(20, 500, Strategy("NoCodeAtAll"), rate, rng_seed=5), 4)
    for r in reports:
        assert r.detection_at_point_of_check in (None, 1.0)
    share = sum(r.detected_counterfeit for r in reports) / sum(r.sold_counterfeit for r in reports)
    assert share == pytest.approx(rate, abs=0.05)


def test_unsold_stock_is_reported():
    report = run_scenario(ScenarioConfig(20, 20, Strategy("RandomGuessCode"), sell_fraction=0.5, rng_seed=4))
    assert len(report.presentations) == 20
    assert report.sold_counterfeit == sum(p.counterfeit for p in report.presentations)
    assert report.sold_counterfeit + report.unsold_counterfeit == 20
    assert report.unsold_counterfeit > 0


def test_note_strategies():
    for strategy in (Strategy("NotePrintedInk", dpi=1200), Strategy("NoteCandyBar", fidelity=1.0),
                     Strategy("NoteSerialReuse")):
        report = run_scenario(ScenarioConfig(4, 6, strategy, rng_seed=7))
        assert report.detection_at_point_of_check == 1.0, strategy
        assert report.checked_genuine == 4


def test_summary():
    reports = run_many(clone_cfg(rng_seed=0), 5)
    s = summarize(reports)
    assert s["runs"] == 5
    assert [r.config.rng_seed for r in reports] == [0, 1, 2, 3, 4]
    assert s["cloned_code_detection"]["min"] >= 0.6


@pytest.mark.parametrize("cfg", [
    ScenarioConfig(1, 5, Strategy("CloneOneCode", copies=2)),
    ScenarioConfig(1, 1, Strategy("CloneOneCode", copies=1)),
    ScenarioConfig(0, 1, Strategy("RandomGuessCode")),
    ScenarioConfig(1, 1, Strategy("Bribery")),
    ScenarioConfig(1, 1, Strategy("NotePrintedInk")),
    ScenarioConfig(1, 1, Strategy("NoteCandyBar", fidelity=1.5)),
    ScenarioConfig(1, 1, Strategy("HonestSupply"), consumer_verify_rate=1.5),
    ScenarioConfig(1, 1, Strategy("HonestSupply"), sell_fraction=-0.1),
    ScenarioConfig(1, 1, Strategy("HonestSupply"), clone_alert_threshold=1),
    ScenarioConfig(-1, 1, Strategy("HonestSupply")),
])
def test_invalid_configs(cfg):
    with pytest.raises(ConfigInvalid):
        run_scenario(cfg)


def test_bad_overrides():
    cfg = clone_cfg(1, 2)
    with pytest.raises(ConfigInvalid):
        run_scenario(cfg, sale_order=[0, 1], check_draws=[0, 0, 0])
    with pytest.raises(ConfigInvalid):
        run_scenario(cfg, sale_order=[0, 1, 1], check_draws=[0, 0, 0])
    with pytest.raises(ConfigInvalid):
        ScenarioConfig.from_dict({"n_genuine": 1, "strategy": {"tag": "HonestSupply", "zzz": 1}})
    with pytest.raises(ConfigInvalid):
        ScenarioConfig.from_dict({"strategy": {"tag": "HonestSupply"}})
    assert str(replace(cfg).strategy) == "CloneOneCode(copies=2)"
