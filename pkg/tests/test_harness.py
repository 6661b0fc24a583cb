from dataclasses import replace

import pytest

from pcnsim.errors import ChannelUnknown, ConfigInvalid, GridTooLarge, NotHonest
from pcnsim.harness import (
    AdversarySpec,
    CloseRecord,
    FinalState,
    GridDims,
    PaymentSpec,
    ScenarioConfig,
    Simulation,
    UserSpec,
    check_security,
    default_grid_dims,
    enumerate_adversary_grid,
    run_scenario,
)
from pcnsim.ledger import TimingParams

from conftest import DEFAULT_TIMING, multihop_config, two_party_config


def test_run_is_deterministic():
    cfg = two_party_config(adversaries=(
        AdversarySpec("bob", "publish_outdated", params=(("state", 3), ("tick", 21))),))
    t1, f1 = run_scenario(cfg)
    t2, f2 = run_scenario(cfg)
    assert t1.format_lines() == t2.format_lines()
    assert f1.balances == f2.balances
    assert {k: v.label for k, v in f1.verdicts.items()} == \
        {k: v.label for k, v in f2.verdicts.items()}


def test_happy_path_both_parties_sweep():
    cfg = two_party_config(
        payments=(PaymentSpec(path=("alice", "bob"), amount=30, start=12),))
    trace, final = run_scenario(cfg)
    assert final.balances == {"alice": 70, "bob": 30}
    users = {u for _, u, _, _, _ in final.sweeps}
    assert users == {"alice", "bob"}
    assert all(v.secure for v in final.verdicts.values())


def test_global_conservation_at_quiescence():
    for adv in ((), (AdversarySpec("bob", "silent_after", params=(("tick", 20),)),),
                (AdversarySpec("bob", "publish_outdated", params=(("state", 3), ("tick", 21))),)):
        cfg = two_party_config(adversaries=adv)
        trace, final = run_scenario(cfg)
        assert final.unspent_total == 100


def test_watch_cadence_compliance():
    cfg = two_party_config()
    sim = Simulation(cfg)
    sim.run()
    for agent in sim.agents.values():
        gaps = [b - a for a, b in zip(agent.watch_log, agent.watch_log[1:])]
        assert all(g <= cfg.timing.watch_interval for g in gaps)


def test_deadline_rule_fires_at_exact_trigger_tick():
    # payment start 12, direct hop deadline 20: trigger when 20 - now < 7
    cfg = two_party_config(
        payments=(PaymentSpec(path=("alice", "bob"), amount=30, start=12),),
        adversaries=(AdversarySpec("bob", "withhold_preimage"),),
    )
    trace, final = run_scenario(cfg)
    closes = [e for e in trace if e.kind == "watcher"
              and dict(e.data).get("action") == "close"
              and dict(e.data).get("reason") == "deadline"]
    assert closes and closes[0].tick == 14


def test_adversary_commitment_sets_close_record_at_submission():
    cfg = two_party_config(adversaries=(
        AdversarySpec("bob", "publish_outdated", params=(("state", 3), ("tick", 21))),))
    trace, final = run_scenario(cfg)
    record = final.close_records["ch0:alice-bob"]
    assert record.t_close == 21
    assert record.initiator == "bob"
    assert set(record.snapshots) == {"alice"}


def test_check_security_deadline_formula():
    params = TimingParams(conf_bound=5, sync_bound=2, self_delay=20,
                          forward_delta=8, watch_interval=10)
    snapshot = {"state": 4, "stable": 50,
                "htlcs": [{"amount": 10, "image": b"y", "outgoing": True, "deadline": 150}]}
    final = FinalState(
        params=params, honest={"alice"}, initial_funds={}, balances={},
        unspent_total=0, channel_stables={}, channel_phases={},
        close_records={"ch": CloseRecord("ch", 100, "alice", {"alice": snapshot})},
        sweeps=[(180, "alice", "ch", 60, b"t")], learn_ticks={"alice": {}}, payments=[],
    )
    verdict = check_security(final, "alice", "ch")
    assert verdict.deadline == 150 + 2 * 5 + 20  # = 180
    assert verdict.correct_balance == 60
    assert verdict.secure

    # without contracts the bound collapses to the close tick
    bare = {"state": 1, "stable": 50, "htlcs": []}
    final2 = FinalState(
        params=params, honest={"alice"}, initial_funds={}, balances={},
        unspent_total=0, channel_stables={}, channel_phases={},
        close_records={"ch": CloseRecord("ch", 100, "alice", {"alice": bare})},
        sweeps=[(130, "alice", "ch", 50, b"t")], learn_ticks={"alice": {}}, payments=[],
    )
    verdict2 = check_security(final2, "alice", "ch")
    assert verdict2.deadline == 100 + 2 * 5 + 20
    assert verdict2.secure


def test_check_security_errors():
    cfg = two_party_config(adversaries=(
        AdversarySpec("bob", "publish_outdated", params=(("state", 3), ("tick", 21))),))
    trace, final = run_scenario(cfg)
    with pytest.raises(NotHonest):
        check_security(final, "bob", "ch0:alice-bob")
    with pytest.raises(ChannelUnknown):
        check_security(final, "alice", "no-such-channel")


def test_grid_enumeration_product_and_identity():
    base = two_party_config(adversaries=(AdversarySpec("bob", "honest", params=(("state", 3),)),))
    dims = default_grid_dims(base)
    assert dims.size() == 7 * 3 * 2 * 2 * 2 == 168
    configs = enumerate_adversary_grid(base, dims)
    assert len(configs) == 168
    assert len({c.canonical_key() for c in configs}) == 168
    # empty dims: the identity grid
    assert enumerate_adversary_grid(base, GridDims()) == [base]


def test_grid_cap_enforced():
    base = two_party_config(adversaries=(AdversarySpec("bob", "honest"),))
    with pytest.raises(GridTooLarge):
        enumerate_adversary_grid(base, default_grid_dims(base), max_configs=10)


def test_grid_requires_adversary():
    base = two_party_config()
    with pytest.raises(ConfigInvalid):
        enumerate_adversary_grid(base, GridDims())


def test_config_validation_messages():
    with pytest.raises(ConfigInvalid, match="watch_interval must satisfy"):
        replace(two_party_config(),
                timing=TimingParams(5, 2, 20, 8, 15)).validate()
    with pytest.raises(ConfigInvalid, match="horizon"):
        replace(two_party_config(), horizon=30).validate()
    with pytest.raises(ConfigInvalid, match="cannot fund"):
        two_party_config(users=(UserSpec("alice", 50), UserSpec("bob", 0))).validate()
    with pytest.raises(ConfigInvalid, match="constant_timeout"):
        two_party_config(payments=(
            PaymentSpec(path=("alice", "bob"), amount=5, start=12,
                        mode="constant_timeout"),)).validate()


def test_mode_refinement_same_outcome_in_global_mode():
    affected = two_party_config()
    global_ = replace(affected, ledger_mode="global")
    _, f1 = run_scenario(affected)
    _, f2 = run_scenario(global_)
    assert f1.balances == f2.balances
    assert {k: v.secure for k, v in f1.verdicts.items()} == \
        {k: v.secure for k, v in f2.verdicts.items()}


def test_update_stall_leaves_both_sides_recoverable():
    for stall_on in ("update_response", "commitment_signed", "revoke_and_ack"):
        cfg = two_party_config(adversaries=(
            AdversarySpec("bob", "stall_update", params=(("stall_on", stall_on),)),))
        trace, final = run_scenario(cfg)
        verdict = final.verdicts[("alice", "ch0:alice-bob")]
        assert verdict.secure, stall_on
        assert verdict.last_sweep_tick is None or verdict.last_sweep_tick <= verdict.deadline
        assert final.unspent_total == 100
