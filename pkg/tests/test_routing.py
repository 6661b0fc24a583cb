import pytest

from pcnsim.errors import InsufficientCapacity, PathBroken
from pcnsim.harness import AdversarySpec, PaymentSpec, run_scenario
from pcnsim.routing import CONSTANT_TIMEOUT, STAGGERED, collateral_lock_time, plan_payment

from conftest import DEFAULT_TIMING, multihop_config, two_party_config


def lookup(stables, operational=None):
    operational = operational or {}

    def hop_channel(sender, receiver):
        key = (sender, receiver)
        if key not in stables:
            return None
        return (f"{sender}-{receiver}", stables[key], operational.get(key, True))

    return hop_channel


def test_staggered_deadlines_follow_hop_formula():
    # two hops planned at tick 100: deadlines 116 and 108
    plan = plan_payment(
        ("alice", "bob", "charlie"), 10, 100, STAGGERED, DEFAULT_TIMING, b"y" * 32,
        hop_channel=lookup({("alice", "bob"): 50, ("bob", "charlie"): 50}),
    )
    assert [h.deadline for h in plan.hops] == [116, 108]
    gaps = [a.deadline - b.deadline for a, b in zip(plan.hops, plan.hops[1:])]
    assert gaps == [DEFAULT_TIMING.forward_delta]


def test_direct_payment_single_hop():
    plan = plan_payment(
        ("alice", "bob"), 10, 100, STAGGERED, DEFAULT_TIMING, b"y" * 32,
        hop_channel=lookup({("alice", "bob"): 50}),
    )
    assert len(plan.hops) == 1
    assert plan.hops[0].deadline == 108


def test_constant_timeout_shares_the_sender_deadline():
    plan = plan_payment(
        ("alice", "bob", "charlie"), 10, 100, CONSTANT_TIMEOUT, DEFAULT_TIMING, b"y" * 32,
        hop_channel=lookup({("alice", "bob"): 50, ("bob", "charlie"): 50}),
    )
    assert [h.deadline for h in plan.hops] == [116, 116]
    assert plan.registry_gated


def test_plan_rejects_insufficient_capacity():
    with pytest.raises(InsufficientCapacity) as err:
        plan_payment(
            ("alice", "bob", "charlie"), 60, 100, STAGGERED, DEFAULT_TIMING, b"y" * 32,
            hop_channel=lookup({("alice", "bob"): 100, ("bob", "charlie"): 50}),
        )
    assert err.value.hop == 1


def test_plan_rejects_broken_path():
    with pytest.raises(PathBroken):
        plan_payment(("alice", "bob"), 10, 100, STAGGERED, DEFAULT_TIMING, b"y" * 32,
                     hop_channel=lookup({}))
    with pytest.raises(PathBroken):
        plan_payment(
            ("alice", "bob"), 10, 100, STAGGERED, DEFAULT_TIMING, b"y" * 32,
            hop_channel=lookup({("alice", "bob"): 50}, operational={("alice", "bob"): False}),
        )


def test_honest_multihop_payment_shifts_balances():
    trace, final = run_scenario(multihop_config())
    assert final.payments[0].outcome.status == "completed"
    assert final.final_funds("a") == 90
    assert final.final_funds("d") == 10
    assert final.final_funds("b") == 100 and final.final_funds("c") == 100
    assert final.unspent_total == 300


def test_receiver_never_reveals_restores_all_balances():
    # oracle: run to quiescence and compare final funds to pre-payment funds
    cfg = multihop_config(adversaries=(AdversarySpec("d", "withhold_preimage"),))
    trace, final = run_scenario(cfg)
    assert final.payments[0].outcome.status == "partially_locked"
    for user, start in (("a", 100), ("b", 100), ("c", 100), ("d", 0)):
        assert final.final_funds(user) == start
    assert final.unspent_total == 300


def test_collateral_lock_times_happy_path_small_and_equal():
    for mode in (STAGGERED, CONSTANT_TIMEOUT):
        cfg = multihop_config(mode="global", pay_mode=mode)
        trace, final = run_scenario(cfg)
        locks = collateral_lock_time(trace, 0)
        assert set(locks) == {0, 1, 2}
        spans = [t1 - t0 for t0, t1 in locks.values()]
        assert all(s <= 2 for s in spans)


def test_collateral_lock_times_under_stall():
    spans = {}
    for mode in (STAGGERED, CONSTANT_TIMEOUT):
        cfg = multihop_config(mode="global", pay_mode=mode,
                              adversaries=(AdversarySpec("d", "withhold_preimage"),))
        trace, final = run_scenario(cfg)
        locks = collateral_lock_time(trace, 0)
        spans[mode] = {hop: t1 - t0 for hop, (t0, t1) in locks.items()}
    staggered = spans[STAGGERED]
    # worst-case lock grows by exactly forward_delta per hop toward the sender
    assert staggered[1] - staggered[2] == DEFAULT_TIMING.forward_delta
    assert staggered[0] - staggered[1] == DEFAULT_TIMING.forward_delta
    constant = spans[CONSTANT_TIMEOUT]
    assert len(set(constant.values())) == 1


def test_stalled_add_reports_partially_locked():
    cfg = two_party_config(
        payments=(PaymentSpec(path=("alice", "bob"), amount=30, start=12),),
        adversaries=(AdversarySpec("bob", "stall_update",
                                   params=(("stall_on", "commitment_signed"),)),),
    )
    trace, final = run_scenario(cfg)
    outcome = final.payments[0].outcome
    assert outcome.status == "partially_locked"
    assert outcome.hop == 0
    # the honest sender still recovers everything it is entitled to
    verdict = final.verdicts[("alice", "ch0:alice-bob")]
    assert verdict.secure
    assert final.final_funds("alice") == 100
