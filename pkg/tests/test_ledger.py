import pytest

from pcnsim.conditions import AbsoluteTime, Preimage, RelativeDelay, Sig, all_of, any_of
from pcnsim.crypto import KeyPair, KeyRegistry, hash_image
from pcnsim.errors import ConfigInvalid, ModeUnsupported, UnknownOutpointError
from pcnsim.ledger import (
    InvalidReason,
    Ledger,
    TimingParams,
    VisibilityMode,
)
from pcnsim.transactions import Output, Witness, make_transaction

PARAMS = TimingParams(conf_bound=5, sync_bound=2, self_delay=20, forward_delta=8, watch_interval=10)


class World:
    """Two-user ledger sandbox used across ledger tests."""

    def __init__(self, mode=VisibilityMode.AFFECTED_USERS, conf_delay=None, sync_delay=None, extra_users=()):
        self.keys = KeyRegistry()
        self.pairs = {}
        names = ["alice", "bob", *extra_users]
        for name in names:
            self.pairs[name] = self.keys.register(KeyPair.from_secret(name.encode()))
        self.ledger = Ledger(
            PARAMS, mode, self.keys,
            {name: pair.public for name, pair in self.pairs.items()},
            conf_delay=conf_delay, sync_delay=sync_delay,
        )

    def fund(self, user, amount):
        return self.ledger.seed_output(Output(amount, Sig(self.pairs[user].public)))

    def spend(self, user, outpoint, outputs, extra_preimages=()):
        """Build a transaction spending one single-sig outpoint of `user`."""
        tx = make_transaction([(outpoint, Witness.build())], outputs)
        pair = self.pairs[user]
        witness = Witness.build(
            signatures={pair.public: pair.sign(tx.txid)}, preimages=extra_preimages
        )
        return tx.with_witnesses({0: witness})


def test_timing_params_validation():
    PARAMS.validate()
    with pytest.raises(ConfigInvalid):
        TimingParams(0, 2, 20, 8, 10).validate()
    with pytest.raises(ConfigInvalid):
        # forward_delta must exceed sync_bound + conf_bound
        TimingParams(5, 2, 20, 7, 10).validate()
    with pytest.raises(ConfigInvalid):
        # watch interval too large for the contest window
        TimingParams(5, 2, 20, 8, 13).validate()
    # but tolerated when explicitly running an unsafe-watch experiment
    TimingParams(5, 2, 20, 8, 13).validate(allow_unsafe_watch=True)


def test_liveness_schedule_is_exact():
    w = World()
    op = w.fund("alice", 100)
    tx = w.spend("alice", op, [Output(100, Sig(w.pairs["bob"].public))])
    receipt = w.ledger.submit_transaction(tx, "alice", 10, conf_delay=5)
    assert receipt.scheduled_tick == 15
    events = w.ledger.advance(15)
    assert any(e.kind == "confirmed" and e.txid == tx.txid for e in events)
    assert w.ledger.status(tx.txid) == ("confirmed", 15)


def test_conf_delay_range_enforced():
    w = World()
    op = w.fund("alice", 100)
    tx = w.spend("alice", op, [Output(100, Sig(w.pairs["bob"].public))])
    with pytest.raises(ConfigInvalid):
        w.ledger.submit_transaction(tx, "alice", 0, conf_delay=0)
    with pytest.raises(ConfigInvalid):
        w.ledger.submit_transaction(tx, "alice", 0, conf_delay=PARAMS.conf_bound + 1)


def test_conflicting_transactions_exactly_one_confirms():
    # oracle: enumerate both submission orders; in each exactly one confirms
    for first_submitter in ("a_first", "b_first"):
        w = World()
        op = w.fund("alice", 100)
        tx_a = w.spend("alice", op, [Output(100, Sig(w.pairs["alice"].public))])
        tx_b = w.spend("alice", op, [Output(100, Sig(w.pairs["bob"].public))])
        order = [tx_a, tx_b] if first_submitter == "a_first" else [tx_b, tx_a]
        w.ledger.submit_transaction(order[0], "alice", 10, conf_delay=1)
        w.ledger.submit_transaction(order[1], "alice", 11, conf_delay=1)
        w.ledger.advance(30)
        statuses = {w.ledger.status(t.txid)[0] for t in (tx_a, tx_b)}
        assert statuses == {"confirmed", "rejected"}
        winner = order[0]
        assert w.ledger.status(winner.txid)[0] == "confirmed"
        loser = order[1]
        assert w.ledger.status(loser.txid) == ("rejected", InvalidReason.ALREADY_SPENT)


def test_same_tick_conflict_broken_by_submission_order():
    w = World()
    op = w.fund("alice", 100)
    tx_a = w.spend("alice", op, [Output(100, Sig(w.pairs["alice"].public))])
    tx_b = w.spend("alice", op, [Output(100, Sig(w.pairs["bob"].public))])
    w.ledger.submit_transaction(tx_b, "alice", 10, conf_delay=3)
    w.ledger.submit_transaction(tx_a, "alice", 11, conf_delay=2)  # same scheduled tick 13
    w.ledger.advance(13)
    assert w.ledger.status(tx_b.txid)[0] == "confirmed"
    assert w.ledger.status(tx_a.txid)[0] == "rejected"


def test_child_of_pending_parent_waits():
    w = World()
    op = w.fund("alice", 100)
    parent = w.spend("alice", op, [Output(100, Sig(w.pairs["alice"].public))])
    child = w.spend("alice", parent.outpoint(0), [Output(100, Sig(w.pairs["bob"].public))])
    w.ledger.submit_transaction(parent, "alice", 10, conf_delay=5)   # confirms at 15
    receipt = w.ledger.submit_transaction(child, "alice", 10, conf_delay=1)
    assert receipt.scheduled_tick == 16  # pushed past the parent
    w.ledger.advance(16)
    assert w.ledger.status(parent.txid)[0] == "confirmed"
    assert w.ledger.status(child.txid)[0] == "confirmed"


def test_child_rejected_when_parent_rejected():
    w = World()
    op = w.fund("alice", 100)
    winner = w.spend("alice", op, [Output(100, Sig(w.pairs["alice"].public))])
    loser = w.spend("alice", op, [Output(100, Sig(w.pairs["bob"].public))])
    child = w.spend("bob", loser.outpoint(0), [Output(100, Sig(w.pairs["bob"].public))])
    w.ledger.submit_transaction(winner, "alice", 10, conf_delay=1)
    w.ledger.submit_transaction(loser, "alice", 11, conf_delay=1)
    w.ledger.submit_transaction(child, "bob", 11, conf_delay=1)
    w.ledger.advance(30)
    assert w.ledger.status(child.txid) == ("rejected", InvalidReason.UNKNOWN_OUTPOINT)


def test_validity_judged_at_confirmation_tick():
    # a time-locked spend submitted early is judged (and rejected) at its
    # confirmation tick, not retried later
    w = World()
    op = w.fund("alice", 50)
    locked = w.spend(
        "alice", op, [Output(50, all_of(Sig(w.pairs["bob"].public), AbsoluteTime(100)))]
    )
    w.ledger.submit_transaction(locked, "alice", 0, conf_delay=1)
    w.ledger.advance(1)
    spend = w.spend("bob", locked.outpoint(0), [Output(50, Sig(w.pairs["bob"].public))])
    w.ledger.submit_transaction(spend, "bob", 50, conf_delay=5)  # judged at 55 < 100
    w.ledger.advance(60)
    assert w.ledger.status(spend.txid) == ("rejected", InvalidReason.CONDITION_UNSATISFIED)
    # resubmission once the lock matured succeeds
    w.ledger.submit_transaction(spend, "bob", 95, conf_delay=5)
    w.ledger.advance(100)
    assert w.ledger.status(spend.txid)[0] == "confirmed"


def test_value_mismatch_rejected():
    w = World()
    op = w.fund("alice", 100)
    bad = w.spend("alice", op, [Output(99, Sig(w.pairs["bob"].public))])
    assert w.ledger.validate_transaction(bad, 1).reason == InvalidReason.VALUE_MISMATCH


def test_condition_unsatisfied_carries_input_index():
    w = World()
    op_a = w.fund("alice", 10)
    op_b = w.fund("bob", 5)
    tx = make_transaction(
        [(op_a, Witness.build()), (op_b, Witness.build())],
        [Output(15, Sig(w.pairs["alice"].public))],
    )
    pa = w.pairs["alice"]
    tx = tx.with_witnesses({0: Witness.build(signatures={pa.public: pa.sign(tx.txid)})})
    verdict = w.ledger.validate_transaction(tx, 1)
    assert not verdict.ok
    assert verdict.reason == InvalidReason.CONDITION_UNSATISFIED
    assert verdict.input_index == 1


def test_affected_users_funding_shape():
    # spending a single-sig output of alice into a 2-of-2 with bob affects both
    w = World(extra_users=("carol",))
    op = w.fund("alice", 100)
    two_of_two = all_of(Sig(w.pairs["alice"].public), Sig(w.pairs["bob"].public))
    tx = w.spend("alice", op, [Output(100, two_of_two)])
    assert w.ledger.affected_users(tx) == {"alice", "bob"}


def test_affected_users_singleton_and_walk_oracle():
    w = World(extra_users=("carol",))
    op = w.fund("alice", 100)
    tx = w.spend("alice", op, [Output(100, Sig(w.pairs["alice"].public))])
    assert w.ledger.affected_users(tx) == {"alice"}

    # oracle: walk every condition tree of outputs and spent outputs
    mixed = w.spend(
        "alice", tx.outpoint(0),
        [Output(60, Sig(w.pairs["bob"].public)),
         Output(40, any_of(Sig(w.pairs["carol"].public), Preimage(b"y" * 32)))],
    )
    w.ledger.submit_transaction(tx, "alice", 0, conf_delay=1)
    w.ledger.advance(1)
    expected = {"alice", "bob", "carol"}
    assert w.ledger.affected_users(mixed) == expected


def test_affected_users_unknown_outpoint():
    w = World()
    ghost = w.spend("alice", w.fund("alice", 1), [Output(1, Sig(w.pairs["alice"].public))])
    orphan = make_transaction([(ghost.outpoint(0), Witness.build())],
                              [Output(1, Sig(w.pairs["alice"].public))])
    with pytest.raises(UnknownOutpointError):
        w.ledger.affected_users(orphan)


def test_delivery_bounds_and_visibility_boundary():
    w = World(extra_users=("carol",), sync_delay=2)
    op = w.fund("alice", 100)
    tx = w.spend("alice", op, [Output(100, all_of(Sig(w.pairs["alice"].public),
                                                  Sig(w.pairs["bob"].public)))])
    w.ledger.submit_transaction(tx, "alice", 10, conf_delay=5)
    w.ledger.advance(16)
    # before the delivery tick the transaction is not visible
    assert w.ledger.visible_transactions("alice", 16) == []
    w.ledger.advance(17)
    assert [t.txid for t, _ in w.ledger.visible_transactions("alice", 17)] == [tx.txid]
    assert [t.txid for t, _ in w.ledger.visible_transactions("bob", 17)] == [tx.txid]
    # unaffected user never sees it in affected-users mode
    assert w.ledger.visible_transactions("carol", 1000) == []
    # determinism: same query twice
    assert (w.ledger.visible_transactions("alice", 17)
            == w.ledger.visible_transactions("alice", 17))


def test_global_mode_delivers_to_everyone():
    w = World(mode=VisibilityMode.GLOBAL, extra_users=("carol",), sync_delay=0)
    op = w.fund("alice", 100)
    tx = w.spend("alice", op, [Output(100, Sig(w.pairs["alice"].public))])
    w.ledger.submit_transaction(tx, "alice", 0, conf_delay=1)
    w.ledger.advance(1)
    for user in ("alice", "bob", "carol"):
        assert [t.txid for t, _ in w.ledger.visible_transactions(user, 1)] == [tx.txid]


def test_mode_refinement_global_superset():
    # the same history delivered in both modes: global delivery is a superset
    # restricted to affected users, with identical delivery ticks
    def run(mode):
        w = World(mode=mode, extra_users=("carol",), sync_delay=1)
        op = w.fund("alice", 100)
        tx = w.spend("alice", op, [Output(100, Sig(w.pairs["bob"].public))])
        w.ledger.submit_transaction(tx, "alice", 0, conf_delay=2)
        events = w.ledger.advance(10)
        return {(e.user, e.tick) for e in events if e.kind == "delivered"}

    affected = run(VisibilityMode.AFFECTED_USERS)
    global_ = run(VisibilityMode.GLOBAL)
    assert affected <= global_


def test_persistence_append_only():
    w = World()
    op = w.fund("alice", 100)
    tx = w.spend("alice", op, [Output(100, Sig(w.pairs["bob"].public))])
    w.ledger.submit_transaction(tx, "alice", 0, conf_delay=1)
    w.ledger.advance(1)
    before = w.ledger.confirmed_ids()
    w.ledger.advance(1000)
    assert before <= w.ledger.confirmed_ids()
    assert w.ledger.status(tx.txid) == ("confirmed", 1)


def test_preimage_registry():
    w = World(mode=VisibilityMode.GLOBAL)
    x = b"x-value"
    assert w.ledger.register_preimage(x, 50) == 50
    # re-registration keeps the first tick
    assert w.ledger.register_preimage(x, 60) == 50
    assert w.ledger.preimage_registrations()[hash_image(x)] == 50

    affected = World(mode=VisibilityMode.AFFECTED_USERS)
    with pytest.raises(ModeUnsupported):
        affected.ledger.register_preimage(x, 1)


def test_registry_gated_conditions_confirm_only_in_global_mode():
    x = b"x-value"
    y = hash_image(x)
    for mode, expect in ((VisibilityMode.GLOBAL, "confirmed"),
                         (VisibilityMode.AFFECTED_USERS, "rejected")):
        w = World(mode=mode)
        op = w.fund("alice", 10)
        from pcnsim.conditions import PreimageRegisteredBefore
        gated = w.spend("alice", op, [Output(10, PreimageRegisteredBefore(y, 60))])
        w.ledger.submit_transaction(gated, "alice", 0, conf_delay=1)
        w.ledger.advance(1)
        if mode is VisibilityMode.GLOBAL:
            w.ledger.register_preimage(x, 50)
        claim = make_transaction([(gated.outpoint(0), Witness.build())],
                                 [Output(10, Sig(w.pairs["bob"].public))])
        w.ledger.submit_transaction(claim, "bob", 55, conf_delay=1)
        w.ledger.advance(56)
        assert w.ledger.status(claim.txid)[0] == expect
