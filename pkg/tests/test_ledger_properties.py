"""Randomized ledger histories checking the four first-layer guarantees.

A generated script seeds users with funds and replays a mix of valid
spends, double spends, bad witnesses, value mismatches, and time-locked
spends at random ticks with random (in-range) confirmation and delivery
latencies. The properties are then checked over the full history:

  liveness      confirmation happens exactly at the scheduled tick, never
                more than conf_bound after submission
  delivery      every affected user receives a confirmed transaction
                within sync_bound of confirmation
  persistence   the confirmed set only grows
  validity      replaying every confirmed transaction against a shadow
                UTXO set at its confirmation tick finds no invalid one
"""

from random import Random

from hypothesis import given, settings, strategies as st

from pcnsim.conditions import AbsoluteTime, RelativeDelay, Sig, all_of, any_of, Preimage
from pcnsim.crypto import KeyPair, KeyRegistry, hash_image
from pcnsim.ledger import Ledger, TimingParams, VisibilityMode
from pcnsim.transactions import Output, Witness, make_transaction

PARAMS = TimingParams(conf_bound=5, sync_bound=2, self_delay=20, forward_delta=8,
                      watch_interval=10)

scripts = st.fixed_dictionaries({
    "seed": st.integers(0, 2**32 - 1),
    "n_users": st.integers(2, 10),
    "n_tx": st.integers(1, 50),
    "mode": st.sampled_from(["affected_user", "global"]),
})


class History:
    def __init__(self, script):
        rng = Random(script["seed"])
        self.rng = rng
        self.keys = KeyRegistry()
        names = [f"u{i}" for i in range(script["n_users"])]
        self.pairs = {n: self.keys.register(KeyPair.from_secret(n.encode())) for n in names}
        self.ledger = Ledger(PARAMS, VisibilityMode(script["mode"]), self.keys,
                             {n: p.public for n, p in self.pairs.items()})
        self.spendable = {}  # outpoint -> (owner, amount, kind, extra)
        self.submissions = {}  # txid -> (submit tick, scheduled tick)
        for name in names:
            amount = rng.randint(1, 50)
            op = self.ledger.seed_output(Output(amount, Sig(self.pairs[name].public)))
            self.spendable[op] = (name, amount, "sig", None)
        self.spent_used = []
        self.horizon = 0

    def random_condition(self, owner, now):
        roll = self.rng.random()
        pub = self.pairs[owner].public
        if roll < 0.5:
            return ("sig", Sig(pub), None)
        if roll < 0.7:
            delay = self.rng.randint(1, 12)
            return ("delayed", all_of(Sig(pub), RelativeDelay(delay)), delay)
        if roll < 0.85:
            at = now + self.rng.randint(1, 15)
            return ("absolute", all_of(Sig(pub), AbsoluteTime(at)), at)
        x = self.rng.randbytes(8)
        return ("preimage", any_of(Sig(pub), Preimage(hash_image(x))), x)

    def build_random_tx(self, now):
        rng = self.rng
        kind = rng.random()
        if self.spendable and kind < 0.75:
            op = rng.choice(sorted(self.spendable))
            owner, amount, ckind, extra = self.spendable.pop(op)
            receiver = rng.choice(sorted(self.pairs))
            out_kind, cond, out_extra = self.random_condition(receiver, now)
            tx = make_transaction([(op, Witness.build())], [Output(amount, cond)])
            pair = self.pairs[owner]
            preimages = [extra] if ckind == "preimage" and rng.random() < 0.8 else []
            witness = Witness.build(signatures={pair.public: pair.sign(tx.txid)},
                                    preimages=preimages)
            tx = tx.with_witnesses({0: witness})
            self.spendable[tx.outpoint(0)] = (receiver, amount, out_kind, out_extra)
            self.spent_used.append((op, owner, amount))
            return tx
        if self.spent_used and kind < 0.85:
            # deliberate double spend
            op, owner, amount = rng.choice(self.spent_used)
            tx = make_transaction([(op, Witness.build())],
                                  [Output(amount, Sig(self.pairs[owner].public))])
            pair = self.pairs[owner]
            return tx.with_witnesses({0: Witness.build(
                signatures={pair.public: pair.sign(tx.txid)})})
        if self.spendable and kind < 0.95:
            # bad witness: signed by the wrong key
            op = rng.choice(sorted(self.spendable))
            owner, amount, _, _ = self.spendable[op]
            wrong = rng.choice(sorted(self.pairs))
            tx = make_transaction([(op, Witness.build())],
                                  [Output(amount, Sig(self.pairs[owner].public))])
            pair = self.pairs[wrong]
            return tx.with_witnesses({0: Witness.build(
                signatures={pair.public: pair.sign(tx.txid)})})
        if self.spendable:
            # value mismatch
            op = rng.choice(sorted(self.spendable))
            owner, amount, _, _ = self.spendable[op]
            tx = make_transaction([(op, Witness.build())],
                                  [Output(amount + 1, Sig(self.pairs[owner].public))])
            pair = self.pairs[owner]
            return tx.with_witnesses({0: Witness.build(
                signatures={pair.public: pair.sign(tx.txid)})})
        return None

    def run(self, n_tx):
        rng = self.rng
        now = 0
        snapshots = []
        for _ in range(n_tx):
            now += rng.randint(0, 8)
            if now > 450:
                break
            self.ledger.advance(now)
            tx = self.build_random_tx(now)
            if tx is None:
                continue
            delay = rng.randint(1, PARAMS.conf_bound)
            receipt = self.ledger.submit_transaction(tx, "u0", now, conf_delay=delay)
            self.submissions[tx.txid] = (now, receipt.scheduled_tick)
            snapshots.append(self.ledger.confirmed_ids())
        self.horizon = min(500, now + PARAMS.conf_bound + PARAMS.sync_bound + 1)
        self.ledger.advance(self.horizon)
        snapshots.append(self.ledger.confirmed_ids())
        return snapshots


@settings(max_examples=40, deadline=None)
@given(scripts)
def test_four_ledger_properties(script):
    history = History(script)
    snapshots = history.run(script["n_tx"])
    ledger = history.ledger
    events = ledger.log

    confirmed = {e.txid: e.tick for e in events if e.kind == "confirmed"}

    # liveness: confirmation at the scheduled tick, within conf_bound
    for txid, conf_tick in confirmed.items():
        submit_tick, scheduled = history.submissions[txid]
        assert conf_tick == scheduled
        assert 0 < conf_tick - submit_tick <= PARAMS.conf_bound

    # affected user delivery within sync_bound
    delivered = {}
    for e in events:
        if e.kind == "delivered":
            delivered.setdefault(e.txid, {})[e.user] = e.tick
    for txid, conf_tick in confirmed.items():
        tx, _ = ledger.confirmed_transaction(txid)
        audience = (set(ledger.users) if script["mode"] == "global"
                    else ledger.affected_users(tx))
        for user in audience:
            assert user in delivered.get(txid, {}), (txid.hex()[:8], user)
            assert delivered[txid][user] - conf_tick <= PARAMS.sync_bound

    # persistence: the confirmed set only grows
    for earlier, later in zip(snapshots, snapshots[1:]):
        assert earlier <= later

    # validity gate: replay every confirmed transaction against a shadow
    # UTXO set at its confirmation tick. Seed the shadow with every genesis
    # output (spent or not: genesis outpoints have no confirmed parent).
    shadow = {}
    for op, out, tick in ledger.utxo_items():
        if op.txid not in confirmed:
            shadow[op] = out
    for op, out in ledger._spent_outputs.items():
        if op.txid not in confirmed:
            shadow[op] = out
    order = sorted(confirmed.items(), key=lambda kv: (kv[1], kv[0]))
    registry = ledger.preimage_registrations() if script["mode"] == "global" else None
    from pcnsim.conditions import evaluate_condition
    conf_tick_of = dict()
    for txid, tick in order:
        tx, _ = ledger.confirmed_transaction(txid)
        total_in = 0
        for i, txin in enumerate(tx.inputs):
            assert txin.outpoint in shadow, "confirmed tx spent a missing output"
            out = shadow.pop(txin.outpoint)
            spent_conf = conf_tick_of.get(txin.outpoint.txid, 0)
            assert evaluate_condition(
                out.condition, txin.witness, spent_conf, tick,
                spending_txid=tx.txid, keys=ledger.keys, preimage_registry=registry,
            ), "confirmed tx failed condition replay"
            total_in += out.amount
        assert total_in == tx.output_amount(), "confirmed tx broke value conservation"
        for i, out in enumerate(tx.outputs):
            shadow[tx.outpoint(i)] = out
        conf_tick_of[txid] = tick


@settings(max_examples=15, deadline=None)
@given(scripts)
def test_no_double_spend_over_history(script):
    history = History(script)
    history.run(script["n_tx"])
    ledger = history.ledger
    spent_by = {}
    for e in ledger.log:
        if e.kind != "confirmed":
            continue
        tx, _ = ledger.confirmed_transaction(e.txid)
        for txin in tx.inputs:
            assert txin.outpoint not in spent_by, "outpoint spent twice"
            spent_by[txin.outpoint] = e.txid
