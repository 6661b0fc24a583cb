"""User agents: honest protocol drivers and adversarial deviations.

An honest agent reacts to two kinds of input on different clocks.
Protocol traffic (peer messages, contract secrets arriving in deliveries)
is handled the moment it arrives: peers hold reliable connections while a
payment is in flight. Ledger *watching* (spotting closes and breaches,
claiming outputs) runs only every `watch_interval` ticks, which is
exactly the duty the security property conditions on. Deadline-bound
actions the agent already knows about (timeout spends, sweeping matured
outputs) fire on exact-tick timers.

Adversarial strategies wrap the honest machinery and deviate by
suppressing messages, actions, or submissions, or by injecting extra
submissions (publishing old commitments and racing for their outputs).
Adversaries watch the ledger every tick: the security claim must hold
against a maximally responsive opponent.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .channel import (
    ChannelEndpoint,
    ChannelMessage,
    CommitmentSigned,
    Phase,
    PlannedSubmission,
    RevokeAndAck,
    UpdateAdd,
    UpdateRedeem,
)
from .crypto import KeyPair, hash_image
from .errors import PcnError
from .ledger import Ledger
from .transactions import Transaction


@dataclass(frozen=True)
class Envelope:
    channel_id: str
    sender: str
    recipient: str
    payload: ChannelMessage


class Strategy:
    """Honest baseline; subclasses override the gates they deviate on."""

    name = "honest"

    def __init__(self, params: Mapping[str, object] | None = None) -> None:
        self.params = dict(params or {})

    def allows_send(self, payload: ChannelMessage, now: int) -> bool:
        return True

    def allows_receive(self, payload: ChannelMessage, now: int) -> bool:
        return True

    def allows_submit(self, plan: PlannedSubmission, now: int) -> bool:
        return True

    def allows_action(self, action: str, now: int) -> bool:
        return True

    def watches_every_tick(self) -> bool:
        return False

    def on_tick(self, agent: "Agent", now: int) -> None:
        pass


class Honest(Strategy):
    pass


class SilentAfter(Strategy):
    """Stops sending, submitting, and acting from the configured tick on."""

    name = "silent_after"

    def _active(self, now: int) -> bool:
        return now < int(self.params.get("tick", 0))

    def allows_send(self, payload, now):
        return self._active(now)

    def allows_submit(self, plan, now):
        return self._active(now)

    def allows_action(self, action, now):
        return self._active(now)


class _Publisher(Strategy):
    """Shared engine: publish one of our commitment states at a tick, stop
    cooperating off-ledger, and race for every output the published state
    lets us claim (the endpoint watcher does that once it sees the
    commitment confirm)."""

    def __init__(self, params=None):
        super().__init__(params)
        self.published = False

    def _tick(self) -> int:
        return int(self.params.get("tick", 0))

    def _state_for(self, endpoint: ChannelEndpoint) -> int | None:
        raise NotImplementedError

    def watches_every_tick(self) -> bool:
        return True

    def allows_send(self, payload, now):
        return not self.published

    def allows_action(self, action, now):
        if self.published and action in ("initiate_redeem", "forward_add", "close"):
            return False
        return True

    def on_tick(self, agent: "Agent", now: int) -> None:
        if self.published or now < self._tick():
            return
        for endpoint in agent.sorted_endpoints():
            if endpoint.phase not in (Phase.OPERATIONAL, Phase.UPDATING):
                continue
            state = self._state_for(endpoint)
            if state is None:
                continue
            record = endpoint.own_records.get(state)
            if record is None or record.peer_sig is None:
                continue
            plans = endpoint.publication_plan(state, agent.preimages, now, purpose="breach_commit")
            endpoint.phase = Phase.CLOSING
            for plan in plans:
                agent.schedule_submission(plan, now)
            self.published = True


class PublishOutdated(_Publisher):
    """Publish a revoked state; only meaningful while newer states exist."""

    name = "publish_outdated"

    def _state_for(self, endpoint: ChannelEndpoint) -> int | None:
        state = int(self.params.get("state", 1))
        if state >= endpoint.n:
            return None  # not outdated at the action tick; no-op
        return state


class PublishLatestAndRace(_Publisher):
    name = "publish_latest_and_race"

    def _state_for(self, endpoint: ChannelEndpoint) -> int | None:
        signed = [s for s, r in endpoint.own_records.items() if r.peer_sig is not None]
        return max(signed) if signed else None


class WithholdPreimage(Strategy):
    """Never reveals a payment secret: no redeems, no preimage claims, no
    registry writes."""

    name = "withhold_preimage"

    def watches_every_tick(self) -> bool:
        return True

    def allows_action(self, action, now):
        return action != "initiate_redeem"

    def allows_submit(self, plan, now):
        return not _reveals_secret(plan)


class WithholdRedeemForward(Strategy):
    """Accepts the downstream redeem (learning the secret) but never passes
    it on off-ledger; claims contested outputs on-ledger instead, which is
    where the honest upstream recovers the secret from."""

    name = "withhold_redeem_forward"

    def watches_every_tick(self) -> bool:
        return True

    def allows_action(self, action, now):
        return action != "initiate_redeem"


class StallUpdate(Strategy):
    """Goes quiet at one step of the update negotiation."""

    name = "stall_update"
    KINDS = ("update_response", "commitment_signed", "revoke_and_ack")

    def _stall_on(self) -> str:
        return str(self.params.get("stall_on", "commitment_signed"))

    def allows_receive(self, payload, now):
        if self._stall_on() == "update_response" and isinstance(payload, (UpdateAdd, UpdateRedeem)):
            return False
        return True

    def allows_send(self, payload, now):
        if self._stall_on() == "commitment_signed" and isinstance(payload, CommitmentSigned):
            return False
        if self._stall_on() == "revoke_and_ack" and isinstance(payload, RevokeAndAck):
            return False
        return True


STRATEGIES: dict[str, type[Strategy]] = {
    cls.name: cls
    for cls in (Honest, SilentAfter, PublishOutdated, PublishLatestAndRace,
                WithholdPreimage, StallUpdate, WithholdRedeemForward)
}


def _reveals_secret(plan: PlannedSubmission) -> bool:
    if plan.register_preimages:
        return True
    return any(txin.witness.preimages for txin in plan.tx.inputs)


class Agent:
    """One user: identity key, channel endpoints, secrets, timers."""

    def __init__(
        self,
        user: str,
        pair: KeyPair,
        ledger: Ledger,
        strategy: Strategy,
        watch_interval: int,
        watch_phase: int,
        *,
        send_fn: Callable[[Envelope], None],
        submit_fn: Callable[["Agent", PlannedSubmission, int], None],
        note_fn: Callable[[int, str, "Agent", dict], None],
    ) -> None:
        self.user = user
        self.pair = pair
        self.ledger = ledger
        self.strategy = strategy
        self.watch_interval = watch_interval
        self.watch_phase = watch_phase % watch_interval
        self._send_fn = send_fn
        self._submit_fn = submit_fn
        self._note = note_fn

        self.endpoints: dict[str, ChannelEndpoint] = {}
        self.preimages: dict[bytes, bytes] = {}
        self.learn_ticks: dict[bytes, int] = {}
        self.funding_source: tuple | None = None  # (outpoint, amount)
        self._timers: list[tuple[int, int, str, object]] = []
        self._timer_seq = 0
        self._seen_visible = 0
        self._seen_registry: set[bytes] = set()
        self._rejections: list[bytes] = []
        self._closed_by_me: set[str] = set()
        self.watch_log: list[int] = []

    # -- plumbing -----------------------------------------------------------

    def is_honest(self) -> bool:
        return isinstance(self.strategy, Honest)

    def sorted_endpoints(self) -> list[ChannelEndpoint]:
        return [self.endpoints[cid] for cid in sorted(self.endpoints)]

    def send(self, channel_id: str, payload: ChannelMessage, now: int) -> None:
        endpoint = self.endpoints[channel_id]
        if not self.strategy.allows_send(payload, now):
            self._note(now, "watcher", self, {"action": "suppressed_send",
                                              "channel": channel_id,
                                              "msg": type(payload).__name__})
            return
        self._send_fn(Envelope(channel_id=channel_id, sender=self.user,
                               recipient=endpoint.peer_id, payload=payload))

    def schedule_submission(self, plan: PlannedSubmission, now: int) -> None:
        if plan.not_before <= now:
            self._submit(plan, now)
        else:
            self._push_timer(plan.not_before, "submit", plan)

    def _submit(self, plan: PlannedSubmission, now: int) -> None:
        if not self.strategy.allows_submit(plan, now):
            self._note(now, "watcher", self, {"action": "suppressed_submit",
                                              "channel": plan.channel_id,
                                              "purpose": plan.purpose})
            return
        self._submit_fn(self, plan, now)

    def _push_timer(self, tick: int, kind: str, payload: object) -> None:
        heapq.heappush(self._timers, (tick, self._timer_seq, kind, payload))
        self._timer_seq += 1

    def note_rejection(self, txid: bytes) -> None:
        self._rejections.append(txid)

    def learn_preimage(self, x: bytes, now: int) -> None:
        image = hash_image(x)
        if image in self.preimages:
            return
        self.preimages[image] = x
        self.learn_ticks[image] = now
        self._note(now, "watcher", self, {"action": "learned_preimage", "image": image})
        self._on_new_preimage(now)

    def _on_new_preimage(self, now: int) -> None:
        self._redeem_duties(now)
        for endpoint in self.sorted_endpoints():
            for plan in endpoint.preimage_actions(self.preimages, now):
                self.schedule_submission(plan, now)
            if endpoint.closing_record is not None:
                submissions, timers = endpoint.reconcile(self.preimages, now)
                self._apply_reconcile(endpoint, submissions, timers, now)

    # -- push-phase handlers -------------------------------------------------

    def on_delivery(self, tx: Transaction, conf_tick: int, now: int) -> None:
        for txin in tx.inputs:
            for x in sorted(txin.witness.preimages):
                self.learn_preimage(x, now)
        for endpoint in self.sorted_endpoints():
            if (endpoint.phase == Phase.OPENING and endpoint.funding_outpoint is not None
                    and tx.txid == endpoint.funding_outpoint.txid):
                for msg in endpoint.on_funding_seen(conf_tick, now):
                    self.send(endpoint.channel_id, msg, now)
            elif endpoint.phase in (Phase.CLOSING, Phase.CLOSED):
                # a close contest is in progress: monitor actively instead
                # of waiting for the next periodic check
                endpoint.note_visible([(tx, conf_tick)])
                self._reconcile_one(endpoint, now)

    def on_registry_update(self, secrets: Mapping[bytes, bytes], now: int) -> None:
        """The registry is globally readable, so registered secrets are
        learned by every agent at the registration tick."""
        for image in sorted(secrets):
            if image in self._seen_registry:
                continue
            self._seen_registry.add(image)
            self.learn_preimage(secrets[image], now)

    def handle_envelope(self, env: Envelope, now: int) -> None:
        endpoint = self.endpoints.get(env.channel_id)
        if endpoint is None:
            return
        if not self.strategy.allows_receive(env.payload, now):
            self._note(now, "watcher", self, {"action": "suppressed_receive",
                                              "channel": env.channel_id,
                                              "msg": type(env.payload).__name__})
            return
        if isinstance(env.payload, UpdateRedeem):
            self.learn_preimage(env.payload.preimage, now)
        try:
            messages, submissions = endpoint.handle_message(env.payload, now)
        except PcnError as exc:
            self._note(now, "watcher", self, {"action": "protocol_error",
                                              "channel": env.channel_id,
                                              "detail": type(exc).__name__})
            return
        for msg in messages:
            self.send(env.channel_id, msg, now)
        for plan in submissions:
            self.schedule_submission(plan, now)
        self._after_open_step(endpoint)

    def _after_open_step(self, endpoint: ChannelEndpoint) -> None:
        # track the funder's change output as the next funding source
        funding_tx = endpoint._open.get("funding_tx") if endpoint.is_funder() else None
        if funding_tx is not None and not endpoint._open.get("source_consumed"):
            endpoint._open["source_consumed"] = True
            if len(funding_tx.outputs) > 1:
                self.funding_source = (funding_tx.outpoint(1), funding_tx.outputs[1].amount)
            else:
                self.funding_source = None

    # -- per-tick behavior ----------------------------------------------------

    def on_tick(self, now: int) -> None:
        while self._timers and self._timers[0][0] <= now:
            _, _, kind, payload = heapq.heappop(self._timers)
            if kind == "submit":
                self._submit(payload, now)
            elif kind == "reconcile":
                self._reconcile_one(self.endpoints[payload], now)
        self._redeem_duties(now)
        if self._watch_due(now):
            self.watch(now)
        self.strategy.on_tick(self, now)

    def deadline_pass(self, now: int) -> None:
        """Run after the tick's message cascade settled, so a redeem that
        just completed counts before the close trigger is evaluated."""
        self._deadline_closes(now)

    def _watch_due(self, now: int) -> bool:
        if self.strategy.watches_every_tick():
            return True
        return now % self.watch_interval == self.watch_phase

    def _redeem_duties(self, now: int) -> None:
        """Redeem any incoming contract whose secret we hold, channel allowing."""
        if not self.strategy.allows_action("initiate_redeem", now):
            return
        for endpoint in self.sorted_endpoints():
            if endpoint.phase != Phase.OPERATIONAL or endpoint.pending_update is not None:
                continue
            for image in sorted(endpoint.htlcs):
                htlc = endpoint.htlcs[image]
                if htlc.outgoing_for(self.user) or image not in self.preimages:
                    continue
                msgs = endpoint.begin_update("redeem", now, preimage=self.preimages[image])
                self._note(now, "watcher", self, {"action": "redeem",
                                                  "channel": endpoint.channel_id,
                                                  "image": image})
                for msg in msgs:
                    self.send(endpoint.channel_id, msg, now)
                break  # one negotiation per channel at a time

    def _deadline_closes(self, now: int) -> None:
        if not self.strategy.allows_action("close", now):
            return
        for endpoint in self.sorted_endpoints():
            if endpoint.phase not in (Phase.OPERATIONAL, Phase.UPDATING):
                continue
            if endpoint.deadline_due(now):
                self.close_channel(endpoint.channel_id, now, reason="deadline")

    def close_channel(self, channel_id: str, now: int, reason: str) -> None:
        endpoint = self.endpoints[channel_id]
        if channel_id in self._closed_by_me:
            return
        if not self.strategy.allows_action("close", now):
            return
        self._closed_by_me.add(channel_id)
        if reason == "deadline":
            # a contract deadline forces this close; read the ledger first,
            # since the counterparty may already have gone on-ledger and the
            # claims below race its deadline spends
            self.watch(now)
        if endpoint.closing_record is not None:
            self._note(now, "watcher", self, {"action": "close_superseded",
                                              "channel": channel_id, "reason": reason})
            return
        if endpoint.phase not in (Phase.OPERATIONAL, Phase.UPDATING):
            return
        plans = endpoint.close_channel(now, self.preimages)
        self._note(now, "watcher", self, {"action": "close", "channel": channel_id,
                                          "reason": reason})
        for plan in plans:
            self.schedule_submission(plan, now)

    def watch(self, now: int) -> None:
        """Read the ledger: ingest news, then reconcile every endpoint."""
        if not self.watch_log or self.watch_log[-1] != now:
            self.watch_log.append(now)
        visible = self.ledger.visible_transactions(self.user, now)
        new = visible[self._seen_visible:]
        self._seen_visible = len(visible)
        rejected, self._rejections = self._rejections, []
        for endpoint in self.sorted_endpoints():
            for txid in rejected:
                endpoint.note_rejected(txid)
            if new:
                endpoint.note_visible(new)
            self._reconcile_one(endpoint, now)

    def _reconcile_one(self, endpoint: ChannelEndpoint, now: int) -> None:
        if endpoint.closing_record is None:
            return
        submissions, timers = endpoint.reconcile(self.preimages, now)
        self._apply_reconcile(endpoint, submissions, timers, now)

    def _apply_reconcile(self, endpoint: ChannelEndpoint,
                         submissions: list[PlannedSubmission], timers: list[int],
                         now: int) -> None:
        for plan in submissions:
            self._note(now, "watcher", self, {"action": plan.purpose,
                                              "channel": plan.channel_id,
                                              "tx": plan.tx.txid})
            self.schedule_submission(plan, now)
        for tick in timers:
            self._push_timer(tick, "reconcile", endpoint.channel_id)

    # -- scenario-driven actions ----------------------------------------------

    def initiate_open(self, channel_id: str, now: int) -> None:
        endpoint = self.endpoints[channel_id]
        if self.funding_source is None:
            raise PcnError(f"{self.user} has no funding source for {channel_id}")
        outpoint, amount = self.funding_source
        for msg in endpoint.begin_open(outpoint, amount, now):
            self.send(channel_id, msg, now)

    def initiate_add(self, channel_id: str, image: bytes, amount: int, deadline: int,
                     registry_gated: bool, now: int) -> bool:
        if not self.strategy.allows_action("forward_add", now):
            return False
        endpoint = self.endpoints[channel_id]
        if endpoint.phase != Phase.OPERATIONAL or endpoint.pending_update is not None:
            return False
        msgs = endpoint.begin_update("add", now, image=image, amount=amount,
                                     deadline=deadline, registry_gated=registry_gated)
        for msg in msgs:
            self.send(channel_id, msg, now)
        return True

    def has_pending_work(self) -> bool:
        return bool(self._timers)
