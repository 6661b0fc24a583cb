"""Deterministic discrete-event simulation harness.

Hosts one ledger, one agent per user (honest or adversarial), channel
endpoints, and payment coordinators. Each tick runs in fixed phases:

  1. ledger advance: confirmations, rejections, deliveries (pushed to
     agents: secrets are extracted from witnesses at delivery time)
  2. agent steps: timers, redeem duties, watch if due, strategy actions
  3. scenario drivers: channel opens, payment coordinator steps,
     settlement closes for idle channels
  4. message drain: peer messages cascade to a fixed point within the
     tick (reliable connections, no artificial latency), interleaved
     with payment forward-cascade progress
  5. deadline pass: the close-before-contract-deadline rule, evaluated
     on settled state

The whole run is a pure function of the scenario configuration; reruns
produce byte-identical traces.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field, replace
from random import Random

from .agents import STRATEGIES, Agent, Envelope
from .channel import ChannelEndpoint, Phase, PlannedSubmission
from .conditions import Sig
from .crypto import KeyPair, KeyRegistry, hash_image
from .errors import (
    ChannelUnknown,
    ConfigInvalid,
    GridTooLarge,
    NotHonest,
    PcnError,
)
from .ledger import Ledger, TimingParams, VisibilityMode
from .routing import (
    CONSTANT_TIMEOUT,
    STAGGERED,
    PaymentCoordinator,
    PaymentOutcome,
    plan_payment,
)
from .transactions import Outpoint, Output, Transaction, single_sig_owner


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class UserSpec:
    name: str
    initial_funds: int


@dataclass(frozen=True)
class ChannelSpec:
    funder: str
    peer: str
    capacity: int

    def users(self) -> tuple[str, str]:
        return (self.funder, self.peer)


@dataclass(frozen=True)
class PaymentSpec:
    path: tuple[str, ...]
    amount: int
    start: int
    mode: str = STAGGERED


@dataclass(frozen=True)
class AdversarySpec:
    user: str
    strategy: str
    params: tuple[tuple[str, object], ...] = ()

    def params_dict(self) -> dict:
        return dict(self.params)


@dataclass(frozen=True)
class ScenarioConfig:
    timing: TimingParams
    ledger_mode: str  # "affected_user" | "global"
    users: tuple[UserSpec, ...]
    channels: tuple[ChannelSpec, ...]
    payments: tuple[PaymentSpec, ...]
    adversaries: tuple[AdversarySpec, ...]
    horizon: int
    seed: int = 1
    conf_delay: int | None = None
    sync_delay: int | None = None
    watch_phase: tuple[tuple[str, int], ...] = ()
    allow_unsafe_watch: bool = False

    def mode(self) -> VisibilityMode:
        return VisibilityMode(self.ledger_mode)

    def user_names(self) -> list[str]:
        return [u.name for u in self.users]

    def adversary_of(self, user: str) -> AdversarySpec | None:
        for adv in self.adversaries:
            if adv.user == user:
                return adv
        return None

    def honest_users(self) -> set[str]:
        return {u.name for u in self.users
                if (a := self.adversary_of(u.name)) is None or a.strategy == "honest"}

    def watch_phase_of(self, user: str) -> int:
        return dict(self.watch_phase).get(user, 0)

    def validate(self) -> None:
        self.timing.validate(allow_unsafe_watch=self.allow_unsafe_watch)
        names = self.user_names()
        if len(set(names)) != len(names):
            raise ConfigInvalid("duplicate user names")
        known = set(names)
        pairs = set()
        for ch in self.channels:
            if ch.funder not in known or ch.peer not in known or ch.funder == ch.peer:
                raise ConfigInvalid(f"bad channel endpoints {ch.funder}/{ch.peer}")
            if ch.capacity <= 0:
                raise ConfigInvalid("channel capacity must be positive")
            pair = frozenset((ch.funder, ch.peer))
            if pair in pairs:
                raise ConfigInvalid(f"more than one channel between {ch.funder} and {ch.peer}")
            pairs.add(pair)
            funds = next(u.initial_funds for u in self.users if u.name == ch.funder)
            if funds < ch.capacity:
                raise ConfigInvalid(f"{ch.funder} cannot fund capacity {ch.capacity}")
        max_deadline = 0
        for p in self.payments:
            if p.amount <= 0:
                raise ConfigInvalid("payment amount must be positive")
            if p.mode not in (STAGGERED, CONSTANT_TIMEOUT):
                raise ConfigInvalid(f"unknown payment mode {p.mode}")
            if p.mode == CONSTANT_TIMEOUT and self.ledger_mode != "global":
                raise ConfigInvalid("constant_timeout payments require the global ledger mode")
            if len(p.path) < 2:
                raise ConfigInvalid("payment path needs at least two users")
            for a, b in zip(p.path, p.path[1:]):
                if frozenset((a, b)) not in pairs:
                    raise ConfigInvalid(f"no channel between {a} and {b} on a payment path")
            max_deadline = max(max_deadline,
                               p.start + (len(p.path) - 1) * self.timing.forward_delta)
        for adv in self.adversaries:
            if adv.user not in known:
                raise ConfigInvalid(f"unknown adversary user {adv.user}")
            if adv.strategy not in STRATEGIES:
                raise ConfigInvalid(f"unknown strategy {adv.strategy}")
        if len({a.user for a in self.adversaries}) != len(self.adversaries):
            raise ConfigInvalid("at most one strategy per user")
        floor = max_deadline + 2 * self.timing.conf_bound + self.timing.self_delay \
            + self.timing.watch_interval
        if self.horizon <= floor:
            raise ConfigInvalid(f"horizon {self.horizon} must exceed {floor}")
        conf = self.timing.conf_bound if self.conf_delay is None else self.conf_delay
        if not 1 <= conf <= self.timing.conf_bound:
            raise ConfigInvalid("conf_delay outside [1, conf_bound]")
        sync = self.timing.sync_bound if self.sync_delay is None else self.sync_delay
        if not 0 <= sync <= self.timing.sync_bound:
            raise ConfigInvalid("sync_delay outside [0, sync_bound]")
        for user, phase in self.watch_phase:
            if user not in known:
                raise ConfigInvalid(f"watch phase for unknown user {user}")
            if not 0 <= phase < self.timing.watch_interval:
                raise ConfigInvalid("watch phase outside [0, watch_interval)")

    # serialization (also the canonical form used for grid deduplication)

    def to_dict(self) -> dict:
        out: dict = {
            "timing": {
                "conf_bound": self.timing.conf_bound,
                "sync_bound": self.timing.sync_bound,
                "self_delay": self.timing.self_delay,
                "forward_delta": self.timing.forward_delta,
                "watch_interval": self.timing.watch_interval,
            },
            "ledger_mode": self.ledger_mode,
            "users": [{"name": u.name, "initial_funds": u.initial_funds} for u in self.users],
            "channels": [{"funder": c.funder, "peer": c.peer, "capacity": c.capacity}
                         for c in self.channels],
            "payments": [{"path": list(p.path), "amount": p.amount, "start": p.start,
                          "mode": p.mode} for p in self.payments],
            "adversaries": [{"user": a.user, "strategy": a.strategy,
                             "params": a.params_dict()} for a in self.adversaries],
            "horizon": self.horizon,
            "seed": self.seed,
        }
        if self.conf_delay is not None:
            out["conf_delay"] = self.conf_delay
        if self.sync_delay is not None:
            out["sync_delay"] = self.sync_delay
        if self.watch_phase:
            out["watch_phase"] = dict(self.watch_phase)
        return out

    @classmethod
    def from_dict(cls, data: dict, *, allow_unsafe_watch: bool = False) -> ScenarioConfig:
        if not isinstance(data, dict):
            raise ConfigInvalid("scenario must be a mapping")
        known_keys = {"timing", "ledger_mode", "users", "channels", "payments",
                      "adversaries", "horizon", "seed", "conf_delay", "sync_delay",
                      "watch_phase"}
        unknown = set(data) - known_keys
        if unknown:
            raise ConfigInvalid(f"unknown keys: {', '.join(sorted(unknown))}")
        for key in ("timing", "ledger_mode", "users", "channels", "payments",
                    "adversaries", "horizon"):
            if key not in data:
                raise ConfigInvalid(f"missing key: {key}")
        timing_data = data["timing"]
        timing_keys = {"conf_bound", "sync_bound", "self_delay", "forward_delta",
                       "watch_interval"}
        if set(timing_data) != timing_keys:
            raise ConfigInvalid("timing must carry exactly "
                                + ", ".join(sorted(timing_keys)))
        cfg = cls(
            timing=TimingParams(**{k: int(timing_data[k]) for k in timing_keys}),
            ledger_mode=str(data["ledger_mode"]),
            users=tuple(UserSpec(name=str(u["name"]), initial_funds=int(u["initial_funds"]))
                        for u in data["users"]),
            channels=tuple(ChannelSpec(funder=str(c["funder"]), peer=str(c["peer"]),
                                       capacity=int(c["capacity"])) for c in data["channels"]),
            payments=tuple(PaymentSpec(path=tuple(str(x) for x in p["path"]),
                                       amount=int(p["amount"]), start=int(p["start"]),
                                       mode=str(p.get("mode", STAGGERED)))
                           for p in data["payments"]),
            adversaries=tuple(AdversarySpec(user=str(a["user"]), strategy=str(a["strategy"]),
                                            params=tuple(sorted(a.get("params", {}).items())))
                              for a in data["adversaries"]),
            horizon=int(data["horizon"]),
            seed=int(data.get("seed", 1)),
            conf_delay=None if data.get("conf_delay") is None else int(data["conf_delay"]),
            sync_delay=None if data.get("sync_delay") is None else int(data["sync_delay"]),
            watch_phase=tuple(sorted((str(k), int(v))
                                     for k, v in data.get("watch_phase", {}).items())),
            allow_unsafe_watch=allow_unsafe_watch,
        )
        if cfg.ledger_mode not in ("affected_user", "global"):
            raise ConfigInvalid(f"unknown ledger_mode {cfg.ledger_mode}")
        cfg.validate()
        return cfg

    def canonical_key(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()


# -- trace --------------------------------------------------------------------


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    kind: str
    data: tuple[tuple[str, object], ...]

    def format_line(self) -> str:
        parts = [str(self.tick), self.kind]
        for key, value in self.data:
            if isinstance(value, bytes):
                value = value.hex()[:16]
            parts.append(f"{key}={value}")
        return " ".join(parts)


class EventTrace(list):
    def add(self, tick: int, kind: str, **fields: object) -> None:
        self.append(TraceEvent(tick=tick, kind=kind, data=tuple(fields.items())))

    def format_lines(self) -> list[str]:
        return [event.format_line() for event in self]


# -- results -------------------------------------------------------------------


@dataclass
class CloseRecord:
    channel_id: str
    t_close: int
    initiator: str
    snapshots: dict[str, dict]  # honest user -> channel snapshot at t_close


@dataclass
class PaymentRecord:
    index: int
    spec: PaymentSpec
    outcome: PaymentOutcome | None
    image: bytes | None = None
    deadlines: tuple[int, ...] = ()


@dataclass(frozen=True)
class Verdict:
    user: str
    channel_id: str
    secure: bool
    t_close: int
    deadline: int
    correct_balance: int
    swept_by_deadline: int
    last_sweep_tick: int | None
    shortfall: int
    evidence: tuple[tuple[int, int], ...]  # (tick, amount) sweeps for the pair

    @property
    def label(self) -> str:
        return "Secure" if self.secure else f"Violation(shortfall={self.shortfall})"


@dataclass
class FinalState:
    params: TimingParams
    honest: set[str]
    initial_funds: dict[str, int]
    balances: dict[str, int]
    unspent_total: int
    channel_stables: dict[str, dict[str, int]]
    channel_phases: dict[str, tuple[str, str]]
    close_records: dict[str, CloseRecord]
    sweeps: list[tuple[int, str, str, int, bytes]]  # tick, user, channel, amount, txid
    learn_ticks: dict[str, dict[bytes, int]]
    payments: list[PaymentRecord]
    verdicts: dict[tuple[str, str], Verdict] = field(default_factory=dict)

    def final_funds(self, user: str) -> int:
        on_ledger = self.balances.get(user, 0)
        in_channels = sum(stables.get(user, 0) for stables in self.channel_stables.values())
        return on_ledger + in_channels


def check_security(final: FinalState, user: str, channel_id: str,
                   t_close: int | None = None) -> Verdict:
    """Verdict for one honest user on one closed channel.

    The correct balance is taken from the user's channel state at the
    close-relevant tick: stable balance, plus outgoing contracts whose
    secret the user never learned by the deadline, plus incoming
    contracts whose secret it did learn. The user must have swept at
    least that amount into plain single-signature outputs by

        deadline = max(largest contract deadline, t_close)
                   + 2 * conf_bound + self_delay
    """
    if user not in final.honest:
        raise NotHonest(user)
    record = final.close_records.get(channel_id)
    if record is None or user not in record.snapshots:
        raise ChannelUnknown(channel_id)
    close_tick = record.t_close if t_close is None else t_close
    snapshot = record.snapshots[user]
    deadlines = [h["deadline"] for h in snapshot["htlcs"]]
    htlc_max = max(deadlines) if deadlines else close_tick
    deadline = max(htlc_max, close_tick) + 2 * final.params.conf_bound + final.params.self_delay

    learned = final.learn_ticks.get(user, {})
    balance = snapshot["stable"]
    for h in snapshot["htlcs"]:
        known_in_time = learned.get(h["image"], deadline + 1) <= deadline
        if h["outgoing"] and not known_in_time:
            balance += h["amount"]
        elif not h["outgoing"] and known_in_time:
            balance += h["amount"]

    pair_sweeps = [(t, amount) for t, u, ch, amount, _ in final.sweeps
                   if u == user and ch == channel_id]
    swept_by_deadline = sum(a for t, a in pair_sweeps if t <= deadline)
    last_tick = max((t for t, _ in pair_sweeps), default=None)
    shortfall = max(0, balance - swept_by_deadline)
    return Verdict(
        user=user, channel_id=channel_id, secure=shortfall == 0,
        t_close=close_tick, deadline=deadline, correct_balance=balance,
        swept_by_deadline=swept_by_deadline, last_sweep_tick=last_tick,
        shortfall=shortfall, evidence=tuple(pair_sweeps),
    )


# -- the simulation -------------------------------------------------------------


class Simulation:
    def __init__(self, cfg: ScenarioConfig) -> None:
        cfg.validate()
        self.cfg = cfg
        self.rng = Random(cfg.seed)
        self.trace = EventTrace()
        self.keys = KeyRegistry()
        self.now = 0

        self.user_pairs: dict[str, KeyPair] = {
            name: self.keys.new_pair(self.rng) for name in sorted(cfg.user_names())
        }
        self.ledger = Ledger(
            cfg.timing, cfg.mode(), self.keys,
            {name: pair.public for name, pair in self.user_pairs.items()},
            conf_delay=cfg.conf_delay, sync_delay=cfg.sync_delay,
        )
        self.queue: deque[Envelope] = deque()
        self.agents: dict[str, Agent] = {}
        for name in cfg.user_names():
            adv = cfg.adversary_of(name)
            strategy = STRATEGIES[adv.strategy](adv.params_dict()) if adv else STRATEGIES["honest"]()
            self.agents[name] = Agent(
                name, self.user_pairs[name], self.ledger, strategy,
                watch_interval=cfg.timing.watch_interval,
                watch_phase=cfg.watch_phase_of(name),
                send_fn=self._send, submit_fn=self._submit, note_fn=self._agent_note,
            )
        for spec in cfg.users:
            if spec.initial_funds > 0:
                op = self.ledger.seed_output(
                    Output(spec.initial_funds, Sig(self.user_pairs[spec.name].public)))
                self.agents[spec.name].funding_source = (op, spec.initial_funds)

        self.channel_ids: list[str] = []
        self._funding_to_channel: dict[Outpoint, str] = {}
        for i, ch in enumerate(cfg.channels):
            cid = f"ch{i}:{ch.funder}-{ch.peer}"
            self.channel_ids.append(cid)
            for side, other in ((ch.funder, ch.peer), (ch.peer, ch.funder)):
                self.agents[side].endpoints[cid] = ChannelEndpoint(
                    channel_id=cid, self_id=side, peer_id=other, funder=ch.funder,
                    capacity=ch.capacity, self_pair=self.user_pairs[side],
                    peer_pub=self.user_pairs[other].public, params=cfg.timing,
                    keys=self.keys, rng=self.rng,
                )

        self.coordinators: dict[int, PaymentCoordinator] = {}
        self.payment_records: list[PaymentRecord] = [
            PaymentRecord(index=i, spec=spec, outcome=None)
            for i, spec in enumerate(cfg.payments)
        ]
        self._purposes: dict[bytes, tuple[str, str, str]] = {}
        self._submitters: dict[bytes, str] = {}
        self.close_records: dict[str, CloseRecord] = {}
        self.sweeps: list[tuple[int, str, str, int, bytes]] = []
        self._auto_closed: set[str] = set()
        self._idle_since: dict[str, int] = {}
        self._htlc_chain: dict[Outpoint, tuple[str, bytes]] = {}
        self._htlc_resolved: set[tuple[str, bytes]] = set()
        self._last_activity = 0
        self.initial_total = sum(u.initial_funds for u in cfg.users)

    # -- hooks used by agents ---------------------------------------------------

    def _send(self, env: Envelope) -> None:
        self.trace.add(self.now, "msg_sent", ch=env.channel_id, src=env.sender,
                       dst=env.recipient, msg=type(env.payload).__name__)
        self.queue.append(env)
        self._last_activity = self.now

    def _agent_note(self, tick: int, kind: str, agent: Agent, fields: dict) -> None:
        self.trace.add(tick, kind, user=agent.user, **fields)

    def _submit(self, agent: Agent, plan: PlannedSubmission, now: int) -> None:
        for x in plan.register_preimages:
            self.ledger.register_preimage(x, now)
        receipt = self.ledger.submit_transaction(plan.tx, agent.user, now)
        self._purposes[plan.tx.txid] = (plan.purpose, plan.channel_id, agent.user)
        self._submitters[plan.tx.txid] = agent.user
        self.trace.add(now, "submitted", tx=plan.tx.txid, by=agent.user,
                       purpose=plan.purpose, ch=plan.channel_id,
                       conf=receipt.scheduled_tick)
        self._last_activity = now
        if plan.purpose in ("close", "breach_commit") and plan.channel_id not in self.close_records:
            self._record_close(plan.channel_id, agent.user, now)
        if plan.purpose == "funding":
            endpoint = agent.endpoints[plan.channel_id]
            if endpoint.funding_outpoint is not None:
                self._funding_to_channel[endpoint.funding_outpoint] = plan.channel_id

    def _record_close(self, channel_id: str, initiator: str, now: int) -> None:
        snapshots = {}
        for name, agent in self.agents.items():
            if name in self.cfg.honest_users() and channel_id in agent.endpoints:
                snapshots[name] = agent.endpoints[channel_id].security_snapshot()
        self.close_records[channel_id] = CloseRecord(
            channel_id=channel_id, t_close=now, initiator=initiator, snapshots=snapshots)

    def note_htlc_locked(self, channel_id: str, image: bytes, tick: int, *,
                         hop: int, payment: int) -> None:
        self.trace.add(tick, "watcher", user="-", action="htlc_locked", channel=channel_id,
                       image=image, hop=hop, payment=payment)
        self._last_activity = tick

    def note_htlc_resolved(self, channel_id: str, image: bytes, tick: int, *,
                           how: str, hop: int | None = None,
                           payment: int | None = None) -> None:
        key = (channel_id, image)
        if key in self._htlc_resolved:
            return
        self._htlc_resolved.add(key)
        fields = {"action": "htlc_resolved", "channel": channel_id, "image": image,
                  "how": how}
        if hop is not None:
            fields["hop"] = hop
        if payment is not None:
            fields["payment"] = payment
        self.trace.add(tick, "watcher", user="-", **fields)
        self._last_activity = tick

    # -- ledger event processing --------------------------------------------------

    def _process_ledger_events(self, events, t: int) -> None:
        for event in events:
            if event.kind == "confirmed":
                tx, conf = self.ledger.confirmed_transaction(event.txid)
                purpose, channel_id, user = self._purposes.get(
                    event.txid, ("external", "-", event.user or "-"))
                self.trace.add(event.tick, "confirmed", tx=event.txid, purpose=purpose)
                self._track_value_chain(tx, conf, purpose, channel_id)
                if purpose in ("claim", "revocation"):
                    amount = tx.output_amount()
                    self.sweeps.append((conf, user, channel_id, amount, tx.txid))
                    self.trace.add(conf, "sweep", user=user, ch=channel_id,
                                   amount=amount, tx=tx.txid)
            elif event.kind == "rejected":
                self.trace.add(event.tick, "rejected", tx=event.txid,
                               reason=event.reason.value if event.reason else "?")
                submitter = self._submitters.get(event.txid)
                if submitter is not None:
                    self.agents[submitter].note_rejection(event.txid)
            elif event.kind == "delivered":
                self.trace.add(event.tick, "delivered", tx=event.txid, user=event.user)
            elif event.kind == "registered":
                self.trace.add(event.tick, "registered", image=event.image)
        if events:
            self._last_activity = t
        # push deliveries after bookkeeping so purposes are recorded
        for event in events:
            if event.kind == "delivered":
                tx, conf = self.ledger.confirmed_transaction(event.txid)
                self.agents[event.user].on_delivery(tx, conf, t)

    def _track_value_chain(self, tx: Transaction, conf: int, purpose: str,
                           channel_id: str) -> None:
        """Follow contract value until it settles in a plain output."""
        touched: list[tuple[str, bytes]] = []
        for txin in tx.inputs:
            tracked = self._htlc_chain.pop(txin.outpoint, None)
            if tracked is not None:
                touched.append(tracked)
            if txin.outpoint in self._funding_to_channel:
                self._seed_htlc_outpoints(tx, self._funding_to_channel[txin.outpoint])
        all_plain = all(single_sig_owner(o.condition) is not None for o in tx.outputs)
        for tracked in touched:
            if all_plain:
                self.note_htlc_resolved(tracked[0], tracked[1], conf, how="on_ledger")
            else:
                for i in range(len(tx.outputs)):
                    self._htlc_chain[Outpoint(tx.txid, i)] = tracked

    def _seed_htlc_outpoints(self, commitment: Transaction, channel_id: str) -> None:
        record = None
        for agent in self.agents.values():
            endpoint = agent.endpoints.get(channel_id)
            if endpoint is None:
                continue
            record = endpoint.peer_records.get(commitment.txid)
            if record is None:
                for own in endpoint.own_records.values():
                    if own.tx.txid == commitment.txid:
                        record = own
                        break
            if record is not None:
                break
        if record is None:
            return
        for vout, slot in record.slots.items():
            if slot[0] == "htlc":
                self._htlc_chain[Outpoint(commitment.txid, vout)] = (channel_id, slot[1])

    # -- scenario drivers ------------------------------------------------------------

    def _hop_channel(self, sender: str, receiver: str):
        for cid in self.channel_ids:
            endpoint = self.agents[sender].endpoints.get(cid)
            if endpoint is None or endpoint.peer_id != receiver:
                continue
            return (cid, endpoint.stable_self(), endpoint.phase == Phase.OPERATIONAL)
        return None

    def _scenario_actions(self, t: int) -> None:
        if t == 0:
            for cid, spec in zip(self.channel_ids, self.cfg.channels):
                self.agents[spec.funder].initiate_open(cid, t)
        for i, spec in enumerate(self.cfg.payments):
            if t == spec.start and i not in self.coordinators:
                self._start_payment(i, spec, t)
        for i in sorted(self.coordinators):
            self.coordinators[i].step(t)
            record = self.payment_records[i]
            if record.outcome is None and self.coordinators[i].outcome is not None:
                record.outcome = self.coordinators[i].outcome
                self._last_activity = t
        self._settlement_closes(t)

    def _start_payment(self, index: int, spec: PaymentSpec, t: int) -> None:
        secret = self.rng.randbytes(16)
        image = hash_image(secret)
        receiver = self.agents[spec.path[-1]]
        receiver.learn_preimage(secret, t)
        record = self.payment_records[index]
        record.image = image
        try:
            plan = plan_payment(spec.path, spec.amount, t, spec.mode, self.cfg.timing,
                                image, index=index, hop_channel=self._hop_channel)
        except PcnError as exc:
            record.outcome = PaymentOutcome(status="failed", reason=type(exc).__name__)
            self.trace.add(t, "watcher", user=spec.path[0], action="payment_failed",
                           payment=index, detail=type(exc).__name__)
            return
        record.deadlines = tuple(h.deadline for h in plan.hops)
        self.coordinators[index] = PaymentCoordinator(plan, self)
        self._last_activity = t

    def _payments_touching(self, channel_id: str) -> list[PaymentRecord]:
        out = []
        for record in self.payment_records:
            path = record.spec.path
            for a, b in zip(path, path[1:]):
                found = None
                for cid in self.channel_ids:
                    ep = self.agents[a].endpoints.get(cid)
                    if ep is not None and ep.peer_id == b:
                        found = cid
                        break
                if found == channel_id:
                    out.append(record)
                    break
        return out

    def _settlement_closes(self, t: int) -> None:
        """An idle channel with nothing left to route gets closed by the
        funder (or the peer when the funder will not act).

        Settling is a leisure action: it happens only after the channel sat
        idle for self_delay + watch_interval ticks, and the closer submits
        its commitment without a fresh ledger read. Deadline-forced closes
        are the urgent path; this one models a user wrapping up.
        """
        patience = self.cfg.timing.self_delay + self.cfg.timing.watch_interval
        for cid in self.channel_ids:
            if cid in self._auto_closed:
                continue
            spec = self.cfg.channels[self.channel_ids.index(cid)]
            eps = [self.agents[u].endpoints[cid] for u in spec.users()]
            if any(ep.phase in (Phase.CLOSING, Phase.CLOSED) for ep in eps):
                self._auto_closed.add(cid)
                continue
            idle = (all(ep.phase == Phase.OPERATIONAL for ep in eps)
                    and not any(ep.htlcs or ep.pending_update for ep in eps)
                    and all(r.outcome is not None for r in self._payments_touching(cid)))
            if not idle:
                self._idle_since.pop(cid, None)
                continue
            since = self._idle_since.setdefault(cid, t)
            if t - since < patience:
                continue
            for closer in spec.users():
                self.agents[closer].close_channel(cid, t, reason="settle")
                if eps[0].phase != Phase.OPERATIONAL or eps[1].phase != Phase.OPERATIONAL:
                    break
            if any(ep.phase in (Phase.CLOSING, Phase.CLOSED) for ep in eps):
                self._auto_closed.add(cid)

    # -- main loop ----------------------------------------------------------------

    def _drain(self, t: int) -> None:
        guard = 0
        while True:
            progressed = False
            while self.queue:
                env = self.queue.popleft()
                guard += 1
                if guard > 20000:
                    raise PcnError("message cascade did not settle within a tick")
                self.trace.add(t, "msg_recv", ch=env.channel_id, src=env.sender,
                               dst=env.recipient, msg=type(env.payload).__name__)
                self.agents[env.recipient].handle_envelope(env, t)
                self._last_activity = t
            for i in sorted(self.coordinators):
                if self.coordinators[i].try_progress(t):
                    progressed = True
                    self._last_activity = t
            if not self.queue and not progressed:
                break

    def _quiescent(self, t: int) -> bool:
        if self.queue or self.ledger._pending:
            return False
        if any(agent.has_pending_work() for agent in self.agents.values()):
            return False
        if any(record.outcome is None and i in self.coordinators
               for i, record in enumerate(self.payment_records)):
            return False
        if any(t < spec.start for spec in self.cfg.payments):
            return False
        if any(cid in self._idle_since and cid not in self._auto_closed
               for cid in self.channel_ids):
            return False  # a settlement countdown is still running
        grace = self.cfg.timing.watch_interval + self.cfg.timing.sync_bound + 2
        return t - self._last_activity > grace

    def run(self) -> tuple[EventTrace, FinalState]:
        for t in range(0, self.cfg.horizon + 1):
            self.now = t
            events = self.ledger.advance(t)
            self._process_ledger_events(events, t)
            if self.cfg.mode() is VisibilityMode.GLOBAL:
                secrets = self.ledger.registered_secrets()
                if secrets:
                    for name in sorted(self.agents):
                        self.agents[name].on_registry_update(secrets, t)
            for name in sorted(self.agents):
                self.agents[name].on_tick(t)
            self._scenario_actions(t)
            self._drain(t)
            for name in sorted(self.agents):
                self.agents[name].deadline_pass(t)
            self._drain(t)
            if self._quiescent(t):
                break
        return self.trace, self._final_state()

    def _final_state(self) -> FinalState:
        balances: dict[str, int] = {name: 0 for name in self.cfg.user_names()}
        unspent_total = 0
        key_to_user = {pair.public: name for name, pair in self.user_pairs.items()}
        for _, output, _ in self.ledger.utxo_items():
            unspent_total += output.amount
            owner = single_sig_owner(output.condition)
            if owner is not None and owner in key_to_user:
                balances[key_to_user[owner]] += output.amount
        channel_stables: dict[str, dict[str, int]] = {}
        channel_phases: dict[str, tuple[str, str]] = {}
        for cid, spec in zip(self.channel_ids, self.cfg.channels):
            eps = {u: self.agents[u].endpoints[cid] for u in spec.users()}
            channel_phases[cid] = tuple(eps[u].phase for u in spec.users())
            if all(ep.phase in (Phase.OPENING, Phase.OPERATIONAL, Phase.UPDATING)
                   for ep in eps.values()):
                channel_stables[cid] = {u: eps[u].stable_self() for u in spec.users()}
        final = FinalState(
            params=self.cfg.timing,
            honest=self.cfg.honest_users(),
            initial_funds={u.name: u.initial_funds for u in self.cfg.users},
            balances=balances,
            unspent_total=unspent_total,
            channel_stables=channel_stables,
            channel_phases=channel_phases,
            close_records=self.close_records,
            sweeps=self.sweeps,
            learn_ticks={name: dict(agent.learn_ticks)
                         for name, agent in self.agents.items()},
            payments=self.payment_records,
        )
        for cid, record in self.close_records.items():
            for user in sorted(record.snapshots):
                final.verdicts[(user, cid)] = check_security(final, user, cid)
        return final


def run_scenario(cfg: ScenarioConfig) -> tuple[EventTrace, FinalState]:
    """Execute one scenario deterministically."""
    return Simulation(cfg).run()


# -- adversary grid ---------------------------------------------------------------


STRATEGY_ORDER = ("honest", "silent_after", "publish_outdated", "publish_latest_and_race",
                  "withhold_preimage", "stall_update", "withhold_redeem_forward")


@dataclass(frozen=True)
class GridDims:
    """Grid dimensions; an empty dimension keeps the base scenario's value."""

    strategies: tuple[str, ...] = ()
    actions: tuple[int, ...] = ()
    conf_delays: tuple[int, ...] = ()
    sync_delays: tuple[int, ...] = ()
    watch_phases: tuple[int, ...] = ()

    def size(self) -> int:
        out = 1
        for values in (self.strategies, self.actions, self.conf_delays,
                       self.sync_delays, self.watch_phases):
            out *= max(1, len(values))
        return out


def default_grid_dims(cfg: ScenarioConfig) -> GridDims:
    """Strategy variants crossed with action timings, ledger latency
    extremes, and honest watch phase offsets."""
    if cfg.payments:
        last = max(p.start for p in cfg.payments)
        actions = (last, last + 1, last + 6)
    else:
        actions = (1, 2, 3)
    return GridDims(
        strategies=STRATEGY_ORDER,
        actions=actions,
        conf_delays=(1, cfg.timing.conf_bound),
        sync_delays=(0, cfg.timing.sync_bound),
        watch_phases=(0, cfg.timing.watch_interval - 1),
    )


def _strategy_params(strategy: str, action: int, base_params: dict) -> dict:
    params = dict(base_params)
    params["action"] = action  # always recorded: grid cells stay distinct
    if strategy in ("silent_after", "publish_outdated", "publish_latest_and_race"):
        params["tick"] = action
    elif strategy == "stall_update":
        kinds = ("update_response", "commitment_signed", "revoke_and_ack")
        params["stall_on"] = kinds[action % len(kinds)]
    return params


def enumerate_adversary_grid(base: ScenarioConfig, dims: GridDims,
                             max_configs: int = 100_000) -> list[ScenarioConfig]:
    """Cartesian product of adversary strategy and timing knobs over a base
    scenario, deduplicated by canonical configuration hash."""
    if not base.adversaries:
        raise ConfigInvalid("grid enumeration needs a designated adversary user")
    size = dims.size()
    if size > max_configs:
        raise GridTooLarge(size, max_configs)
    adversary = base.adversaries[0]
    base_params = adversary.params_dict()
    seen: set[str] = set()
    configs: list[ScenarioConfig] = []
    for strategy in dims.strategies or (None,):
        for action in dims.actions or (None,):
            for conf in dims.conf_delays or (None,):
                for sync in dims.sync_delays or (None,):
                    for phase in dims.watch_phases or (None,):
                        cfg = base
                        if strategy is not None or action is not None:
                            chosen = adversary.strategy if strategy is None else strategy
                            params = (base_params if action is None
                                      else _strategy_params(chosen, action, base_params))
                            new_adv = AdversarySpec(user=adversary.user, strategy=chosen,
                                                    params=tuple(sorted(params.items())))
                            cfg = replace(cfg, adversaries=(new_adv,) + base.adversaries[1:])
                        if conf is not None:
                            cfg = replace(cfg, conf_delay=conf)
                        if sync is not None:
                            cfg = replace(cfg, sync_delay=sync)
                        if phase is not None:
                            phases = tuple(sorted(
                                {**dict(base.watch_phase),
                                 **{u: phase for u in sorted(base.honest_users())}}.items()))
                            cfg = replace(cfg, watch_phase=phases)
                        key = cfg.canonical_key()
                        if key in seen:
                            continue
                        seen.add(key)
                        configs.append(cfg)
    return configs
