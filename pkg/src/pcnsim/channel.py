"""Two-party payment channel endpoint.

Each endpoint owns one side of a channel: the negotiation state machines
for opening and updating, deterministic builders for commitment and
second-stage contract transactions, the close procedure, and the watcher
that reacts to what appears on the ledger.

Commitment layout for the holder's state n (mirrored for the peer):

  holder stable   peer+revocation-key  OR  holder after self_delay
  peer stable     peer
  outgoing HTLC   peer+preimage  OR  peer+revocation  OR  both-sig after deadline
                  (the both-sig branch is spendable only by the pre-signed
                  timeout transaction)
  incoming HTLC   peer after deadline  OR  peer+revocation  OR  both-sig+preimage
                  (the both-sig branch only by the pre-signed success
                  transaction)

Second-stage transactions pay into an output that is again delayed for
the holder and revocable by the peer, which keeps outdated-state
publication punishable all the way down.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from random import Random
from typing import Iterable, Mapping

from .conditions import (
    AbsoluteTime,
    Condition,
    Preimage,
    PreimageRegisteredBefore,
    RelativeDelay,
    Sig,
    all_of,
    any_of,
)
from .crypto import KeyPair, KeyRegistry, derive_public, hash_image
from .errors import (
    BadSignature,
    InsufficientBalance,
    NotOpen,
    ProtocolViolation,
    UnknownHtlc,
    UnknownState,
    WrongPreimage,
)
from .ledger import TimingParams
from .transactions import Outpoint, Output, Transaction, Witness, make_transaction


# -- domain types ----------------------------------------------------------


@dataclass(frozen=True)
class Htlc:
    """One hash time-locked contract inside a channel state.

    `sender` is the hop's payer; an endpoint sees the contract as outgoing
    when it is the sender. `registry_gated` switches the preimage branches
    to registration-before-deadline conditions (constant-timeout mode).
    """

    amount: int
    image: bytes
    deadline: int
    sender: str
    registry_gated: bool = False

    def __post_init__(self) -> None:
        if self.amount <= 0:
            raise ValueError("contract amount must be positive")

    def outgoing_for(self, user: str) -> bool:
        return self.sender == user


# protocol messages; transported by the harness with (channel, sender) envelope


@dataclass(frozen=True)
class OpenRequest:
    pub: bytes
    amount: int
    rev_pub: bytes


@dataclass(frozen=True)
class OpenAccept:
    pub: bytes


@dataclass(frozen=True)
class FundingCreated:
    funding_txid: bytes
    commit_sig: bytes


@dataclass(frozen=True)
class FundingSigned:
    commit_sig: bytes


@dataclass(frozen=True)
class NextRevocationKey:
    rev_pub: bytes


@dataclass(frozen=True)
class UpdateAdd:
    image: bytes
    amount: int
    deadline: int
    registry_gated: bool = False


@dataclass(frozen=True)
class UpdateRedeem:
    preimage: bytes


@dataclass(frozen=True)
class CommitmentSigned:
    commit_sig: bytes
    htlc_sigs: tuple[tuple[bytes, bytes], ...]  # (image, signature over the 2nd-stage tx)


@dataclass(frozen=True)
class RevokeAndAck:
    rev_secret: bytes
    next_rev_pub: bytes


ChannelMessage = (
    OpenRequest | OpenAccept | FundingCreated | FundingSigned | NextRevocationKey
    | UpdateAdd | UpdateRedeem | CommitmentSigned | RevokeAndAck
)


class Phase:
    OPENING = "opening"
    OPERATIONAL = "operational"
    UPDATING = "updating"
    CLOSING = "closing"
    CLOSED = "closed"


@dataclass
class SecondStage:
    kind: str  # "timeout" | "success"
    image: bytes
    deadline: int
    tx: Transaction
    peer_sig: bytes | None = None


@dataclass
class CommitmentRecord:
    """Everything an endpoint remembers about one commitment transaction."""

    state: int
    holder: str
    tx: Transaction
    rev_pub: bytes | None
    stable: dict[str, int]
    htlcs: dict[bytes, Htlc]
    slots: dict[int, tuple[str, object]]  # vout -> ("stable", user) | ("htlc", image)
    second_stage: dict[bytes, SecondStage]
    peer_sig: bytes | None = None

    def htlc_outpoint(self, image: bytes) -> Outpoint:
        for vout, slot in self.slots.items():
            if slot == ("htlc", image):
                return Outpoint(self.tx.txid, vout)
        raise UnknownHtlc(image.hex())


@dataclass(frozen=True)
class PlannedSubmission:
    """A transaction the agent should hand to the ledger.

    not_before defers deadline-bound transactions (a timeout spend is only
    valid once its absolute tick passed). register_preimages lists secrets
    that must be in the global registry before the claim can confirm.
    """

    tx: Transaction
    not_before: int
    purpose: str  # funding | close | breach_commit | second_stage | claim | revocation
    channel_id: str
    register_preimages: tuple[bytes, ...] = ()


@dataclass
class _UpdateDraft:
    initiator: bool
    kind: str  # "add" | "redeem"
    m: int
    stable: dict[str, int]
    htlcs: dict[bytes, Htlc]
    peer_record: CommitmentRecord | None = None
    own_record: CommitmentRecord | None = None
    sent_revoke: bool = False
    received_revoke: bool = False


@dataclass
class _Claim:
    valid_from: int
    submitted: bytes | None = None  # txid once handed to the ledger


# -- deterministic builders -------------------------------------------------


def funding_condition(pub_a: bytes, pub_b: bytes) -> Condition:
    lo, hi = sorted((pub_a, pub_b))
    return all_of(Sig(lo), Sig(hi))


def _claim_leaf(htlc: Htlc) -> Condition:
    if htlc.registry_gated:
        return PreimageRegisteredBefore(htlc.image, htlc.deadline)
    return Preimage(htlc.image)


def build_commitment(
    *,
    funding_outpoint: Outpoint,
    capacity: int,
    state: int,
    holder: str,
    peer: str,
    holder_pub: bytes,
    peer_pub: bytes,
    rev_pub: bytes | None,
    stable: Mapping[str, int],
    htlcs: Mapping[bytes, Htlc],
    self_delay: int,
) -> CommitmentRecord:
    """Build the holder's commitment transaction for one channel state.

    Both peers run this with identical inputs and must obtain the same
    transaction id, so output order is fixed: holder stable, peer stable,
    then contracts sorted by image. Zero-amount stable outputs are
    omitted. `rev_pub` is the holder's revocation key for this state; it
    may be None only while no output needs it.
    """
    total = stable[holder] + stable[peer] + sum(h.amount for h in htlcs.values())
    if total != capacity:
        raise ValueError(f"state {state} does not conserve capacity: {total} != {capacity}")

    outputs: list[Output] = []
    slots: dict[int, tuple[str, object]] = {}

    def revocation_branch() -> Condition:
        if rev_pub is None:
            raise ValueError("revocation key required for a revocable output")
        return all_of(Sig(peer_pub), Sig(rev_pub))

    if stable[holder] > 0:
        slots[len(outputs)] = ("stable", holder)
        outputs.append(Output(
            stable[holder],
            any_of(revocation_branch(), all_of(Sig(holder_pub), RelativeDelay(self_delay))),
        ))
    if stable[peer] > 0:
        slots[len(outputs)] = ("stable", peer)
        outputs.append(Output(stable[peer], Sig(peer_pub)))
    for image in sorted(htlcs):
        htlc = htlcs[image]
        if htlc.outgoing_for(holder):
            cond = any_of(
                all_of(Sig(peer_pub), _claim_leaf(htlc)),
                revocation_branch(),
                all_of(Sig(holder_pub), Sig(peer_pub), AbsoluteTime(htlc.deadline)),
            )
        else:
            cond = any_of(
                all_of(Sig(peer_pub), AbsoluteTime(htlc.deadline)),
                revocation_branch(),
                all_of(Sig(holder_pub), Sig(peer_pub), _claim_leaf(htlc)),
            )
        slots[len(outputs)] = ("htlc", image)
        outputs.append(Output(htlc.amount, cond))

    tx = make_transaction([(funding_outpoint, Witness.build())], outputs)
    record = CommitmentRecord(
        state=state, holder=holder, tx=tx, rev_pub=rev_pub,
        stable=dict(stable), htlcs=dict(htlcs), slots=slots, second_stage={},
    )
    for image in sorted(htlcs):
        htlc = htlcs[image]
        kind = "timeout" if htlc.outgoing_for(holder) else "success"
        record.second_stage[image] = SecondStage(
            kind=kind, image=image, deadline=htlc.deadline,
            tx=build_htlc_transaction(record, htlc, holder_pub, peer_pub, rev_pub, self_delay),
        )
    return record


def build_htlc_transaction(
    record: CommitmentRecord,
    htlc: Htlc,
    holder_pub: bytes,
    peer_pub: bytes,
    rev_pub: bytes | None,
    self_delay: int,
) -> Transaction:
    """The holder's pre-signed second-stage transaction for one contract.

    Timeout transactions spend the outgoing contract's both-signature
    branch (valid from the deadline); success transactions spend the
    incoming contract's both-signature branch (witness carries the
    preimage). The single output is delayed for the holder and revocable
    by the peer.
    """
    if rev_pub is None:
        raise ValueError("second-stage transactions require the state revocation key")
    outpoint = record.htlc_outpoint(htlc.image)
    out = Output(
        htlc.amount,
        any_of(
            all_of(Sig(holder_pub), RelativeDelay(self_delay)),
            all_of(Sig(peer_pub), Sig(rev_pub)),
        ),
    )
    return make_transaction([(outpoint, Witness.build())], [out])


def build_htlc_transactions(record: CommitmentRecord, image: bytes) -> tuple[Transaction | None, Transaction | None]:
    """(timeout, success) pair for one contract of a built commitment.

    Exactly one side is present: the holder refunds an outgoing contract
    through the timeout transaction and claims an incoming one through
    the success transaction.
    """
    stage = record.second_stage.get(image)
    if stage is None:
        raise UnknownHtlc(image.hex())
    if stage.kind == "timeout":
        return stage.tx, None
    return None, stage.tx


# -- the endpoint ------------------------------------------------------------


class ChannelEndpoint:
    """One peer's view of a channel; owned and driven by a single agent."""

    def __init__(
        self,
        channel_id: str,
        self_id: str,
        peer_id: str,
        funder: str,
        capacity: int,
        self_pair: KeyPair,
        peer_pub: bytes,
        params: TimingParams,
        keys: KeyRegistry,
        rng: Random,
    ) -> None:
        self.channel_id = channel_id
        self.self_id = self_id
        self.peer_id = peer_id
        self.funder = funder
        self.capacity = capacity
        self.self_pair = self_pair
        self.peer_pub = peer_pub
        self.params = params
        self.keys = keys
        self.rng = rng

        self.phase = Phase.OPENING
        self.n = 0
        self.stable: dict[str, int] = {}
        self.htlcs: dict[bytes, Htlc] = {}

        self.own_rev: dict[int, KeyPair] = {}
        self.revoked_own: set[int] = set()
        self.peer_rev_pub: dict[int, bytes] = {}
        self.peer_rev_secret: dict[int, bytes] = {}

        self.own_records: dict[int, CommitmentRecord] = {}
        self.peer_records: dict[bytes, CommitmentRecord] = {}

        self.funding_outpoint: Outpoint | None = None
        self.funding_seen: int | None = None
        self.pending_update: _UpdateDraft | None = None
        self._sent_next_rev = False
        self._open: dict[str, object] = {}

        # watcher state
        self.closing_record: tuple[CommitmentRecord, int] | None = None  # record, conf tick
        self.published_state: int | None = None
        self.spent_index: dict[Outpoint, tuple[Transaction, int]] = {}
        self.second_stage_confirmed: dict[bytes, tuple[SecondStage, CommitmentRecord, int]] = {}
        self.claims: dict[Outpoint, _Claim] = {}
        self._claim_txids: dict[bytes, list[Outpoint]] = {}

    # -- small helpers ------------------------------------------------------

    def is_funder(self) -> bool:
        return self.funder == self.self_id

    def stable_self(self) -> int:
        return self.stable.get(self.self_id, 0)

    def _pub_of(self, user: str) -> bytes:
        return self.self_pair.public if user == self.self_id else self.peer_pub

    def _build_record(self, *, holder: str, state: int, stable: Mapping[str, int],
                      htlcs: Mapping[bytes, Htlc], rev_pub: bytes | None) -> CommitmentRecord:
        peer_of_holder = self.peer_id if holder == self.self_id else self.self_id
        return build_commitment(
            funding_outpoint=self.funding_outpoint,
            capacity=self.capacity,
            state=state,
            holder=holder,
            peer=peer_of_holder,
            holder_pub=self._pub_of(holder),
            peer_pub=self._pub_of(peer_of_holder),
            rev_pub=rev_pub,
            stable=stable,
            htlcs=htlcs,
            self_delay=self.params.self_delay,
        )

    def build_commitment_transaction(self, state: int, holder: str) -> Transaction:
        """Recorded commitment transaction for `state` held by `holder`."""
        if holder == self.self_id:
            record = self.own_records.get(state)
        else:
            record = next((r for r in self.peer_records.values() if r.state == state), None)
        if record is None:
            raise UnknownState(f"no commitment recorded for state {state} of {holder}")
        return record.tx

    def _sign(self, tx: Transaction) -> bytes:
        return self.self_pair.sign(tx.txid)

    def _both_sig_witness(self, tx: Transaction, peer_sig: bytes, preimages: Iterable[bytes] = ()) -> Witness:
        return Witness.build(
            signatures={self.self_pair.public: self._sign(tx), self.peer_pub: peer_sig},
            preimages=preimages,
        )

    def correct_balance(self, known_preimages: Mapping[bytes, bytes]) -> int:
        """Stable balance plus contract amounts the endpoint is entitled to.

        Outgoing contracts count while the secret is unknown (they come
        back through the timeout path); incoming contracts count once the
        secret is known.
        """
        total = self.stable_self()
        for htlc in self.htlcs.values():
            known = htlc.image in known_preimages
            if htlc.outgoing_for(self.self_id) and not known:
                total += htlc.amount
            elif not htlc.outgoing_for(self.self_id) and known:
                total += htlc.amount
        return total

    def deadline_due(self, now: int) -> bool:
        """Protocol close trigger: some contract deadline is too close to
        still resolve off-ledger (closer than conf_bound + sync_bound)."""
        margin = self.params.conf_bound + self.params.sync_bound
        contracts = dict(self.htlcs)
        if self.pending_update is not None:
            contracts.update(self.pending_update.htlcs)
        return any(h.deadline - now < margin for h in contracts.values())

    def security_snapshot(self) -> dict:
        return {
            "state": self.n,
            "stable": self.stable_self(),
            "htlcs": [
                {
                    "amount": h.amount,
                    "image": h.image,
                    "outgoing": h.outgoing_for(self.self_id),
                    "deadline": h.deadline,
                }
                for _, h in sorted(self.htlcs.items())
            ],
        }

    # -- opening (Protocol: open) -------------------------------------------

    def begin_open(self, funding_outpoint: Outpoint, funding_amount: int, now: int) -> list[ChannelMessage]:
        if not self.is_funder():
            raise ProtocolViolation(self.phase, "only the funder starts an open")
        if funding_amount < self.capacity:
            raise InsufficientBalance(f"funding source {funding_amount} < capacity {self.capacity}")
        self.own_rev[1] = self.keys.new_pair(self.rng)
        self._open = {"source": funding_outpoint, "source_amount": funding_amount}
        return [OpenRequest(pub=self.self_pair.public, amount=self.capacity,
                            rev_pub=self.own_rev[1].public)]

    def handle_message(self, msg: ChannelMessage, now: int) -> tuple[list[ChannelMessage], list[PlannedSubmission]]:
        """Advance the protocol by one received message."""
        if isinstance(msg, OpenRequest):
            return self._on_open_request(msg), []
        if isinstance(msg, OpenAccept):
            return self._on_open_accept(msg), []
        if isinstance(msg, FundingCreated):
            return self._on_funding_created(msg), []
        if isinstance(msg, FundingSigned):
            return [], self._on_funding_signed(msg, now)
        if isinstance(msg, NextRevocationKey):
            self.peer_rev_pub[2] = msg.rev_pub
            self._maybe_operational()
            return [], []
        if isinstance(msg, (UpdateAdd, UpdateRedeem)):
            return self._on_update_start(msg, now), []
        if isinstance(msg, CommitmentSigned):
            return self._on_commitment_signed(msg), []
        if isinstance(msg, RevokeAndAck):
            return self._on_revoke_and_ack(msg), []
        raise ProtocolViolation(self.phase, type(msg).__name__)

    def _on_open_request(self, msg: OpenRequest) -> list[ChannelMessage]:
        if self.phase != Phase.OPENING or self.is_funder() or "accepted" in self._open:
            raise ProtocolViolation(self.phase, "OpenRequest")
        if msg.pub != self.peer_pub or msg.amount != self.capacity:
            raise ProtocolViolation(self.phase, "OpenRequest fields disagree with the channel")
        self._open["accepted"] = True
        self.peer_rev_pub[1] = msg.rev_pub
        self.own_rev[1] = self.keys.new_pair(self.rng)
        return [OpenAccept(pub=self.self_pair.public)]

    def _on_open_accept(self, msg: OpenAccept) -> list[ChannelMessage]:
        if self.phase != Phase.OPENING or not self.is_funder() or "funding_tx" in self._open:
            raise ProtocolViolation(self.phase, "OpenAccept")
        if msg.pub != self.peer_pub:
            raise ProtocolViolation(self.phase, "OpenAccept key disagrees with the channel")
        source: Outpoint = self._open["source"]
        source_amount: int = self._open["source_amount"]
        outputs = [Output(self.capacity, funding_condition(self.self_pair.public, self.peer_pub))]
        if source_amount > self.capacity:
            outputs.append(Output(source_amount - self.capacity, Sig(self.self_pair.public)))
        funding_tx = make_transaction([(source, Witness.build())], outputs)
        self._open["funding_tx"] = funding_tx
        self.funding_outpoint = funding_tx.outpoint(0)

        stable = {self.self_id: self.capacity, self.peer_id: 0}
        peer_record = self._build_record(holder=self.peer_id, state=1, stable=stable,
                                         htlcs={}, rev_pub=None)
        self.peer_records[peer_record.tx.txid] = peer_record
        own_record = self._build_record(holder=self.self_id, state=1, stable=stable,
                                        htlcs={}, rev_pub=self.own_rev[1].public)
        self._open["own_record"] = own_record
        return [FundingCreated(funding_txid=funding_tx.txid,
                               commit_sig=self._sign(peer_record.tx))]

    def _on_funding_created(self, msg: FundingCreated) -> list[ChannelMessage]:
        if self.phase != Phase.OPENING or self.is_funder() or "own_record" in self._open:
            raise ProtocolViolation(self.phase, "FundingCreated")
        self.funding_outpoint = Outpoint(msg.funding_txid, 0)
        stable = {self.funder: self.capacity, self.self_id: 0}
        own_record = self._build_record(holder=self.self_id, state=1, stable=stable,
                                        htlcs={}, rev_pub=None)
        if not self.keys.verify(self.peer_pub, own_record.tx.txid, msg.commit_sig):
            self.phase = Phase.CLOSED
            raise BadSignature("funder signature over the initial commitment")
        own_record.peer_sig = msg.commit_sig
        self.own_records[1] = own_record
        self._open["own_record"] = own_record
        peer_record = self._build_record(holder=self.peer_id, state=1, stable=stable,
                                         htlcs={}, rev_pub=self.peer_rev_pub[1])
        self.peer_records[peer_record.tx.txid] = peer_record
        self.n = 1
        self.stable = dict(stable)
        return [FundingSigned(commit_sig=self._sign(peer_record.tx))]

    def _on_funding_signed(self, msg: FundingSigned, now: int) -> list[PlannedSubmission]:
        if self.phase != Phase.OPENING or not self.is_funder() or "own_record" not in self._open:
            raise ProtocolViolation(self.phase, "FundingSigned")
        own_record: CommitmentRecord = self._open["own_record"]
        if not self.keys.verify(self.peer_pub, own_record.tx.txid, msg.commit_sig):
            self.phase = Phase.CLOSED
            raise BadSignature("peer signature over the initial commitment")
        own_record.peer_sig = msg.commit_sig
        self.own_records[1] = own_record
        self.n = 1
        self.stable = {self.self_id: self.capacity, self.peer_id: 0}
        funding_tx: Transaction = self._open["funding_tx"]
        signed = funding_tx.with_witnesses({
            0: Witness.build(signatures={self.self_pair.public: self._sign(funding_tx)})
        })
        return [PlannedSubmission(tx=signed, not_before=now, purpose="funding",
                                  channel_id=self.channel_id)]

    def on_funding_seen(self, conf_tick: int, now: int) -> list[ChannelMessage]:
        """Both peers exchange the next revocation key once funding confirms."""
        self.funding_seen = conf_tick
        out: list[ChannelMessage] = []
        if not self._sent_next_rev:
            self._sent_next_rev = True
            self.own_rev[2] = self.keys.new_pair(self.rng)
            out.append(NextRevocationKey(rev_pub=self.own_rev[2].public))
        self._maybe_operational()
        return out

    def _maybe_operational(self) -> None:
        if self.phase == Phase.OPENING and self.funding_seen is not None and 2 in self.peer_rev_pub:
            self.phase = Phase.OPERATIONAL

    # -- updating (Protocol: negotiate a new commitment) ---------------------

    def begin_update(self, kind: str, now: int, *, image: bytes | None = None,
                     amount: int | None = None, deadline: int | None = None,
                     preimage: bytes | None = None,
                     registry_gated: bool = False) -> list[ChannelMessage]:
        """Initiate an add or redeem negotiation with the peer."""
        if self.phase != Phase.OPERATIONAL or self.pending_update is not None:
            raise NotOpen(f"channel {self.channel_id} cannot start an update in {self.phase}")
        m = self.n + 1
        stable = dict(self.stable)
        htlcs = dict(self.htlcs)
        if kind == "add":
            if amount is None or image is None or deadline is None:
                raise ValueError("add requires image, amount, deadline")
            if image in htlcs:
                raise ProtocolViolation(self.phase, "duplicate contract image")
            if stable[self.self_id] < amount:
                raise InsufficientBalance(f"{stable[self.self_id]} < {amount}")
            stable[self.self_id] -= amount
            htlcs[image] = Htlc(amount=amount, image=image, deadline=deadline,
                                sender=self.self_id, registry_gated=registry_gated)
            first: ChannelMessage = UpdateAdd(image=image, amount=amount, deadline=deadline,
                                              registry_gated=registry_gated)
        elif kind == "redeem":
            if preimage is None:
                raise ValueError("redeem requires the preimage")
            image = hash_image(preimage)
            htlc = htlcs.get(image)
            if htlc is None:
                raise WrongPreimage("preimage matches no contract in this channel")
            if htlc.outgoing_for(self.self_id):
                raise UnknownHtlc("cannot redeem an outgoing contract")
            del htlcs[image]
            stable[self.self_id] += htlc.amount
            first = UpdateRedeem(preimage=preimage)
        else:
            raise ValueError(f"unknown update kind {kind}")

        draft = _UpdateDraft(initiator=True, kind=kind, m=m, stable=stable, htlcs=htlcs)
        self.pending_update = draft
        self.phase = Phase.UPDATING
        return [first, self._make_commitment_signed(draft)]

    def _make_commitment_signed(self, draft: _UpdateDraft) -> CommitmentSigned:
        rev_pub = self.peer_rev_pub.get(draft.m)
        if rev_pub is None:
            raise ProtocolViolation(self.phase, f"missing peer revocation key for state {draft.m}")
        record = self._build_record(holder=self.peer_id, state=draft.m,
                                    stable=draft.stable, htlcs=draft.htlcs, rev_pub=rev_pub)
        draft.peer_record = record
        self.peer_records[record.tx.txid] = record
        htlc_sigs = tuple(
            (image, self._sign(stage.tx)) for image, stage in sorted(record.second_stage.items())
        )
        return CommitmentSigned(commit_sig=self._sign(record.tx), htlc_sigs=htlc_sigs)

    def _on_update_start(self, msg: UpdateAdd | UpdateRedeem, now: int) -> list[ChannelMessage]:
        if self.phase not in (Phase.OPERATIONAL, Phase.UPDATING):
            raise NotOpen(f"update message in phase {self.phase}")
        if self.pending_update is not None:
            if not self.pending_update.initiator:
                raise ProtocolViolation(self.phase, "second update while responding")
            # simultaneous initiation: the peer with the smaller id wins
            if self.peer_id < self.self_id:
                self._abandon_update()
            else:
                return []  # drop; the peer yields symmetrically
        m = self.n + 1
        stable = dict(self.stable)
        htlcs = dict(self.htlcs)
        if isinstance(msg, UpdateAdd):
            if msg.image in htlcs:
                raise ProtocolViolation(self.phase, "duplicate contract image")
            if stable[self.peer_id] < msg.amount:
                raise InsufficientBalance(f"peer stable {stable[self.peer_id]} < {msg.amount}")
            stable[self.peer_id] -= msg.amount
            htlcs[msg.image] = Htlc(amount=msg.amount, image=msg.image, deadline=msg.deadline,
                                    sender=self.peer_id, registry_gated=msg.registry_gated)
            kind = "add"
        else:
            image = hash_image(msg.preimage)
            htlc = htlcs.get(image)
            if htlc is None:
                raise WrongPreimage("preimage matches no contract in this channel")
            if not htlc.outgoing_for(self.self_id):
                raise UnknownHtlc("peer redeemed a contract it does not receive")
            del htlcs[image]
            stable[self.peer_id] += htlc.amount
            kind = "redeem"
        self.pending_update = _UpdateDraft(initiator=False, kind=kind, m=m,
                                           stable=stable, htlcs=htlcs)
        self.phase = Phase.UPDATING
        return []

    def _abandon_update(self) -> None:
        # safe before any revocation was sent; signed drafts stay tracked
        self.pending_update = None
        if self.phase == Phase.UPDATING:
            self.phase = Phase.OPERATIONAL

    def _on_commitment_signed(self, msg: CommitmentSigned) -> list[ChannelMessage]:
        draft = self.pending_update
        if draft is None or draft.own_record is not None:
            raise ProtocolViolation(self.phase, "CommitmentSigned")
        rev = self.own_rev.get(draft.m)
        if rev is None:
            raise ProtocolViolation(self.phase, f"missing own revocation key for state {draft.m}")
        record = self._build_record(holder=self.self_id, state=draft.m,
                                    stable=draft.stable, htlcs=draft.htlcs, rev_pub=rev.public)
        if not self.keys.verify(self.peer_pub, record.tx.txid, msg.commit_sig):
            self._abandon_update()
            raise BadSignature("commitment signature")
        sig_map = dict(msg.htlc_sigs)
        for image, stage in record.second_stage.items():
            sig = sig_map.get(image)
            if sig is None or not self.keys.verify(self.peer_pub, stage.tx.txid, sig):
                self._abandon_update()
                raise BadSignature(f"second-stage signature for {image.hex()[:8]}")
            stage.peer_sig = sig
        record.peer_sig = msg.commit_sig
        draft.own_record = record
        self.own_records[draft.m] = record

        out: list[ChannelMessage] = []
        if not draft.initiator:
            out.append(self._make_commitment_signed(draft))
        else:
            out.append(self._send_revoke(draft))
        return out

    def _send_revoke(self, draft: _UpdateDraft) -> RevokeAndAck:
        revoked_state = draft.m - 1
        secret = self.own_rev[revoked_state].secret if revoked_state in self.own_rev else b""
        next_state = draft.m + 1
        self.own_rev[next_state] = self.keys.new_pair(self.rng)
        self.revoked_own.add(revoked_state)
        draft.sent_revoke = True
        self._advance_state(draft)
        return RevokeAndAck(rev_secret=secret, next_rev_pub=self.own_rev[next_state].public)

    def _advance_state(self, draft: _UpdateDraft) -> None:
        if self.n == draft.m:
            return
        self.n = draft.m
        self.stable = dict(draft.stable)
        self.htlcs = dict(draft.htlcs)

    def _on_revoke_and_ack(self, msg: RevokeAndAck) -> list[ChannelMessage]:
        draft = self.pending_update
        if draft is None or draft.own_record is None:
            raise ProtocolViolation(self.phase, "RevokeAndAck")
        revoked_state = draft.m - 1
        derived = derive_public(msg.rev_secret) if msg.rev_secret else None
        expected = self.peer_rev_pub.get(revoked_state)
        if expected is not None and derived != expected:
            raise BadSignature("revocation secret does not match the recorded key")
        if msg.rev_secret:
            self.peer_rev_secret[revoked_state] = msg.rev_secret
        self.peer_rev_pub[draft.m + 1] = msg.next_rev_pub
        draft.received_revoke = True

        out: list[ChannelMessage] = []
        if not draft.sent_revoke:
            out.append(self._send_revoke(draft))
        if draft.sent_revoke and draft.received_revoke:
            self.pending_update = None
            if self.phase == Phase.UPDATING:
                self.phase = Phase.OPERATIONAL
        return out

    # -- closing and the watcher ---------------------------------------------

    def publication_plan(self, state: int, known_preimages: Mapping[bytes, bytes],
                         now: int, purpose: str) -> list[PlannedSubmission]:
        """Submission plan for one of our recorded commitment states.

        The commitment goes out immediately, success transactions ride
        along when the preimage is known, and timeout transactions are
        deferred to their deadlines.
        """
        record = self.own_records.get(state)
        if record is None or record.peer_sig is None:
            raise UnknownState(f"no signed commitment for state {state}")
        self.published_state = state
        commit = record.tx.with_witnesses({0: self._both_sig_witness(record.tx, record.peer_sig)})
        plans = [PlannedSubmission(tx=commit, not_before=now, purpose=purpose,
                                   channel_id=self.channel_id)]
        for image, stage in sorted(record.second_stage.items()):
            if stage.peer_sig is None:
                continue
            if stage.kind == "timeout":
                plans.append(self._second_stage_plan(record, stage, (), stage.deadline))
            elif image in known_preimages:
                plans.append(self._second_stage_plan(
                    record, stage, (known_preimages[image],), now))
        return plans

    def _second_stage_plan(self, record: CommitmentRecord, stage: SecondStage,
                           preimages: tuple[bytes, ...], not_before: int) -> PlannedSubmission:
        needs = preimages if record.htlcs[stage.image].registry_gated else ()
        tx = stage.tx.with_witnesses({
            0: self._both_sig_witness(stage.tx, stage.peer_sig, preimages=preimages)
        })
        spent_outpoint = stage.tx.inputs[0].outpoint
        self.claims[spent_outpoint] = _Claim(valid_from=not_before, submitted=tx.txid)
        self._claim_txids.setdefault(tx.txid, []).append(spent_outpoint)
        return PlannedSubmission(tx=tx, not_before=not_before, purpose="second_stage",
                                 channel_id=self.channel_id, register_preimages=needs)

    def preimage_actions(self, known_preimages: Mapping[bytes, bytes], now: int
                         ) -> list[PlannedSubmission]:
        """Success transactions unlocked by a just-learned preimage.

        Valid against our published commitment even while it is still
        pending (the ledger defers a child past its parent), so the claim
        races the peer's deadline refund as early as possible.
        """
        if self.published_state is None:
            return []
        record = self.own_records[self.published_state]
        plans: list[PlannedSubmission] = []
        for image, stage in sorted(record.second_stage.items()):
            if stage.kind != "success" or stage.peer_sig is None or image not in known_preimages:
                continue
            outpoint = stage.tx.inputs[0].outpoint
            if outpoint in self.claims:
                continue
            spent = self.spent_index.get(outpoint)
            if spent is not None and spent[0].txid != record.tx.txid:
                continue
            plans.append(self._second_stage_plan(record, stage, (known_preimages[image],), now))
        return plans

    def close_channel(self, now: int, known_preimages: Mapping[bytes, bytes]) -> list[PlannedSubmission]:
        """Unilateral close: publish the newest fully signed commitment."""
        if self.phase not in (Phase.OPERATIONAL, Phase.UPDATING):
            raise NotOpen(f"cannot close in phase {self.phase}")
        state = max(s for s, r in self.own_records.items() if r.peer_sig is not None)
        plans = self.publication_plan(state, known_preimages, now, purpose="close")
        self.phase = Phase.CLOSING
        self.pending_update = None
        return plans

    def note_visible(self, visible: list[tuple[Transaction, int]]) -> None:
        """Ingest newly delivered transactions relevant to this channel."""
        for tx, conf in visible:
            for txin in tx.inputs:
                self.spent_index[txin.outpoint] = (tx, conf)
            record = self.peer_records.get(tx.txid)
            if record is None:
                for state, own in self.own_records.items():
                    if own.tx.txid == tx.txid:
                        record = own
                        break
            if record is not None and self.closing_record is None:
                self.closing_record = (record, conf)
                if self.phase not in (Phase.CLOSING, Phase.CLOSED):
                    self.phase = Phase.CLOSING
            self._note_second_stage(tx, conf)

    def _note_second_stage(self, tx: Transaction, conf: int) -> None:
        if self.closing_record is None:
            return
        record, _ = self.closing_record
        for image, stage in record.second_stage.items():
            if stage.tx.txid == tx.txid:
                self.second_stage_confirmed[tx.txid] = (stage, record, conf)

    def note_rejected(self, txid: bytes) -> None:
        """A claim we submitted was rejected; allow the watcher to rebuild."""
        for outpoint in self._claim_txids.pop(txid, []):
            self.claims.pop(outpoint, None)

    def has_breach_secret(self, record: CommitmentRecord) -> bool:
        return record.holder == self.peer_id and record.state in self.peer_rev_secret

    def reconcile(self, known_preimages: Mapping[bytes, bytes], now: int
                  ) -> tuple[list[PlannedSubmission], list[int]]:
        """Derive and submit outstanding on-ledger claims.

        Returns (submissions due now, ticks at which to reconcile again).
        Idempotent: an outpoint with a live claim is skipped until that
        claim is confirmed or reported rejected.
        """
        if self.closing_record is None:
            return [], []
        record, conf = self.closing_record
        entitlements = self._entitlements(record, conf, known_preimages, now)

        submissions: list[PlannedSubmission] = []
        timers: list[int] = []
        due_revocations: list[tuple[Outpoint, int]] = []
        for outpoint, (valid_from, claim_kind, witness_builder, amount) in sorted(entitlements.items()):
            if outpoint in self.claims:
                continue
            if valid_from > now:
                timers.append(valid_from)
                continue
            if claim_kind == "revocation":
                due_revocations.append((outpoint, amount))
                continue
            submissions.append(self._make_claim([outpoint], [amount],
                                                witness_builder, claim_kind, now,
                                                known_preimages))
        if due_revocations:
            outs = [op for op, _ in due_revocations]
            amounts = [a for _, a in due_revocations]
            submissions.append(self._make_claim(outs, amounts, self._revocation_witness,
                                                "revocation", now, known_preimages))
        return submissions, sorted(set(timers))

    def _make_claim(self, outpoints: list[Outpoint], amounts: list[int],
                    witness_builder, purpose: str, now: int,
                    known_preimages: Mapping[bytes, bytes]) -> PlannedSubmission:
        total = sum(amounts)
        tx = make_transaction([(op, Witness.build()) for op in outpoints],
                              [Output(total, Sig(self.self_pair.public))])
        witnesses = {}
        needs: list[bytes] = []
        for i, op in enumerate(outpoints):
            witness, registers = witness_builder(tx, op, known_preimages)
            witnesses[i] = witness
            needs.extend(registers)
        tx = tx.with_witnesses(witnesses)
        for op in outpoints:
            self.claims[op] = _Claim(valid_from=now, submitted=tx.txid)
        self._claim_txids.setdefault(tx.txid, []).extend(outpoints)
        return PlannedSubmission(tx=tx, not_before=now, purpose=purpose,
                                 channel_id=self.channel_id,
                                 register_preimages=tuple(needs))

    def _revocation_witness(self, tx: Transaction, outpoint: Outpoint,
                            known_preimages: Mapping[bytes, bytes]) -> tuple[Witness, list[bytes]]:
        record, _ = self.closing_record
        rev_record = self._record_for_outpoint(outpoint)
        secret = self.peer_rev_secret[rev_record.state]
        rev_pair = KeyPair.from_secret(secret)
        sigs = {self.self_pair.public: self._sign(tx), rev_pair.public: rev_pair.sign(tx.txid)}
        return Witness.build(signatures=sigs), []

    def _record_for_outpoint(self, outpoint: Outpoint) -> CommitmentRecord:
        record, _ = self.closing_record
        if outpoint.txid == record.tx.txid:
            return record
        stage_info = self.second_stage_confirmed.get(outpoint.txid)
        if stage_info is not None:
            return stage_info[1]
        return record

    def _plain_witness(self, tx: Transaction, outpoint: Outpoint,
                       known_preimages: Mapping[bytes, bytes]) -> tuple[Witness, list[bytes]]:
        return Witness.build(signatures={self.self_pair.public: self._sign(tx)}), []

    def _preimage_witness_for(self, image: bytes):
        def build(tx: Transaction, outpoint: Outpoint,
                  known_preimages: Mapping[bytes, bytes]) -> tuple[Witness, list[bytes]]:
            x = known_preimages[image]
            record, _ = self.closing_record
            htlc = record.htlcs.get(image)
            registers = [x] if htlc is not None and htlc.registry_gated else []
            preimages = () if registers else (x,)
            sigs = {self.self_pair.public: self._sign(tx)}
            return Witness.build(signatures=sigs, preimages=preimages), registers

        return build

    def _entitlements(self, record: CommitmentRecord, conf: int,
                      known_preimages: Mapping[bytes, bytes], now: int) -> dict:
        """Map outpoint -> (valid_from, kind, witness builder, amount)."""
        out: dict[Outpoint, tuple[int, str, object, int]] = {}
        breach = self.has_breach_secret(record)
        for vout, slot in record.slots.items():
            outpoint = Outpoint(record.tx.txid, vout)
            amount = record.tx.outputs[vout].amount
            spent = self.spent_index.get(outpoint)
            if spent is not None and spent[0].txid != record.tx.txid:
                spender, spender_conf = spent
                if self._is_own_claim(spender):
                    continue
                if breach or spender.txid in self.second_stage_confirmed:
                    self._add_child_entitlements(out, spender, spender_conf, breach, known_preimages)
                continue
            if breach:
                out[outpoint] = (now, "revocation", self._revocation_witness, amount)
                continue
            kind, slot_key = slot
            if kind == "stable":
                if slot_key != self.self_id:
                    continue
                if record.holder == self.self_id:
                    out[outpoint] = (conf + self.params.self_delay, "claim",
                                     self._plain_witness, amount)
                else:
                    out[outpoint] = (now, "claim", self._plain_witness, amount)
                continue
            image = slot_key
            htlc = record.htlcs[image]
            if record.holder == self.self_id:
                # resolved through our pre-signed second-stage transactions,
                # which close_channel/publication_plan already scheduled
                continue
            if htlc.outgoing_for(self.self_id):
                out[outpoint] = (max(now, htlc.deadline), "claim", self._plain_witness, amount)
            elif image in known_preimages:
                out[outpoint] = (now, "claim", self._preimage_witness_for(image), amount)
        for txid, (stage, stage_record, stage_conf) in self.second_stage_confirmed.items():
            if stage_record.tx.txid != record.tx.txid:
                continue
            outpoint = Outpoint(txid, 0)
            spent = self.spent_index.get(outpoint)
            if spent is not None and spent[0].txid != txid:
                continue
            amount = stage.tx.outputs[0].amount
            if record.holder == self.self_id:
                out[outpoint] = (stage_conf + self.params.self_delay, "claim",
                                 self._plain_witness, amount)
            elif breach:
                out[outpoint] = (now, "revocation", self._revocation_witness, amount)
        return out

    def _add_child_entitlements(self, out: dict, spender: Transaction, spender_conf: int,
                                breach: bool, known_preimages: Mapping[bytes, bytes]) -> None:
        """A breach commitment's output was moved by the peer; its child
        outputs stay revocable (second-stage outputs carry the same
        revocation key), so chase them."""
        if not breach:
            return
        for i, child_out in enumerate(spender.outputs):
            outpoint = Outpoint(spender.txid, i)
            spent = self.spent_index.get(outpoint)
            if spent is not None and spent[0].txid != spender.txid:
                continue
            if spender.txid in self.second_stage_confirmed:
                out[outpoint] = (spender_conf, "revocation", self._revocation_witness,
                                 child_out.amount)

    def _is_own_claim(self, tx: Transaction) -> bool:
        return tx.txid in self._claim_txids or all(
            isinstance(o.condition, Sig) and o.condition.pubkey == self.self_pair.public
            for o in tx.outputs
        )
