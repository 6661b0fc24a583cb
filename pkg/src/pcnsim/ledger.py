"""In-memory first layer over the UTXO transaction model.

The ledger is a single logical party driven by one owner (the simulation
loop). It provides four guarantees, each with a tick-exact bound:

  liveness      a submitted transaction is judged at a scheduled tick at
                most `conf_bound` after submission and confirmed if valid
  visibility    a confirmed transaction is delivered to every user it
                affects (or to everyone, in global mode) within
                `sync_bound` of confirmation
  persistence   the confirmed map is append-only
  validity      nothing confirms that fails validation at its
                confirmation tick

Confirmation latency and delivery latency inside those bounds are
scenario knobs so an adversarial harness can explore worst-case timing.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Mapping

from .conditions import collect_sig_keys, evaluate_condition
from .crypto import KeyRegistry, hash_image
from .errors import ConfigInvalid, ModeUnsupported, UnknownOutpointError
from .transactions import Outpoint, Output, Transaction


@dataclass(frozen=True)
class TimingParams:
    """Tick-count parameters of the ledger and the honest user model.

    conf_bound      worst-case ticks from submission to confirmation
    sync_bound      worst-case ticks from confirmation to delivery
    self_delay      relative delay guarding a publisher's own commitment
                    outputs (the contest window for revocation)
    forward_delta   gap between contract deadlines on consecutive hops
    watch_interval  honest users read the ledger at least this often
    """

    conf_bound: int
    sync_bound: int
    self_delay: int
    forward_delta: int
    watch_interval: int

    def validate(self, *, allow_unsafe_watch: bool = False) -> None:
        for name in ("conf_bound", "sync_bound", "self_delay", "forward_delta", "watch_interval"):
            if getattr(self, name) <= 0:
                raise ConfigInvalid(f"{name} must be strictly positive")
        if self.forward_delta <= self.sync_bound + self.conf_bound:
            raise ConfigInvalid(
                "forward_delta must satisfy forward_delta > sync_bound + conf_bound "
                f"({self.forward_delta} <= {self.sync_bound} + {self.conf_bound})"
            )
        if not allow_unsafe_watch and not (
            0 < self.watch_interval < self.self_delay - self.sync_bound - self.conf_bound
        ):
            raise ConfigInvalid(
                "watch_interval must satisfy "
                "0 < watch_interval < self_delay - sync_bound - conf_bound "
                f"({self.watch_interval} vs {self.self_delay} - {self.sync_bound} - {self.conf_bound})"
            )


class VisibilityMode(enum.Enum):
    AFFECTED_USERS = "affected_user"
    GLOBAL = "global"


class InvalidReason(enum.Enum):
    UNKNOWN_OUTPOINT = "unknown_outpoint"
    ALREADY_SPENT = "already_spent"
    CONDITION_UNSATISFIED = "condition_unsatisfied"
    VALUE_MISMATCH = "value_mismatch"


@dataclass(frozen=True)
class ValidityResult:
    ok: bool
    reason: InvalidReason | None = None
    input_index: int | None = None

    @classmethod
    def valid(cls) -> ValidityResult:
        return cls(ok=True)

    @classmethod
    def invalid(cls, reason: InvalidReason, input_index: int | None = None) -> ValidityResult:
        return cls(ok=False, reason=reason, input_index=input_index)


@dataclass(frozen=True)
class SubmissionReceipt:
    txid: bytes
    scheduled_tick: int


@dataclass(frozen=True)
class LedgerEvent:
    tick: int
    kind: str  # submitted | confirmed | rejected | delivered | registered
    txid: bytes | None = None
    user: str | None = None
    reason: InvalidReason | None = None
    image: bytes | None = None


@dataclass
class _Pending:
    tx: Transaction
    submitter: str
    submit_tick: int
    scheduled_tick: int
    seq: int


@dataclass
class _Confirmed:
    tx: Transaction
    conf_tick: int
    conf_seq: int


@dataclass
class _UtxoEntry:
    output: Output
    conf_tick: int


@dataclass
class _Visibility:
    txid: bytes
    conf_tick: int
    conf_seq: int
    delivery_tick: int


class Ledger:
    """First-layer state machine; all mutation goes through submit/advance."""

    def __init__(
        self,
        params: TimingParams,
        mode: VisibilityMode,
        keys: KeyRegistry,
        users: Mapping[str, bytes],
        *,
        conf_delay: int | None = None,
        sync_delay: int | None = None,
    ) -> None:
        self.params = params
        self.mode = mode
        self.keys = keys
        self.users = dict(users)  # user id -> identity public key
        self._user_of_key = {pub: uid for uid, pub in self.users.items()}
        self.conf_delay = params.conf_bound if conf_delay is None else conf_delay
        self.sync_delay = params.sync_bound if sync_delay is None else sync_delay
        if not 1 <= self.conf_delay <= params.conf_bound:
            raise ConfigInvalid(f"conf_delay must be in [1, {params.conf_bound}]")
        if not 0 <= self.sync_delay <= params.sync_bound:
            raise ConfigInvalid(f"sync_delay must be in [0, {params.sync_bound}]")

        self.now = 0
        self._confirmed: dict[bytes, _Confirmed] = {}
        self._rejected: dict[bytes, InvalidReason] = {}
        self._pending: list[_Pending] = []
        self._pending_ids: dict[bytes, _Pending] = {}
        self._utxo: dict[Outpoint, _UtxoEntry] = {}
        self._spent_by: dict[Outpoint, bytes] = {}
        self._spent_outputs: dict[Outpoint, Output] = {}
        self._visible: dict[str, list[_Visibility]] = {uid: [] for uid in self.users}
        self._registry: dict[bytes, int] = {}
        self._registry_secrets: dict[bytes, bytes] = {}
        self._seq = 0
        self._conf_seq = 0
        self.log: list[LedgerEvent] = []

    # -- genesis ----------------------------------------------------------

    def seed_output(self, output: Output) -> Outpoint:
        """Install an initial unspent output (genesis funds, no ancestry)."""
        tag = hashlib.sha256(b"genesis" + self._seq.to_bytes(8, "big")).digest()
        self._seq += 1
        op = Outpoint(tag, 0)
        self._utxo[op] = _UtxoEntry(output=output, conf_tick=0)
        return op

    # -- queries ----------------------------------------------------------

    def status(self, txid: bytes) -> tuple[str, object]:
        if txid in self._confirmed:
            return "confirmed", self._confirmed[txid].conf_tick
        if txid in self._rejected:
            return "rejected", self._rejected[txid]
        if txid in self._pending_ids:
            return "pending", self._pending_ids[txid].scheduled_tick
        return "unknown", None

    def is_unspent(self, outpoint: Outpoint) -> bool:
        return outpoint in self._utxo

    def utxo_items(self) -> list[tuple[Outpoint, Output, int]]:
        return [(op, e.output, e.conf_tick) for op, e in self._utxo.items()]

    def confirmed_transaction(self, txid: bytes) -> tuple[Transaction, int] | None:
        entry = self._confirmed.get(txid)
        if entry is None:
            return None
        return entry.tx, entry.conf_tick

    def confirmed_ids(self) -> set[bytes]:
        return set(self._confirmed)

    def preimage_registrations(self) -> dict[bytes, int]:
        return dict(self._registry)

    def registered_secrets(self) -> dict[bytes, bytes]:
        """image -> preimage for everything in the registry (readable by all)."""
        return dict(self._registry_secrets)

    # -- core operations ---------------------------------------------------

    def validate_transaction(self, tx: Transaction, now: int) -> ValidityResult:
        """Judge `tx` against the current UTXO set at tick `now`."""
        spent: set[Outpoint] = set()
        total_in = 0
        for i, txin in enumerate(tx.inputs):
            op = txin.outpoint
            if op in spent:
                return ValidityResult.invalid(InvalidReason.ALREADY_SPENT, i)
            spent.add(op)
            entry = self._utxo.get(op)
            if entry is None:
                if op in self._spent_by:
                    return ValidityResult.invalid(InvalidReason.ALREADY_SPENT, i)
                return ValidityResult.invalid(InvalidReason.UNKNOWN_OUTPOINT, i)
            registry = self._registry if self.mode is VisibilityMode.GLOBAL else None
            if not evaluate_condition(
                entry.output.condition,
                txin.witness,
                entry.conf_tick,
                now,
                spending_txid=tx.txid,
                keys=self.keys,
                preimage_registry=registry,
            ):
                return ValidityResult.invalid(InvalidReason.CONDITION_UNSATISFIED, i)
            total_in += entry.output.amount
        if total_in != tx.output_amount():
            return ValidityResult.invalid(InvalidReason.VALUE_MISMATCH)
        return ValidityResult.valid()

    def submit_transaction(
        self,
        tx: Transaction,
        submitter: str,
        now: int,
        *,
        conf_delay: int | None = None,
    ) -> SubmissionReceipt:
        """Accept `tx` into the pending queue.

        The confirmation tick is now + conf_delay, pushed past any pending
        parent so a child spending an unconfirmed output is judged only
        after the parent had its chance. Validity is decided at the
        scheduled tick, not here.
        """
        delay = self.conf_delay if conf_delay is None else conf_delay
        if not 1 <= delay <= self.params.conf_bound:
            raise ConfigInvalid(f"conf_delay must be in [1, {self.params.conf_bound}]")
        scheduled = now + delay
        for txin in tx.inputs:
            parent = self._pending_ids.get(txin.outpoint.txid)
            if parent is not None:
                scheduled = max(scheduled, parent.scheduled_tick + 1)
        entry = _Pending(tx=tx, submitter=submitter, submit_tick=now, scheduled_tick=scheduled, seq=self._seq)
        self._seq += 1
        self._pending.append(entry)
        self._pending_ids[tx.txid] = entry
        self.log.append(LedgerEvent(tick=now, kind="submitted", txid=tx.txid, user=submitter))
        return SubmissionReceipt(txid=tx.txid, scheduled_tick=scheduled)

    def advance(self, to_tick: int) -> list[LedgerEvent]:
        """Process all confirmations and deliveries due up to `to_tick`.

        Nothing is ever due at tick 0: confirmation delays are at least 1
        and deliveries follow confirmations.
        """
        if to_tick < self.now:
            raise ValueError("ledger time cannot move backwards")
        events: list[LedgerEvent] = []
        for tick in range(self.now + 1, to_tick + 1):
            events.extend(self._process_tick(tick))
        self.now = max(self.now, to_tick)
        self.log.extend(events)
        return events

    def _process_tick(self, tick: int) -> list[LedgerEvent]:
        events: list[LedgerEvent] = []
        due = sorted(
            (p for p in self._pending if p.scheduled_tick == tick),
            key=lambda p: (p.scheduled_tick, p.seq, p.tx.txid),
        )
        for entry in due:
            self._pending.remove(entry)
            del self._pending_ids[entry.tx.txid]
            if entry.tx.txid in self._confirmed:
                self._rejected[entry.tx.txid] = InvalidReason.ALREADY_SPENT
                events.append(LedgerEvent(tick=tick, kind="rejected", txid=entry.tx.txid,
                                          reason=InvalidReason.ALREADY_SPENT))
                continue
            verdict = self.validate_transaction(entry.tx, tick)
            if not verdict.ok:
                self._rejected[entry.tx.txid] = verdict.reason
                events.append(LedgerEvent(tick=tick, kind="rejected", txid=entry.tx.txid, reason=verdict.reason))
                continue
            events.extend(self._confirm(entry.tx, tick))
        events.extend(self._deliveries_due(tick))
        return events

    def _confirm(self, tx: Transaction, tick: int) -> list[LedgerEvent]:
        audience = (
            sorted(self.users)
            if self.mode is VisibilityMode.GLOBAL
            else sorted(self.affected_users(tx))
        )
        for txin in tx.inputs:
            self._spent_outputs[txin.outpoint] = self._utxo[txin.outpoint].output
            del self._utxo[txin.outpoint]
            self._spent_by[txin.outpoint] = tx.txid
        for i, out in enumerate(tx.outputs):
            self._utxo[Outpoint(tx.txid, i)] = _UtxoEntry(output=out, conf_tick=tick)
        record = _Confirmed(tx=tx, conf_tick=tick, conf_seq=self._conf_seq)
        self._conf_seq += 1
        self._confirmed[tx.txid] = record
        for uid in audience:
            self._visible[uid].append(
                _Visibility(txid=tx.txid, conf_tick=tick, conf_seq=record.conf_seq,
                            delivery_tick=tick + self.sync_delay)
            )
        return [LedgerEvent(tick=tick, kind="confirmed", txid=tx.txid)]

    def _deliveries_due(self, tick: int) -> list[LedgerEvent]:
        events: list[LedgerEvent] = []
        for uid in sorted(self._visible):
            for vis in self._visible[uid]:
                if vis.delivery_tick == tick:
                    events.append(LedgerEvent(tick=tick, kind="delivered", txid=vis.txid, user=uid))
        return events

    def affected_users(self, tx: Transaction) -> set[str]:
        """Receivers plus potential senders of `tx`, by identity key.

        Receivers: users whose key appears in a Sig leaf of any output of
        the transaction. Potential senders: users whose key appears in a
        Sig leaf of any spent output. Keys outside the user set (per-state
        revocation keys) attribute to nobody.
        """
        keys: set[bytes] = set()
        for out in tx.outputs:
            keys |= collect_sig_keys(out.condition)
        for txin in tx.inputs:
            spent = self._resolve_output(txin.outpoint)
            if spent is None:
                raise UnknownOutpointError(f"cannot resolve {txin.outpoint}")
            keys |= collect_sig_keys(spent.condition)
        return {self._user_of_key[k] for k in keys if k in self._user_of_key}

    def _resolve_output(self, outpoint: Outpoint) -> Output | None:
        entry = self._utxo.get(outpoint)
        if entry is not None:
            return entry.output
        return self._spent_outputs.get(outpoint)

    def visible_transactions(self, user: str, now: int) -> list[tuple[Transaction, int]]:
        """All transactions delivered to `user` by `now`, in confirmation order."""
        entries = [v for v in self._visible[user] if v.delivery_tick <= now]
        entries.sort(key=lambda v: (v.conf_tick, v.conf_seq))
        return [(self._confirmed[v.txid].tx, v.conf_tick) for v in entries]

    def register_preimage(self, preimage: bytes, now: int) -> int:
        """Record a preimage in the global registry; first registration wins."""
        if self.mode is not VisibilityMode.GLOBAL:
            raise ModeUnsupported("preimage registry requires global visibility mode")
        image = hash_image(preimage)
        if image not in self._registry:
            self.log.append(LedgerEvent(tick=now, kind="registered", image=image))
        tick = min(self._registry.get(image, now), now)
        self._registry[image] = tick
        self._registry_secrets[image] = preimage
        return tick
