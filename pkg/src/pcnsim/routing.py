"""Multi-hop payment orchestration.

A payment from path[0] to path[-1] locks the amount hop by hop with hash
time-locked contracts, then unwinds backward once the receiver releases
the secret. Hop deadlines decrease toward the receiver by exactly
`forward_delta` so every intermediary that loses its outgoing contract
still has time to use the secret upstream. The constant-timeout variant
gives every hop the same deadline and gates contract claims on the global
preimage registry instead, which needs a globally synchronous ledger.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .channel import Phase
from .errors import InsufficientCapacity, PathBroken
from .ledger import TimingParams

STAGGERED = "staggered"
CONSTANT_TIMEOUT = "constant_timeout"


@dataclass(frozen=True)
class HopPlan:
    channel_id: str
    sender: str
    receiver: str
    deadline: int


@dataclass(frozen=True)
class PaymentPlan:
    index: int
    path: tuple[str, ...]
    amount: int
    image: bytes
    mode: str
    start: int
    hops: tuple[HopPlan, ...]

    @property
    def registry_gated(self) -> bool:
        return self.mode == CONSTANT_TIMEOUT

    def max_deadline(self) -> int:
        return max(h.deadline for h in self.hops)


@dataclass
class PaymentOutcome:
    status: str  # completed | partially_locked | failed
    hop: int | None = None
    reason: str | None = None

    def terminal(self) -> bool:
        return True


def plan_payment(
    path: tuple[str, ...],
    amount: int,
    now: int,
    mode: str,
    params: TimingParams,
    image: bytes,
    *,
    index: int = 0,
    hop_channel,  # (sender, receiver) -> (channel_id, sender_stable, operational)
) -> PaymentPlan:
    """Fix hop deadlines and validate capacity along the path.

    Staggered deadlines are now + (N - i) * forward_delta for hop i, so
    consecutive hops differ by exactly forward_delta; constant-timeout
    mode uses the sender-side deadline for every hop.
    """
    if len(path) < 2:
        raise PathBroken(0)
    n = len(path) - 1
    hops: list[HopPlan] = []
    for i in range(n):
        sender, receiver = path[i], path[i + 1]
        found = hop_channel(sender, receiver)
        if found is None:
            raise PathBroken(i)
        channel_id, sender_stable, operational = found
        if not operational:
            raise PathBroken(i)
        if sender_stable < amount:
            raise InsufficientCapacity(i)
        if mode == CONSTANT_TIMEOUT:
            deadline = now + n * params.forward_delta
        else:
            deadline = now + (n - i) * params.forward_delta
        hops.append(HopPlan(channel_id=channel_id, sender=sender, receiver=receiver,
                            deadline=deadline))
    return PaymentPlan(index=index, path=tuple(path), amount=amount, image=image,
                       mode=mode, start=now, hops=tuple(hops))


class PaymentCoordinator:
    """Resumable driver for one payment, stepped by the simulation.

    The forward (locking) phase cascades across hops within a tick: the
    next hop is triggered as soon as the previous negotiation settled.
    The receiver's redeem starts at the following tick through the
    standing redeem duty of its agent, and the backward phase then
    cascades upstream through the secret-learning hook. The coordinator
    only observes channel states; the channel machinery owns recovery
    when something stalls.
    """

    def __init__(self, plan: PaymentPlan, sim) -> None:
        self.plan = plan
        self.sim = sim
        self.outcome: PaymentOutcome | None = None
        self.hop_ptr = 0
        self._initiated_at: int | None = None
        self.locked_at: dict[int, int] = {}
        self.resolved_at: dict[int, int] = {}

    # -- state inspection ----------------------------------------------------

    def _endpoints(self, hop: HopPlan):
        sender_ep = self.sim.agents[hop.sender].endpoints[hop.channel_id]
        receiver_ep = self.sim.agents[hop.receiver].endpoints[hop.channel_id]
        return sender_ep, receiver_ep

    def _hop_locked(self, hop: HopPlan) -> bool:
        sender_ep, receiver_ep = self._endpoints(hop)
        return (self.plan.image in sender_ep.htlcs and sender_ep.pending_update is None
                and self.plan.image in receiver_ep.htlcs and receiver_ep.pending_update is None)

    def _hop_clear(self, hop: HopPlan) -> bool:
        sender_ep, receiver_ep = self._endpoints(hop)
        return (self.plan.image not in sender_ep.htlcs and sender_ep.pending_update is None
                and self.plan.image not in receiver_ep.htlcs)

    def _poll_resolutions(self, now: int) -> None:
        for i, hop in enumerate(self.plan.hops):
            if i in self.locked_at and i not in self.resolved_at and self._hop_clear(hop):
                sender_ep, _ = self._endpoints(hop)
                if sender_ep.phase in (Phase.OPERATIONAL, Phase.UPDATING):
                    self.resolved_at[i] = now
                    self.sim.note_htlc_resolved(hop.channel_id, self.plan.image, now,
                                                how="off_ledger", hop=i, payment=self.plan.index)

    # -- driving ---------------------------------------------------------------

    def step(self, now: int) -> None:
        if self.outcome is not None:
            self._poll_resolutions(now)
            return
        if self.hop_ptr == 0 and self._initiated_at is None:
            self._initiate_hop(0, now)
        self.try_progress(now)
        self._poll_resolutions(now)
        self._check_stall(now)

    def try_progress(self, now: int) -> bool:
        """Advance the forward cascade; returns True when state changed."""
        if self.outcome is not None:
            self._poll_resolutions(now)
            return False
        progressed = False
        while self.hop_ptr < len(self.plan.hops):
            hop = self.plan.hops[self.hop_ptr]
            if not self._hop_locked(hop):
                break
            if self.hop_ptr not in self.locked_at:
                self.locked_at[self.hop_ptr] = now
                self.sim.note_htlc_locked(hop.channel_id, self.plan.image, now,
                                          hop=self.hop_ptr, payment=self.plan.index)
            self.hop_ptr += 1
            progressed = True
            if self.hop_ptr < len(self.plan.hops):
                self._initiate_hop(self.hop_ptr, now)
        if self.hop_ptr == len(self.plan.hops) and self._all_resolved_check(now):
            progressed = True
        return progressed

    def _all_resolved_check(self, now: int) -> bool:
        self._poll_resolutions(now)
        if len(self.resolved_at) == len(self.plan.hops):
            self.outcome = PaymentOutcome(status="completed")
            return True
        return False

    def _initiate_hop(self, i: int, now: int) -> None:
        hop = self.plan.hops[i]
        agent = self.sim.agents[hop.sender]
        self._initiated_at = now
        ok = agent.initiate_add(hop.channel_id, self.plan.image, self.plan.amount,
                                hop.deadline, self.plan.registry_gated, now)
        if not ok:
            self.outcome = PaymentOutcome(status="partially_locked", hop=i,
                                          reason="sender did not lock")

    def _check_stall(self, now: int) -> None:
        if self.outcome is not None:
            return
        if self.hop_ptr < len(self.plan.hops):
            hop = self.plan.hops[self.hop_ptr]
            if self._initiated_at is not None and now > self._initiated_at:
                self.outcome = PaymentOutcome(status="partially_locked", hop=self.hop_ptr,
                                              reason="lock negotiation stalled")
            sender_ep, _ = self._endpoints(hop)
            if sender_ep.phase not in (Phase.OPERATIONAL, Phase.UPDATING):
                self.outcome = PaymentOutcome(status="partially_locked", hop=self.hop_ptr,
                                              reason="channel left operation")
            return
        # all hops locked; give the unwinding until the earliest deadline
        if now >= min(h.deadline for h in self.plan.hops):
            unresolved = max(i for i in range(len(self.plan.hops)) if i not in self.resolved_at)
            self.outcome = PaymentOutcome(status="partially_locked", hop=unresolved,
                                          reason="secret was not forwarded in time")


def collateral_lock_time(trace, payment_index: int) -> dict[int, tuple[int, int]]:
    """Per-hop (locked tick, released tick) measured from trace events.

    A hop's collateral is locked from the tick its contract settled into
    both commitments until the contract left the channel off-ledger or
    its value was finally swept on-ledger.
    """
    locked: dict[int, int] = {}
    released: dict[int, int] = {}
    keys: dict[tuple[str, bytes], int] = {}
    for event in trace:
        data = dict(event.data)
        if event.kind != "watcher":
            continue
        if data.get("action") == "htlc_locked" and data.get("payment") == payment_index:
            hop = data["hop"]
            locked[hop] = event.tick
            keys[(data["channel"], data["image"])] = hop
    for event in trace:
        data = dict(event.data)
        if event.kind != "watcher" or data.get("action") != "htlc_resolved":
            continue
        key = (data.get("channel"), data.get("image"))
        if key in keys:
            hop = keys[key]
            released.setdefault(hop, event.tick)
    return {hop: (locked[hop], released[hop]) for hop in locked if hop in released}
