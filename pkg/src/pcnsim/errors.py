"""Exception types shared across the package."""

from __future__ import annotations


class PcnError(Exception):
    """Base class for package errors."""


class ConfigInvalid(PcnError):
    """A scenario configuration violates a structural or timing constraint."""


class ModeUnsupported(PcnError):
    """Operation requires a ledger visibility mode other than the current one."""


class UnknownOutpointError(PcnError):
    """A spent outpoint cannot be resolved in the confirmed set."""


class ProtocolViolation(PcnError):
    """A channel message arrived out of sequence or in the wrong phase."""

    def __init__(self, phase: str, message: str) -> None:
        super().__init__(f"unexpected message {message} in phase {phase}")
        self.phase = phase
        self.message = message


class BadSignature(PcnError):
    """A counterparty signature failed verification; the update is aborted."""


class InsufficientBalance(PcnError):
    pass


class UnknownHtlc(PcnError):
    pass


class WrongPreimage(PcnError):
    """The redeem preimage hashes to no tracked contract image."""


class NotOpen(PcnError):
    """Channel is not in a phase that permits the requested operation."""


class UnknownState(PcnError):
    """No recorded balances for the requested channel state number."""


class InsufficientCapacity(PcnError):
    def __init__(self, hop: int) -> None:
        super().__init__(f"insufficient sender balance on hop {hop}")
        self.hop = hop


class PathBroken(PcnError):
    def __init__(self, hop: int) -> None:
        super().__init__(f"no operational channel on hop {hop}")
        self.hop = hop


class GridTooLarge(PcnError):
    def __init__(self, size: int, cap: int) -> None:
        super().__init__(f"grid of {size} configs exceeds cap {cap}")
        self.size = size
        self.cap = cap


class NotHonest(PcnError):
    """Security verdicts are only defined for honest users."""


class ChannelUnknown(PcnError):
    pass
