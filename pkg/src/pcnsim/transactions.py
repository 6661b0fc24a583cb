"""UTXO-model transactions.

A transaction id commits to the spent outpoints and the outputs but not
to witnesses, so a transaction can be identified (and signed) before the
witnesses that authorize it exist.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple

from .conditions import Condition, Sig, encode_condition


class Outpoint(NamedTuple):
    txid: bytes
    index: int


@dataclass(frozen=True)
class Output:
    amount: int
    condition: Condition

    def __post_init__(self) -> None:
        if self.amount < 0:
            raise ValueError("output amount must be non-negative")


@dataclass(frozen=True)
class Witness:
    signatures: tuple[tuple[bytes, bytes], ...] = ()
    preimages: frozenset[bytes] = frozenset()

    @classmethod
    def build(
        cls,
        signatures: Mapping[bytes, bytes] | None = None,
        preimages: Iterable[bytes] = (),
    ) -> Witness:
        sigs = tuple(sorted((signatures or {}).items()))
        return cls(signatures=sigs, preimages=frozenset(preimages))

    def signature_for(self, pubkey: bytes) -> bytes | None:
        for key, sig in self.signatures:
            if key == pubkey:
                return sig
        return None


EMPTY_WITNESS = Witness()


@dataclass(frozen=True)
class TxInput:
    outpoint: Outpoint
    witness: Witness = EMPTY_WITNESS


@dataclass(frozen=True)
class Transaction:
    inputs: tuple[TxInput, ...]
    outputs: tuple[Output, ...]
    _txid: bytes = field(init=False, repr=False, compare=False, default=b"")

    def __post_init__(self) -> None:
        if not self.inputs or not self.outputs:
            raise ValueError("transaction needs at least one input and one output")
        h = hashlib.sha256()
        for txin in self.inputs:
            h.update(txin.outpoint.txid)
            h.update(txin.outpoint.index.to_bytes(4, "big"))
        for out in self.outputs:
            h.update(out.amount.to_bytes(8, "big"))
            h.update(encode_condition(out.condition))
        object.__setattr__(self, "_txid", h.digest())

    @property
    def txid(self) -> bytes:
        return self._txid

    def output_amount(self) -> int:
        return sum(out.amount for out in self.outputs)

    def outpoint(self, index: int) -> Outpoint:
        return Outpoint(self.txid, index)

    def with_witnesses(self, witnesses: Mapping[int, Witness]) -> Transaction:
        """Same transaction with witnesses attached; the id is unchanged."""
        new_inputs = tuple(
            replace(txin, witness=witnesses.get(i, txin.witness))
            for i, txin in enumerate(self.inputs)
        )
        tx = Transaction(inputs=new_inputs, outputs=self.outputs)
        assert tx.txid == self.txid
        return tx

    def short_id(self) -> str:
        return self.txid.hex()[:16]


def make_transaction(
    spends: Iterable[tuple[Outpoint, Witness]],
    outputs: Iterable[Output],
) -> Transaction:
    return Transaction(
        inputs=tuple(TxInput(outpoint=op, witness=w) for op, w in spends),
        outputs=tuple(outputs),
    )


def single_sig_owner(condition: Condition) -> bytes | None:
    """Public key of a bare single-signature output, else None.

    Used to attribute settled ("received") funds to a user: only value
    sitting in a plain Sig output counts as received outside a channel.
    """
    if isinstance(condition, Sig):
        return condition.pubkey
    return None


def short_id(txid: bytes) -> str:
    return txid.hex()[:16]
