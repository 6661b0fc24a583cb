"""Spending-condition trees for transaction outputs.

A condition is a finite tree whose leaves require a signature, a hash
preimage, a relative delay since the spent output confirmed, an absolute
tick, or a preimage registration before a deadline, combined with AND/OR
nodes. Evaluation is pure and never raises on malformed witnesses: a
witness entry that does not check out simply leaves the leaf unsatisfied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Union

from .crypto import KeyRegistry, hash_image


@dataclass(frozen=True)
class Sig:
    pubkey: bytes


@dataclass(frozen=True)
class Preimage:
    image: bytes


@dataclass(frozen=True)
class RelativeDelay:
    """Satisfied once `delay` ticks passed since the spent output confirmed."""

    delay: int


@dataclass(frozen=True)
class AbsoluteTime:
    """Satisfied at tick `at` and later."""

    at: int


@dataclass(frozen=True)
class PreimageRegisteredBefore:
    """Satisfied if the image was registered strictly before `deadline`.

    Only satisfiable on a ledger running in global-visibility mode, where
    a shared preimage registry exists.
    """

    image: bytes
    deadline: int


@dataclass(frozen=True)
class And:
    children: tuple["Condition", ...]

    def __post_init__(self) -> None:
        if len(self.children) < 1:
            raise ValueError("And requires at least one child")


@dataclass(frozen=True)
class Or:
    children: tuple["Condition", ...]

    def __post_init__(self) -> None:
        if len(self.children) < 2:
            raise ValueError("Or requires at least two children")


Condition = Union[Sig, Preimage, RelativeDelay, AbsoluteTime, PreimageRegisteredBefore, And, Or]

_LEAF_TAGS = {
    Sig: b"S",
    Preimage: b"P",
    RelativeDelay: b"D",
    AbsoluteTime: b"T",
    PreimageRegisteredBefore: b"R",
}


def all_of(*children: Condition) -> Condition:
    return And(tuple(children))


def any_of(*children: Condition) -> Condition:
    return Or(tuple(children))


def evaluate_condition(
    cond: Condition,
    witness: "WitnessLike",
    spent_conf_tick: int,
    now: int,
    *,
    spending_txid: bytes,
    keys: KeyRegistry,
    preimage_registry: Mapping[bytes, int] | None = None,
) -> bool:
    """Decide whether `witness` satisfies `cond` at tick `now`.

    Signatures are checked over the id of the spending transaction.
    `preimage_registry` maps image -> first registration tick and is None
    when the ledger mode provides no registry.
    """
    if isinstance(cond, Sig):
        return keys.verify(cond.pubkey, spending_txid, witness.signature_for(cond.pubkey))
    if isinstance(cond, Preimage):
        return any(hash_image(x) == cond.image for x in witness.preimages)
    if isinstance(cond, RelativeDelay):
        return now >= spent_conf_tick + cond.delay
    if isinstance(cond, AbsoluteTime):
        return now >= cond.at
    if isinstance(cond, PreimageRegisteredBefore):
        if preimage_registry is None:
            return False
        registered = preimage_registry.get(cond.image)
        return registered is not None and registered < cond.deadline
    if isinstance(cond, And):
        return all(
            evaluate_condition(
                c, witness, spent_conf_tick, now,
                spending_txid=spending_txid, keys=keys, preimage_registry=preimage_registry,
            )
            for c in cond.children
        )
    if isinstance(cond, Or):
        return any(
            evaluate_condition(
                c, witness, spent_conf_tick, now,
                spending_txid=spending_txid, keys=keys, preimage_registry=preimage_registry,
            )
            for c in cond.children
        )
    raise TypeError(f"not a condition: {cond!r}")


def iter_nodes(cond: Condition) -> Iterator[Condition]:
    yield cond
    if isinstance(cond, (And, Or)):
        for child in cond.children:
            yield from iter_nodes(child)


def collect_sig_keys(cond: Condition) -> set[bytes]:
    """All public keys appearing in Sig leaves of the tree."""
    return {node.pubkey for node in iter_nodes(cond) if isinstance(node, Sig)}


def encode_condition(cond: Condition) -> bytes:
    """Canonical byte encoding, used for transaction ids."""
    if isinstance(cond, Sig):
        return b"S" + _blob(cond.pubkey)
    if isinstance(cond, Preimage):
        return b"P" + _blob(cond.image)
    if isinstance(cond, RelativeDelay):
        return b"D" + cond.delay.to_bytes(8, "big")
    if isinstance(cond, AbsoluteTime):
        return b"T" + cond.at.to_bytes(8, "big")
    if isinstance(cond, PreimageRegisteredBefore):
        return b"R" + _blob(cond.image) + cond.deadline.to_bytes(8, "big")
    if isinstance(cond, And):
        return b"A" + _seq(cond.children)
    if isinstance(cond, Or):
        return b"O" + _seq(cond.children)
    raise TypeError(f"not a condition: {cond!r}")


def _blob(data: bytes) -> bytes:
    return len(data).to_bytes(4, "big") + data


def _seq(children: tuple[Condition, ...]) -> bytes:
    body = b"".join(encode_condition(c) for c in children)
    return len(children).to_bytes(2, "big") + body


class WitnessLike:
    """Structural interface evaluate_condition expects (see transactions.Witness)."""

    preimages: frozenset[bytes]

    def signature_for(self, pubkey: bytes) -> bytes | None:
        raise NotImplementedError
