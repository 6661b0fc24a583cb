"""Deterministic stand-in cryptography for protocol simulation.

Signatures are keyed hashes over (secret, message), verified by
recomputation through a key registry shared with the verifying harness.
This tests protocol logic rather than cryptography; the sign/verify
interface is shaped so a real signature scheme could be dropped in.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from random import Random


def _digest(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(4, "big"))
        h.update(part)
    return h.digest()


def hash_image(preimage: bytes) -> bytes:
    """Image of a preimage under the simulator's hash function."""
    return _digest(b"img", preimage)


def derive_public(secret: bytes) -> bytes:
    """Public half of a key pair; derivable from the secret alone."""
    return _digest(b"pub", secret)


def sign(secret: bytes, message: bytes) -> bytes:
    return _digest(b"sig", secret, message)


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes

    @classmethod
    def from_secret(cls, secret: bytes) -> KeyPair:
        return cls(secret=secret, public=derive_public(secret))

    def sign(self, message: bytes) -> bytes:
        return sign(self.secret, message)


class KeyRegistry:
    """Key pairs known to the verifier.

    Verification recomputes the keyed hash from the registered secret.
    Unknown keys and malformed signatures fail verification rather than
    raising.
    """

    def __init__(self) -> None:
        self._secrets: dict[bytes, bytes] = {}

    def register(self, pair: KeyPair) -> KeyPair:
        self._secrets[pair.public] = pair.secret
        return pair

    def register_secret(self, secret: bytes) -> KeyPair:
        return self.register(KeyPair.from_secret(secret))

    def new_pair(self, rng: Random) -> KeyPair:
        return self.register(KeyPair.from_secret(rng.randbytes(16)))

    def knows(self, public: bytes) -> bool:
        return public in self._secrets

    def verify(self, public: bytes, message: bytes, signature: object) -> bool:
        secret = self._secrets.get(public)
        if secret is None or not isinstance(signature, bytes):
            return False
        return sign(secret, message) == signature
