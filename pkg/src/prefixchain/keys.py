"""Ed25519 signing and account identity.

An account id is the SHA-256 hash of the raw 32-byte public key.  Ed25519
signatures are deterministic, which the replay-determinism guarantees rely on.
"""

from __future__ import annotations

import hashlib

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

ACCOUNT_ID_LEN = 32
SIGNATURE_LEN = 64


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def account_id(public_key: bytes) -> bytes:
    """32-byte account identifier derived from the raw public key."""
    return sha256(public_key)


class KeyPair:
    """In-memory signing identity."""

    __slots__ = ("_priv", "public_bytes", "account")

    def __init__(self, priv: Ed25519PrivateKey):
        self._priv = priv
        self.public_bytes = priv.public_key().public_bytes(
            Encoding.Raw, PublicFormat.Raw
        )
        self.account = account_id(self.public_bytes)

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls(Ed25519PrivateKey.generate())

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        """Deterministic keypair from 32 seed bytes (simulation and tests)."""
        if len(seed) != 32:
            seed = sha256(seed)
        return cls(Ed25519PrivateKey.from_private_bytes(seed))

    @classmethod
    def from_private_bytes(cls, raw: bytes) -> "KeyPair":
        return cls(Ed25519PrivateKey.from_private_bytes(raw))

    @property
    def private_bytes(self) -> bytes:
        return self._priv.private_bytes(
            Encoding.Raw, PrivateFormat.Raw, NoEncryption()
        )

    def sign(self, message: bytes) -> bytes:
        return self._priv.sign(message)


def verify(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False
