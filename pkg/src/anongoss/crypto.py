"""Modeled public-key and symmetric cryptography for the simulator.

Keys are random byte strings drawn from the simulation RNG. A run-scoped
:class:`CryptoModel` keeps the mapping from each public identifier to its
secret material, which stands in for the math of a real public-key scheme:
sealing to a public key and verifying a signature consult the model, while
opening and signing require the :class:`SecretKey` capability itself.

Ciphertexts are genuinely opaque. Bodies are XORed with a SHAKE-256
keystream and authenticated with keyed BLAKE2b, so byte equality of two
ciphertexts only ever happens when the same bytes are forwarded unchanged.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass, field

PeerId = bytes

ID_LEN = 32
NONCE_LEN = 16
MAC_LEN = 16
MIN_SIZE_CLASS = 64


class CryptoError(Exception):
    pass


class UnknownRecipient(CryptoError):
    pass


class WrongKey(CryptoError):
    pass


class Malformed(CryptoError):
    pass


class TagCollision(CryptoError):
    pass


class SecretKey:
    """Opaque decryption/signing capability. Only its holder can open envelopes."""

    __slots__ = ("_material", "_owner")

    def __init__(self, material: bytes, owner: PeerId):
        self._material = material
        self._owner = owner

    def __repr__(self) -> str:
        return f"SecretKey(<{self._owner[:4].hex()}>)"


@dataclass(frozen=True)
class KeyPair:
    public: PeerId
    secret: SecretKey = field(repr=False)


@dataclass(frozen=True)
class SealedEnvelope:
    recipient: PeerId
    payload: bytes


@dataclass(frozen=True)
class SymKey:
    key: bytes

    def __repr__(self) -> str:
        return "SymKey(<hidden>)"


@dataclass(frozen=True)
class SymCiphertext:
    payload: bytes


@dataclass(frozen=True)
class MatchTag:
    tag: bytes


@dataclass(frozen=True)
class Signature:
    signer: PeerId
    sig: bytes

    def to_bytes(self) -> bytes:
        return self.signer + self.sig

    @classmethod
    def from_bytes(cls, data: bytes) -> "Signature":
        if len(data) != ID_LEN + 32:
            raise Malformed("bad signature length")
        return cls(data[:ID_LEN], data[ID_LEN:])


SIGNATURE_LEN = ID_LEN + 32


def size_class(n: int) -> int:
    """Smallest power of two >= n, floored at MIN_SIZE_CLASS."""
    size = MIN_SIZE_CLASS
    while size < n:
        size <<= 1
    return size


def xor_bytes(a: bytes, b: bytes) -> bytes:
    n = len(a)
    return (int.from_bytes(a, "little") ^ int.from_bytes(b[:n], "little")).to_bytes(n, "little")


def _stream(material: bytes, nonce: bytes, n: int, label: bytes) -> bytes:
    return hashlib.shake_256(label + material + nonce).digest(n)


def _cell_keys(material: bytes, nonce: bytes, n: int) -> tuple[bytes, bytes]:
    """Keystream of ``n`` bytes plus a 32-byte MAC key, from one XOF call."""
    out = _stream(material, nonce, n + 32, b"cell")
    return out[:n], out[n:]


def _mac(material: bytes, data: bytes, label: bytes) -> bytes:
    return hashlib.blake2b(data, key=material, person=label, digest_size=MAC_LEN).digest()


def _seal_with(material: bytes, plaintext: bytes, nonce: bytes, label: bytes) -> bytes:
    body_len = size_class(NONCE_LEN + 4 + len(plaintext) + MAC_LEN) - NONCE_LEN - MAC_LEN
    padded = struct.pack("<I", len(plaintext)) + plaintext
    padded += bytes(body_len - len(padded))
    ct = xor_bytes(padded, _stream(material, nonce, body_len, label))
    return nonce + ct + _mac(material, nonce + ct, label)


def _open_with(material: bytes, payload: bytes, label: bytes) -> bytes:
    if len(payload) < NONCE_LEN + 4 + MAC_LEN:
        raise Malformed("ciphertext too short")
    nonce, ct, tag = payload[:NONCE_LEN], payload[NONCE_LEN:-MAC_LEN], payload[-MAC_LEN:]
    if not hmac.compare_digest(tag, _mac(material, nonce + ct, label)):
        raise WrongKey("authentication failed")
    padded = xor_bytes(ct, _stream(material, nonce, len(ct), label))
    (n,) = struct.unpack_from("<I", padded)
    if n > len(padded) - 4:
        raise Malformed("length prefix out of range")
    return padded[4 : 4 + n]


class CryptoModel:
    """Run-scoped key registry plus the cryptographic operations.

    One instance per simulation; instances never share state.
    """

    def __init__(self) -> None:
        self._secrets: dict[PeerId, bytes] = {}
        self._tags: dict[bytes, bytes] = {}

    def keygen(self, rng: random.Random) -> KeyPair:
        while True:
            public = rng.randbytes(ID_LEN)
            if public not in self._secrets:
                break
        material = rng.randbytes(32)
        self._secrets[public] = material
        return KeyPair(public, SecretKey(material, public))

    def is_registered(self, peer: PeerId) -> bool:
        return peer in self._secrets

    def _material_for(self, recipient: PeerId) -> bytes:
        try:
            return self._secrets[recipient]
        except KeyError:
            raise UnknownRecipient(recipient.hex()[:8]) from None

    # -- public-key envelopes --------------------------------------------

    def seal(self, recipient: PeerId, plaintext: bytes, rng: random.Random) -> SealedEnvelope:
        material = self._material_for(recipient)
        return SealedEnvelope(recipient, _seal_with(material, plaintext, rng.randbytes(NONCE_LEN), b"pk-env"))

    def open(self, env: SealedEnvelope, secret: SecretKey) -> bytes:
        return _open_with(secret._material, env.payload, b"pk-env")

    def open_bytes(self, payload: bytes, secret: SecretKey) -> bytes:
        """Open a raw envelope payload as received off the wire."""
        return _open_with(secret._material, payload, b"pk-env")

    # Keystream agreement used by fixed-size onion cells. The sender derives
    # it from the recipient's public key, the recipient from its secret.

    def cell_stream_to(self, recipient: PeerId, nonce: bytes, n: int) -> tuple[bytes, bytes]:
        return _cell_keys(self._material_for(recipient), nonce, n)

    def cell_stream(self, secret: SecretKey, nonce: bytes, n: int) -> tuple[bytes, bytes]:
        return _cell_keys(secret._material, nonce, n)

    # -- symmetric -------------------------------------------------------

    @staticmethod
    def sym_keygen(rng: random.Random) -> SymKey:
        return SymKey(rng.randbytes(32))

    @staticmethod
    def sym_seal(k: SymKey, m: bytes, rng: random.Random) -> SymCiphertext:
        return SymCiphertext(_seal_with(k.key, m, rng.randbytes(NONCE_LEN), b"sym"))

    @staticmethod
    def sym_open(c: SymCiphertext, k: SymKey) -> bytes:
        return _open_with(k.key, c.payload, b"sym")

    # -- match tags --------------------------------------------------------

    def match_tag(self, k: SymKey, m: bytes) -> MatchTag:
        tag = hashlib.blake2b(m, key=k.key, person=b"match-tag", digest_size=32).digest()
        source = hashlib.blake2b(k.key + m, digest_size=32).digest()
        seen = self._tags.setdefault(tag, source)
        if seen != source:
            raise TagCollision(tag.hex())
        return MatchTag(tag)

    # -- signatures --------------------------------------------------------

    @staticmethod
    def sign(secret: SecretKey, m: bytes) -> Signature:
        sig = hashlib.blake2b(m, key=secret._material, person=b"signature", digest_size=32).digest()
        return Signature(secret._owner, sig)

    def verify(self, signer: PeerId, m: bytes, sig: Signature) -> bool:
        if sig.signer != signer:
            return False
        material = self._secrets.get(signer)
        if material is None:
            return False
        expected = hashlib.blake2b(m, key=material, person=b"signature", digest_size=32).digest()
        return hmac.compare_digest(expected, sig.sig)
