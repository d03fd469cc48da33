"""Crypto provider registry, software ES256 provider, credential wrapper.

Providers are indexed by COSE algorithm ID. The authenticator is agnostic
of the implementation behind a provider: a key pair exposes COSE encoding
on the public side and ``sign``/``get_encoded`` on the private side, so a
hardware-backed provider can replace the software one without touching
the authenticator (see :mod:`vfido.tpm`).
"""

from __future__ import annotations

import random
import secrets

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import Prehashed
from cryptography.hazmat.primitives.keywrap import (
    InvalidUnwrap,
    aes_key_unwrap_with_padding,
    aes_key_wrap_with_padding,
)

from . import cose
from .constants import ALG_ES256
from .errors import CredentialUnwrapError, KeyDecodeError

WRAP_KEY_SIZE = 32


class Rng:
    """Source of device randomness; swap in :class:`SeededRng` to make a
    device reproducible (keys, credential ids, wrap keys, signatures)."""

    deterministic = False

    def bytes(self, n: int) -> bytes:
        return secrets.token_bytes(n)


class SeededRng(Rng):
    """Reproducible randomness for scripted sessions and trace comparison.

    Not cryptographically secure; never use outside testing or demos.
    """

    deterministic = True

    def __init__(self, seed: int):
        self._random = random.Random(seed)

    def bytes(self, n: int) -> bytes:
        return self._random.randbytes(n)


def _private_scalar(rng: Rng) -> int:
    return 1 + int.from_bytes(rng.bytes(32), "big") % (cose.P256_N - 1)


class Es256PublicKey:
    """P-256 public key with COSE encoding."""

    def __init__(self, key: ec.EllipticCurvePublicKey):
        self._key = key
        numbers = key.public_numbers()
        self.x = numbers.x.to_bytes(32, "big")
        self.y = numbers.y.to_bytes(32, "big")

    def cose(self) -> dict:
        return cose.ec2_key(ALG_ES256, self.x, self.y)

    def verify(self, signature: bytes, data: bytes) -> bool:
        try:
            self._key.verify(signature, data, ec.ECDSA(hashes.SHA256()))
            return True
        except InvalidSignature:
            return False


class Es256PrivateKey:
    """P-256 signing key; serialized as unencrypted PKCS#8 DER."""

    def __init__(self, key: ec.EllipticCurvePrivateKey, deterministic_sign: bool = False):
        self._key = key
        self._deterministic = deterministic_sign
        self.public = Es256PublicKey(key.public_key())

    def sign(self, data: bytes) -> bytes:
        """ECDSA-SHA256 signature in ASN.1 DER form."""
        return self._key.sign(
            data, ec.ECDSA(hashes.SHA256(), deterministic_signing=self._deterministic)
        )

    def sign_prehashed(self, digest32: bytes) -> bytes:
        return self._key.sign(
            digest32,
            ec.ECDSA(Prehashed(hashes.SHA256()), deterministic_signing=self._deterministic),
        )

    def ecdh(self, peer_cose: dict) -> bytes:
        """Shared-point x coordinate from an ECDH exchange with a COSE peer key."""
        x, y = cose.decode_ec2(peer_cose)
        peer = ec.EllipticCurvePublicNumbers(
            int.from_bytes(x, "big"), int.from_bytes(y, "big"), ec.SECP256R1()
        ).public_key()
        return self._key.exchange(ec.ECDH(), peer)

    def get_encoded(self) -> bytes:
        return self._key.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )


class Es256KeyPair:
    def __init__(self, private: Es256PrivateKey):
        self.private = private
        self.public = private.public


class Es256Provider:
    """Software ES256 provider on SECP256R1."""

    alg = ALG_ES256

    def __init__(self, rng: Rng | None = None):
        self._rng = rng or Rng()

    def create_keypair(self) -> Es256KeyPair:
        if self._rng.deterministic:
            key = ec.derive_private_key(_private_scalar(self._rng), ec.SECP256R1())
        else:
            key = ec.generate_private_key(ec.SECP256R1())
        return Es256KeyPair(Es256PrivateKey(key, self._rng.deterministic))

    def load_private(self, encoded: bytes) -> Es256PrivateKey:
        try:
            key = serialization.load_der_private_key(encoded, password=None)
        except (ValueError, TypeError) as exc:
            raise KeyDecodeError(f"not a loadable PKCS#8 key: {exc}") from exc
        if not isinstance(key, ec.EllipticCurvePrivateKey) or not isinstance(
            key.curve, ec.SECP256R1
        ):
            raise KeyDecodeError("encoded key is not a P-256 key")
        return Es256PrivateKey(key, self._rng.deterministic)

    def public_from_cose(self, cose_map: dict) -> Es256PublicKey:
        x, y = cose.decode_ec2(cose_map)
        numbers = ec.EllipticCurvePublicNumbers(
            int.from_bytes(x, "big"), int.from_bytes(y, "big"), ec.SECP256R1()
        )
        return Es256PublicKey(numbers.public_key())


class ProviderRegistry:
    """Algorithm-indexed provider lookup; one provider per COSE alg id."""

    def __init__(self, providers=()):
        self._providers: dict[int, object] = {}
        for provider in providers:
            self.register(provider)

    def register(self, provider) -> None:
        if provider.alg in self._providers:
            raise ValueError(f"a provider for COSE alg {provider.alg} is already registered")
        self._providers[provider.alg] = provider

    def supports(self, alg: int) -> bool:
        return alg in self._providers

    def get(self, alg: int):
        return self._providers[alg]

    def algorithms(self) -> list[int]:
        return list(self._providers)


def wrap_with_padding(kek: bytes, plaintext: bytes) -> bytes:
    """AES key wrap with padding (RFC 5649)."""
    return aes_key_wrap_with_padding(kek, plaintext)


def unwrap_with_padding(kek: bytes, wrapped: bytes) -> bytes:
    try:
        return aes_key_unwrap_with_padding(kek, wrapped)
    except (InvalidUnwrap, ValueError) as exc:
        raise CredentialUnwrapError("wrapped blob failed integrity check") from exc


class AesCredentialWrapper:
    """Wraps serialized credential sources under a 32-byte device key."""

    @staticmethod
    def generate_key(rng: Rng | None = None) -> bytes:
        return (rng or Rng()).bytes(WRAP_KEY_SIZE)

    def __init__(self, key: bytes):
        if len(key) != WRAP_KEY_SIZE:
            raise ValueError(f"wrap key must be {WRAP_KEY_SIZE} bytes")
        self._key = key

    def wrap(self, plaintext: bytes) -> bytes:
        if not plaintext:
            raise ValueError("refusing to wrap an empty credential")
        return wrap_with_padding(self._key, plaintext)

    def unwrap(self, wrapped: bytes) -> bytes:
        if len(wrapped) < 16 or len(wrapped) % 8:
            raise CredentialUnwrapError("wrapped blob has an impossible length")
        return unwrap_with_padding(self._key, wrapped)
