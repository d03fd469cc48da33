"""Client-PIN protocol (protocol version 1).

The key agreement, transport encryption, and proof-of-knowledge scheme
are fixed: ECDH on P-256 with the shared secret SHA-256(x-coordinate),
AES-256-CBC with a zero IV for transport encryption, and pinAuth proofs
as the first 16 bytes of an HMAC-SHA-256. The protocol always runs on a
dedicated software ES256 key pair, independent of whichever provider
registry backs credential keys.
"""

from __future__ import annotations

import hashlib
import hmac

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .constants import (
    ALG_ECDH_ES_HKDF_256,
    PIN_MAX_RETRIES,
    PIN_TOKEN_SIZE,
    ClientPinSubCommand,
    CtapStatus,
)
from .cose import ec2_key
from .crypto import Es256Provider, Rng
from .errors import CtapError
from .messages import ClientPinParameters, ClientPinResponse
from .storage import JsonFileStore, PinRecord

MIN_PIN_LENGTH = 4
MAX_PIN_LENGTH = 63
_PADDED_PIN_LENGTH = 64
_ZERO_IV = b"\x00" * 16


def _cbc_encrypt(key: bytes, data: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.CBC(_ZERO_IV)).encryptor()
    return enc.update(data) + enc.finalize()


def _cbc_decrypt(key: bytes, data: bytes) -> bytes:
    dec = Cipher(algorithms.AES(key), modes.CBC(_ZERO_IV)).decryptor()
    return dec.update(data) + dec.finalize()


def _hmac_sha256(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def pin_hash(pin: bytes) -> bytes:
    """Stored PIN representation: first 16 bytes of SHA-256(PIN)."""
    return hashlib.sha256(pin).digest()[:16]


class PinProtocol:
    """Server side of the client-PIN subcommands.

    The PIN token and the key-agreement key pair live for one power-up;
    the PIN hash and the retry counter persist in storage.
    """

    def __init__(self, store: JsonFileStore, rng: Rng | None = None):
        self._store = store
        self._rng = rng or Rng()
        self._provider = Es256Provider(self._rng)
        self._token = self._rng.bytes(PIN_TOKEN_SIZE)
        self._key_agreement = self._provider.create_keypair()

    # -- state ------------------------------------------------------------

    @property
    def pin_is_set(self) -> bool:
        return self._store.pin_record is not None

    @property
    def retries(self) -> int:
        record = self._store.pin_record
        return record.retries if record is not None else PIN_MAX_RETRIES

    def key_agreement_cose(self) -> dict:
        public = self._key_agreement.public
        return ec2_key(ALG_ECDH_ES_HKDF_256, public.x, public.y)

    def forget(self) -> None:
        """Drop the session token and key-agreement pair (used on reset)."""
        self._token = self._rng.bytes(PIN_TOKEN_SIZE)
        self._key_agreement = self._provider.create_keypair()

    def verify_pin_auth(self, pin_auth: bytes, client_data_hash: bytes) -> bool:
        expected = _hmac_sha256(self._token, client_data_hash)[:16]
        return hmac.compare_digest(expected, pin_auth)

    # -- subcommand dispatch ----------------------------------------------

    def handle(self, params: ClientPinParameters) -> ClientPinResponse:
        if params.pin_protocol != 1:
            raise CtapError(CtapStatus.INVALID_PARAMETER, "only PIN protocol 1 is supported")
        sub = params.sub_command
        if sub == ClientPinSubCommand.GET_RETRIES:
            return ClientPinResponse(retries=self.retries)
        if sub == ClientPinSubCommand.GET_KEY_AGREEMENT:
            return ClientPinResponse(key_agreement=self.key_agreement_cose())
        if sub == ClientPinSubCommand.SET_PIN:
            return self._set_pin(params)
        if sub == ClientPinSubCommand.CHANGE_PIN:
            return self._change_pin(params)
        return self._get_pin_token(params)

    def _shared_secret(self, key_agreement: dict) -> bytes:
        x = self._key_agreement.private.ecdh(key_agreement)
        return hashlib.sha256(x).digest()

    def _store_new_pin(self, shared: bytes, new_pin_enc: bytes) -> None:
        if len(new_pin_enc) < _PADDED_PIN_LENGTH or len(new_pin_enc) % 16:
            raise CtapError(CtapStatus.INVALID_PARAMETER, "newPinEnc has an invalid length")
        padded = _cbc_decrypt(shared, new_pin_enc)
        pin = padded.split(b"\x00", 1)[0]
        if len(pin) == len(padded) or not MIN_PIN_LENGTH <= len(pin) <= MAX_PIN_LENGTH:
            raise CtapError(CtapStatus.PIN_POLICY_VIOLATION, "PIN must be 4..63 bytes")
        self._store.set_pin_record(PinRecord(pin_hash(pin), PIN_MAX_RETRIES))

    def _set_pin(self, params: ClientPinParameters) -> ClientPinResponse:
        if self.pin_is_set:
            raise CtapError(CtapStatus.PIN_AUTH_INVALID, "a PIN is already set")
        shared = self._shared_secret(params.key_agreement)
        expected = _hmac_sha256(shared, params.new_pin_enc)[:16]
        if not hmac.compare_digest(expected, params.pin_auth):
            raise CtapError(CtapStatus.PIN_AUTH_INVALID)
        self._store_new_pin(shared, params.new_pin_enc)
        return ClientPinResponse()

    def _check_pin_hash(self, shared: bytes, pin_hash_enc: bytes, record: PinRecord) -> None:
        """Decrement-then-verify; a wrong proof also rotates the key agreement."""
        remaining = record.retries - 1
        self._store.set_pin_record(PinRecord(record.pin_hash, remaining))
        presented = _cbc_decrypt(shared, pin_hash_enc)
        if not hmac.compare_digest(presented, record.pin_hash):
            self._key_agreement = self._provider.create_keypair()
            if remaining == 0:
                raise CtapError(CtapStatus.PIN_BLOCKED)
            raise CtapError(CtapStatus.PIN_INVALID)
        self._store.set_pin_record(PinRecord(record.pin_hash, PIN_MAX_RETRIES))

    def _require_set_pin(self) -> PinRecord:
        record = self._store.pin_record
        if record is None:
            raise CtapError(CtapStatus.PIN_NOT_SET)
        if record.retries == 0:
            raise CtapError(CtapStatus.PIN_BLOCKED)
        return record

    def _change_pin(self, params: ClientPinParameters) -> ClientPinResponse:
        record = self._require_set_pin()
        shared = self._shared_secret(params.key_agreement)
        proof = _hmac_sha256(shared, params.new_pin_enc + params.pin_hash_enc)[:16]
        if not hmac.compare_digest(proof, params.pin_auth):
            raise CtapError(CtapStatus.PIN_AUTH_INVALID)
        self._check_pin_hash(shared, params.pin_hash_enc, record)
        self._store_new_pin(shared, params.new_pin_enc)
        return ClientPinResponse()

    def _get_pin_token(self, params: ClientPinParameters) -> ClientPinResponse:
        record = self._require_set_pin()
        shared = self._shared_secret(params.key_agreement)
        self._check_pin_hash(shared, params.pin_hash_enc, record)
        return ClientPinResponse(pin_token_enc=_cbc_encrypt(shared, self._token))
