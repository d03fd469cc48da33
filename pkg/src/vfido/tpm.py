"""Simulated TPM: a persistent storage root key wrapping password-protected
user storage keys, which in turn wrap per-relying-party P-256 signing keys.

The device exposes a nine-call interface (setup, set_log_level,
create_and_load_user_key, load_user_key, create_and_load_rp_key,
load_rp_key, sign_using_rp_key, flush_data, get_last_error) that never
raises: failures surface as a nonzero status or an empty record, with the
reason retrievable once through :meth:`TpmDevice.get_last_error`.

Key blobs are ``nonce(12) || AES-256-GCM ciphertext`` over
``secret(32) || SHA-256(auth)(32) || label`` under the parent's wrap key,
so a blob only ever loads under its true parent and carries its
authorization binding with it. The private half of a key therefore never
leaves the device in the clear; the public half is a SHA-256 commitment
for storage keys and the encoded public point for signing keys.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import time
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    Prehashed,
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import cose
from .constants import ALG_ES256
from .crypto import Rng
from .errors import KeyDecodeError
from . import cbor

RC_SUCCESS = 0
RC_FAILURE = 1

SRK_FILENAME = "srk.bin"
_NONCE_SIZE = 12
_KEY_SIZE = 32
_DIGEST_SIZE = 32

LOG_ERRORS = 1
LOG_BASIC = 2
LOG_FULL = 3

_USER_LABEL = b"user\x00"
_RP_LABEL = b"rp\x00"


@dataclass(frozen=True)
class ByteArray:
    """Size-prefixed opaque bytes crossing the device boundary.

    A zero size means "no data"; producers of a boundary value own its
    lifecycle.
    """

    data: bytes = b""

    def __post_init__(self):
        if len(self.data) > 0xFFFF:
            raise ValueError("byte array size must fit in 16 bits")

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def empty(self) -> bool:
        return self.size == 0

    @classmethod
    def from_text(cls, text: str) -> "ByteArray":
        return cls(text.encode("utf-8"))


@dataclass(frozen=True)
class KeyData:
    public_data: ByteArray = field(default_factory=ByteArray)
    private_data: ByteArray = field(default_factory=ByteArray)

    @property
    def empty(self) -> bool:
        return self.public_data.empty and self.private_data.empty


@dataclass(frozen=True)
class KeyEccPoint:
    x_coord: ByteArray = field(default_factory=ByteArray)
    y_coord: ByteArray = field(default_factory=ByteArray)

    @property
    def empty(self) -> bool:
        return self.x_coord.empty and self.y_coord.empty


@dataclass(frozen=True)
class RelyingPartyKey:
    key_blob: KeyData = field(default_factory=KeyData)
    key_point: KeyEccPoint = field(default_factory=KeyEccPoint)

    @property
    def empty(self) -> bool:
        return self.key_blob.empty


@dataclass(frozen=True)
class EcdsaSig:
    sig_r: ByteArray = field(default_factory=ByteArray)
    sig_s: ByteArray = field(default_factory=ByteArray)

    @property
    def empty(self) -> bool:
        return self.sig_r.empty and self.sig_s.empty


@dataclass
class _LoadedKey:
    label: bytes
    secret: bytes  # symmetric wrap key or P-256 private scalar
    auth_digest: bytes


def _auth_digest(auth: bytes) -> bytes:
    return hashlib.sha256(auth).digest()


def _wrap_blob(parent_key: bytes, secret: bytes, auth: bytes, label: bytes, rng: Rng) -> bytes:
    nonce = rng.bytes(_NONCE_SIZE)
    plaintext = secret + _auth_digest(auth) + label
    return nonce + AESGCM(parent_key).encrypt(nonce, plaintext, None)


def _unwrap_blob(parent_key: bytes, blob: bytes) -> tuple[bytes, bytes, bytes]:
    if len(blob) < _NONCE_SIZE + _KEY_SIZE + _DIGEST_SIZE + 16:
        raise ValueError("blob too short")
    nonce, ciphertext = blob[:_NONCE_SIZE], blob[_NONCE_SIZE:]
    plaintext = AESGCM(parent_key).decrypt(nonce, ciphertext, None)
    return (
        plaintext[:_KEY_SIZE],
        plaintext[_KEY_SIZE : _KEY_SIZE + _DIGEST_SIZE],
        plaintext[_KEY_SIZE + _DIGEST_SIZE :],
    )


def _scalar_to_point(scalar: bytes) -> tuple[bytes, bytes]:
    key = ec.derive_private_key(int.from_bytes(scalar, "big"), ec.SECP256R1())
    numbers = key.public_key().public_numbers()
    return numbers.x.to_bytes(32, "big"), numbers.y.to_bytes(32, "big")


class TpmDevice:
    """One logical TPM session; callers serialize access externally."""

    def __init__(self, rng: Rng | None = None):
        self._rng = rng or Rng()
        self._srk: bytes | None = None
        self._data_dir: str | None = None
        self._log_path: str | None = None
        self._log_level = LOG_ERRORS
        self._last_error = ""
        self._user: _LoadedKey | None = None
        self._rp: _LoadedKey | None = None

    # -- error and log plumbing -------------------------------------------

    def get_last_error(self) -> str:
        """Return the last error message, then reset it."""
        error, self._last_error = self._last_error, ""
        return error

    def _fail(self, message: str):
        self._last_error = message
        self._log(LOG_ERRORS, f"error: {message}")
        return None

    def set_log_level(self, level: int) -> int:
        if level not in (LOG_ERRORS, LOG_BASIC, LOG_FULL):
            self._fail(f"invalid log level {level}")
            return RC_FAILURE
        self._log_level = level
        return RC_SUCCESS

    def _log(self, level: int, message: str) -> None:
        if self._log_path is None or level > self._log_level:
            return
        try:
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(f"{time.strftime('%Y-%m-%d %H:%M:%S')} L{level} {message}\n")
        except OSError:
            pass

    # -- setup ---------------------------------------------------------------

    def setup(self, data_dir: str | os.PathLike, log_file: str = "") -> int:
        """Create or reload the storage root key under ``data_dir``.

        The SRK file is intentionally stored unencrypted and without a
        password so other device users can share it.
        """
        data_dir = os.fspath(data_dir)
        try:
            os.makedirs(data_dir, exist_ok=True)
        except OSError as exc:
            self._fail(f"cannot create data dir: {exc}")
            return RC_FAILURE
        self._data_dir = data_dir
        log_name = log_file or f"tpm_log_{time.strftime('%Y%m%d_%H%M%S')}_{time.time_ns() % 1_000_000}"
        self._log_path = os.path.join(data_dir, log_name)
        try:
            with open(self._log_path, "a", encoding="utf-8"):
                pass
        except OSError:
            self._log_path = None
        srk_path = os.path.join(data_dir, SRK_FILENAME)
        try:
            if os.path.exists(srk_path):
                with open(srk_path, "rb") as fh:
                    srk = fh.read()
                if len(srk) != _KEY_SIZE:
                    self._fail("storage root key file is corrupt")
                    return RC_FAILURE
                self._srk = srk
                self._log(LOG_BASIC, "reloaded persistent storage root key")
            else:
                self._srk = self._rng.bytes(_KEY_SIZE)
                with open(srk_path, "wb") as fh:
                    fh.write(self._srk)
                self._log(LOG_BASIC, "created persistent storage root key")
        except OSError as exc:
            self._srk = None
            self._fail(f"storage root key unavailable: {exc}")
            return RC_FAILURE
        self._log(LOG_FULL, f"setup complete, data dir {data_dir}")
        return RC_SUCCESS

    def _require_setup(self) -> bool:
        if self._srk is None:
            self._fail("device not set up")
            return False
        return True

    # -- user (storage) keys ----------------------------------------------------

    def create_and_load_user_key(self, user: ByteArray, key_auth: ByteArray) -> KeyData:
        if not self._require_setup():
            return KeyData()
        if user.empty:
            self._fail("user name must not be empty")
            return KeyData()
        self.flush_data()
        secret = self._rng.bytes(_KEY_SIZE)
        label = _USER_LABEL + user.data
        blob = _wrap_blob(self._srk, secret, key_auth.data, label, self._rng)
        self._user = _LoadedKey(label, secret, _auth_digest(key_auth.data))
        self._log(LOG_BASIC, f"created and loaded user key for {user.data!r}")
        return KeyData(ByteArray(hashlib.sha256(secret).digest()), ByteArray(blob))

    def load_user_key(self, kd: KeyData, user: ByteArray) -> int:
        """Load a user key; no authorisation is needed to load, only to use."""
        if not self._require_setup():
            return RC_FAILURE
        if user.empty or kd.private_data.empty:
            self._fail("user name and key data are required")
            return RC_FAILURE
        try:
            secret, auth_digest, label = _unwrap_blob(self._srk, kd.private_data.data)
        except (InvalidTag, ValueError):
            self._fail("user key blob failed to unwrap under the storage root key")
            return RC_FAILURE
        if label != _USER_LABEL + user.data:
            self._fail("user key blob does not belong to this user")
            return RC_FAILURE
        if kd.public_data.data != hashlib.sha256(secret).digest():
            self._fail("user key public data does not match the key")
            return RC_FAILURE
        self.flush_data()
        self._user = _LoadedKey(label, secret, auth_digest)
        self._log(LOG_BASIC, f"loaded user key for {user.data!r}")
        return RC_SUCCESS

    # -- relying party keys --------------------------------------------------------

    def _check_user_auth(self, user_auth: ByteArray) -> bool:
        if self._user is None:
            self._fail("no user key is loaded")
            return False
        if not hmac.compare_digest(self._user.auth_digest, _auth_digest(user_auth.data)):
            self._fail("user key authorisation failed")
            return False
        return True

    def create_and_load_rp_key(
        self, rp: ByteArray, user_auth: ByteArray, rp_key_auth: ByteArray
    ) -> RelyingPartyKey:
        if not self._require_setup():
            return RelyingPartyKey()
        if rp.empty:
            self._fail("relying party name must not be empty")
            return RelyingPartyKey()
        if not self._check_user_auth(user_auth):
            return RelyingPartyKey()
        scalar_int = 1 + int.from_bytes(self._rng.bytes(32), "big") % (cose.P256_N - 1)
        scalar = scalar_int.to_bytes(32, "big")
        x, y = _scalar_to_point(scalar)
        label = _RP_LABEL + rp.data
        blob = _wrap_blob(self._user.secret, scalar, rp_key_auth.data, label, self._rng)
        self._rp = _LoadedKey(label, scalar, _auth_digest(rp_key_auth.data))
        self._log(LOG_BASIC, f"created and loaded relying party key for {rp.data!r}")
        public_point = b"\x04" + x + y
        return RelyingPartyKey(
            KeyData(ByteArray(public_point), ByteArray(blob)),
            KeyEccPoint(ByteArray(x), ByteArray(y)),
        )

    def load_rp_key(self, kd: KeyData, rp: ByteArray, user_auth: ByteArray) -> KeyEccPoint:
        if not self._require_setup():
            return KeyEccPoint()
        if not self._check_user_auth(user_auth):
            return KeyEccPoint()
        if kd.private_data.empty:
            self._fail("relying party key data is required")
            return KeyEccPoint()
        try:
            scalar, auth_digest, label = _unwrap_blob(self._user.secret, kd.private_data.data)
        except (InvalidTag, ValueError):
            self._fail("relying party key blob failed to unwrap under the loaded user key")
            return KeyEccPoint()
        if label != _RP_LABEL + rp.data:
            self._fail("relying party key blob does not belong to this relying party")
            return KeyEccPoint()
        self._rp = _LoadedKey(label, scalar, auth_digest)
        x, y = _scalar_to_point(scalar)
        self._log(LOG_BASIC, f"loaded relying party key for {rp.data!r}")
        return KeyEccPoint(ByteArray(x), ByteArray(y))

    def sign_using_rp_key(
        self, rp: ByteArray, digest: ByteArray, rp_key_auth: ByteArray
    ) -> EcdsaSig:
        """Raw ECDSA over a caller-supplied digest; no re-hashing happens here."""
        if not self._require_setup():
            return EcdsaSig()
        if self._rp is None or self._rp.label != _RP_LABEL + rp.data:
            self._fail("no relying party key is loaded for this relying party")
            return EcdsaSig()
        if digest.size > _DIGEST_SIZE:
            self._fail("digest cannot be larger than the hash size (32 bytes)")
            return EcdsaSig()
        if not hmac.compare_digest(self._rp.auth_digest, _auth_digest(rp_key_auth.data)):
            self._fail("relying party key authorisation failed")
            return EcdsaSig()
        key = ec.derive_private_key(int.from_bytes(self._rp.secret, "big"), ec.SECP256R1())
        # shorter digests are interpreted as big-endian integers, so a
        # left zero pad preserves the signed value
        padded = digest.data.rjust(_DIGEST_SIZE, b"\x00")
        der = key.sign(
            padded,
            ec.ECDSA(Prehashed(hashes.SHA256()), deterministic_signing=self._rng.deterministic),
        )
        r, s = decode_dss_signature(der)
        self._log(LOG_FULL, f"signed digest for {rp.data!r}")
        return EcdsaSig(ByteArray(r.to_bytes(32, "big")), ByteArray(s.to_bytes(32, "big")))

    # -- housekeeping -------------------------------------------------------------

    def flush_data(self) -> int:
        """Unload both key slots and scrub their material."""
        self._user = None
        self._rp = None
        self._log(LOG_FULL, "flushed loaded keys")
        return RC_SUCCESS


# --- provider bridging the device into the crypto registry ---------------


class TpmKeyHandleError(KeyDecodeError):
    pass


class _TpmPublicKey:
    def __init__(self, x: bytes, y: bytes):
        self.x = x
        self.y = y

    def cose(self) -> dict:
        return cose.ec2_key(ALG_ES256, self.x, self.y)


class _TpmPrivateKey:
    def __init__(self, provider: "TpmBackedEs256Provider", label: bytes, blob: KeyData,
                 x: bytes, y: bytes):
        self._provider = provider
        self._label = label
        self._blob = blob
        self.public = _TpmPublicKey(x, y)

    def sign(self, data: bytes) -> bytes:
        digest = hashlib.sha256(data).digest()
        return self._provider._sign(self._label, self._blob, digest)

    def get_encoded(self) -> bytes:
        return cbor.encode(
            {
                "label": self._label,
                "pub": self._blob.public_data.data,
                "priv": self._blob.private_data.data,
                "x": self.public.x,
                "y": self.public.y,
            }
        )


class _TpmKeyPair:
    def __init__(self, private: _TpmPrivateKey):
        self.private = private
        self.public = private.public


class TpmBackedEs256Provider:
    """ES256 provider that generates, stores, and uses keys inside the device.

    The provider owns one user (storage) key, persisted as a wrapped blob
    beside the device's data so the same hierarchy is reloaded across
    restarts. Relying-party signing keys live entirely in credential
    handles: the handle is the wrapped blob plus its public point, and
    signing loads the blob back into the device.
    """

    alg = ALG_ES256

    def __init__(
        self,
        device: TpmDevice,
        data_dir: str | os.PathLike,
        *,
        user_name: str = "authenticator",
        user_auth: str = "user-auth",
        rp_key_auth: str = "rp-auth",
        rng: Rng | None = None,
    ):
        self._device = device
        self._rng = rng or Rng()
        self._user_name = ByteArray.from_text(user_name)
        self._user_auth = ByteArray.from_text(user_auth)
        self._rp_key_auth = ByteArray.from_text(rp_key_auth)
        self._user_blob_path = os.path.join(
            os.fspath(data_dir), f"user_{hashlib.sha256(user_name.encode()).hexdigest()[:12]}.blob"
        )
        self._ensure_user_key()

    def _raise_device_error(self, context: str):
        raise TpmKeyHandleError(f"{context}: {self._device.get_last_error()}")

    def _ensure_user_key(self) -> None:
        if os.path.exists(self._user_blob_path):
            with open(self._user_blob_path, "rb") as fh:
                stored = cbor.decode(fh.read())
            kd = KeyData(ByteArray(stored["pub"]), ByteArray(stored["priv"]))
            if self._device.load_user_key(kd, self._user_name) != RC_SUCCESS:
                self._raise_device_error("stored user key failed to load")
            return
        kd = self._device.create_and_load_user_key(self._user_name, self._user_auth)
        if kd.empty:
            self._raise_device_error("user key creation failed")
        with open(self._user_blob_path, "wb") as fh:
            fh.write(cbor.encode({"pub": kd.public_data.data, "priv": kd.private_data.data}))

    def create_keypair(self) -> _TpmKeyPair:
        label = self._rng.bytes(16).hex().encode("ascii")
        rpk = self._device.create_and_load_rp_key(
            ByteArray(label), self._user_auth, self._rp_key_auth
        )
        if rpk.empty:
            self._raise_device_error("relying party key creation failed")
        return _TpmKeyPair(
            _TpmPrivateKey(
                self,
                label,
                rpk.key_blob,
                rpk.key_point.x_coord.data,
                rpk.key_point.y_coord.data,
            )
        )

    def load_private(self, encoded: bytes) -> _TpmPrivateKey:
        try:
            stored = cbor.decode(encoded)
            return _TpmPrivateKey(
                self,
                stored["label"],
                KeyData(ByteArray(stored["pub"]), ByteArray(stored["priv"])),
                stored["x"],
                stored["y"],
            )
        except (cbor.CborError, KeyError, TypeError, ValueError) as exc:
            raise TpmKeyHandleError(f"not a loadable key handle: {exc}") from exc

    def _sign(self, label: bytes, blob: KeyData, digest: bytes) -> bytes:
        point = self._device.load_rp_key(blob, ByteArray(label), self._user_auth)
        if point.empty:
            self._raise_device_error("relying party key failed to load")
        sig = self._device.sign_using_rp_key(ByteArray(label), ByteArray(digest), self._rp_key_auth)
        if sig.empty:
            self._raise_device_error("signing failed")
        return encode_dss_signature(
            int.from_bytes(sig.sig_r.data, "big"), int.from_bytes(sig.sig_s.data, "big")
        )
