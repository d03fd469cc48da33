"""Persistent authenticator state with plaintext and encrypted backends.

The document is a single JSON object::

    {
      "schema": 1,
      "signature_counter": <int>,
      "wrap_key": <64 hex chars>,
      "pin": null | {"hash": <32 hex chars>, "retries": <int>},
      "credentials": {<rpId>: [<base64 credential source>, ...]}
    }

Credential lists keep creation order (append-only), which lets readers
prioritise the most recent credential by reversing. Every mutating call
writes the whole document back to disk before returning.

The encrypted backend stores ``salt(16) || envelope`` where the envelope
is ``0x80 || timestamp(8, BE seconds) || iv(16) || AES-128-CBC/PKCS7
ciphertext || HMAC-SHA-256 tag`` over all preceding envelope bytes. The
32-byte file key is derived from the password with PBKDF2-HMAC-SHA256;
its first 16 bytes sign, the last 16 encrypt.
"""

from __future__ import annotations

import base64
import hashlib
import hmac as hmac_mod
import json
import os
import struct
import threading
import time
from dataclasses import dataclass

from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .credential import CredentialSource
from .crypto import WRAP_KEY_SIZE, Rng
from .errors import VfidoError

SCHEMA_VERSION = 1
ENVELOPE_VERSION = 0x80
SALT_SIZE = 16
KDF_ITERATIONS = 600_000
# salt + version + timestamp + iv + one cipher block + tag
_MIN_ENCRYPTED_SIZE = SALT_SIZE + 1 + 8 + 16 + 16 + 32


class StorageError(VfidoError):
    pass


class StoreFormatError(StorageError):
    """The file is not a parseable store of the requested backend."""


class StoreAuthError(StorageError):
    """Authentication of an encrypted store failed (wrong password or tamper)."""


class StoreOwnershipError(StorageError):
    """A second live handle was requested for the same file."""


@dataclass(frozen=True)
class PinRecord:
    pin_hash: bytes  # first 16 bytes of SHA-256(PIN)
    retries: int


def derive_storage_key(password: str | bytes, salt: bytes, iterations: int = KDF_ITERATIONS) -> bytes:
    """Derive the 32-byte file key from a password."""
    if not password:
        raise ValueError("password must not be empty")
    if isinstance(password, str):
        password = password.encode("utf-8")
    return hashlib.pbkdf2_hmac("sha256", password, salt, iterations, dklen=32)


def seal_envelope(key: bytes, plaintext: bytes, rng: Rng, timestamp: int | None = None) -> bytes:
    if len(key) != 32:
        raise ValueError("envelope key must be 32 bytes")
    sign_key, enc_key = key[:16], key[16:]
    if timestamp is None:
        timestamp = int(time.time())
    iv = rng.bytes(16)
    padder = padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = Cipher(algorithms.AES(enc_key), modes.CBC(iv)).encryptor()
    body = bytes([ENVELOPE_VERSION]) + struct.pack(">Q", timestamp) + iv
    body += enc.update(padded) + enc.finalize()
    return body + hmac_mod.new(sign_key, body, hashlib.sha256).digest()


def open_envelope(key: bytes, blob: bytes) -> bytes:
    if len(blob) < _MIN_ENCRYPTED_SIZE - SALT_SIZE:
        raise StoreFormatError("envelope too short")
    if blob[0] != ENVELOPE_VERSION:
        raise StoreFormatError("not an encrypted store envelope")
    sign_key, enc_key = key[:16], key[16:]
    body, tag = blob[:-32], blob[-32:]
    if not hmac_mod.compare_digest(tag, hmac_mod.new(sign_key, body, hashlib.sha256).digest()):
        raise StoreAuthError("envelope authentication failed")
    iv, ciphertext = body[9:25], body[25:]
    if len(ciphertext) % 16:
        raise StoreFormatError("ciphertext is not block-aligned")
    dec = Cipher(algorithms.AES(enc_key), modes.CBC(iv)).decryptor()
    padded = dec.update(ciphertext) + dec.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError as exc:
        raise StoreFormatError("invalid padding") from exc


class JsonFileStore:
    """Plaintext JSON store; one live handle per path."""

    _open_paths: set[str] = set()
    _open_lock = threading.Lock()

    def __init__(self, path: str | os.PathLike, rng: Rng | None = None):
        self._path = os.fspath(path)
        self._rng = rng or Rng()
        self._closed = False
        key = os.path.abspath(self._path)
        with JsonFileStore._open_lock:
            if key in JsonFileStore._open_paths:
                raise StoreOwnershipError(
                    f"{self._path} already has a live handle; stores are single-owner"
                )
            JsonFileStore._open_paths.add(key)
        try:
            if os.path.exists(self._path):
                self._doc = self._parse(self._read_file())
            else:
                self._doc = self._fresh_document()
                self._save()
        except BaseException:
            self._release()
            raise

    # -- lifecycle -----------------------------------------------------

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._release()

    def _release(self) -> None:
        with JsonFileStore._open_lock:
            JsonFileStore._open_paths.discard(os.path.abspath(self._path))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- file i/o (overridden by the encrypted backend) -----------------

    def _read_file(self) -> bytes:
        with open(self._path, "rb") as fh:
            return fh.read()

    def _write_file(self, data: bytes) -> None:
        tmp = self._path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._path)

    # -- document handling ----------------------------------------------

    def _fresh_document(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "signature_counter": 0,
            "wrap_key": self._rng.bytes(WRAP_KEY_SIZE).hex(),
            "pin": None,
            "credentials": {},
        }

    def _parse(self, raw: bytes) -> dict:
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise StoreFormatError(f"not a valid store document: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("schema") != SCHEMA_VERSION:
            raise StoreFormatError("unsupported store schema")
        return doc

    def _save(self) -> None:
        if self._closed:
            raise StorageError("store handle is closed")
        self._write_file(json.dumps(self._doc, indent=1).encode("utf-8"))

    # -- operations ------------------------------------------------------

    @property
    def signature_counter(self) -> int:
        return self._doc["signature_counter"]

    def increment_counter(self) -> int:
        previous = self._doc["signature_counter"]
        self._doc["signature_counter"] = previous + 1
        try:
            self._save()
        except BaseException:
            self._doc["signature_counter"] = previous
            raise
        return previous + 1

    @property
    def wrap_key(self) -> bytes:
        return bytes.fromhex(self._doc["wrap_key"])

    def set_wrap_key(self, key: bytes) -> None:
        if len(key) != WRAP_KEY_SIZE:
            raise ValueError(f"wrap key must be {WRAP_KEY_SIZE} bytes")
        self._doc["wrap_key"] = key.hex()
        self._save()

    @property
    def pin_record(self) -> PinRecord | None:
        raw = self._doc["pin"]
        if raw is None:
            return None
        return PinRecord(bytes.fromhex(raw["hash"]), raw["retries"])

    def set_pin_record(self, record: PinRecord | None) -> None:
        if record is None:
            self._doc["pin"] = None
        else:
            self._doc["pin"] = {"hash": record.pin_hash.hex(), "retries": record.retries}
        self._save()

    def add_credential_source(self, rp_id: str, source: CredentialSource) -> None:
        encoded = base64.b64encode(source.to_bytes()).decode("ascii")
        self._doc["credentials"].setdefault(rp_id, []).append(encoded)
        self._save()

    def get_credential_sources(self, rp_id: str, allow_list=None) -> list[CredentialSource]:
        """Stored credentials for an RP, most recent first.

        ``allow_list`` is an optional iterable of credential ids to keep.
        """
        sources = [
            CredentialSource.from_bytes(base64.b64decode(item))
            for item in self._doc["credentials"].get(rp_id, [])
        ]
        if allow_list is not None:
            wanted = {bytes(i) for i in allow_list}
            sources = [s for s in sources if s.credential_id in wanted]
        return list(reversed(sources))

    def reset_document(self) -> None:
        """Forget all credentials and PIN state, rotate the wrap key, zero the counter."""
        self._doc = self._fresh_document()
        self._save()


class EncryptedJsonFileStore(JsonFileStore):
    """Password-encrypted variant; only the file codec differs."""

    def __init__(
        self,
        path: str | os.PathLike,
        password: str | bytes,
        rng: Rng | None = None,
        kdf_iterations: int = KDF_ITERATIONS,
    ):
        if not password:
            raise ValueError("encrypted store needs a non-empty password")
        self._password = password
        self._iterations = kdf_iterations
        self._salt: bytes | None = None
        self._file_key: bytes | None = None
        super().__init__(path, rng)

    def _read_file(self) -> bytes:
        with open(self._path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _MIN_ENCRYPTED_SIZE:
            raise StoreFormatError("file too short to be an encrypted store")
        if raw[SALT_SIZE] != ENVELOPE_VERSION:
            raise StoreFormatError("not an encrypted store (bad envelope version)")
        self._salt = raw[:SALT_SIZE]
        self._file_key = derive_storage_key(self._password, self._salt, self._iterations)
        return open_envelope(self._file_key, raw[SALT_SIZE:])

    def _write_file(self, data: bytes) -> None:
        if self._salt is None:
            self._salt = self._rng.bytes(SALT_SIZE)
            self._file_key = derive_storage_key(self._password, self._salt, self._iterations)
        blob = self._salt + seal_envelope(self._file_key, data, self._rng)
        super()._write_file(blob)


def open_or_init(
    path: str | os.PathLike,
    backend: str = "plaintext",
    password: str | bytes | None = None,
    rng: Rng | None = None,
    kdf_iterations: int = KDF_ITERATIONS,
) -> JsonFileStore:
    """Open a store, creating a fresh document if the file does not exist."""
    if backend == "plaintext":
        return JsonFileStore(path, rng)
    if backend == "encrypted":
        if not password:
            raise ValueError("the encrypted backend requires a password")
        return EncryptedJsonFileStore(path, password, rng, kdf_iterations)
    raise ValueError(f"unknown storage backend {backend!r}")
