"""Credential source records and their byte serialization.

A credential source carries everything needed to sign for one relying
party: the provider-encoded private key handle, the COSE algorithm that
owns it, and the RP/user entities. Resident sources are persisted in
storage; non-resident ones are serialized, wrapped, and handed to the
relying party as the credential id.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import cbor
from .errors import CredentialDecodeError
from .messages import PUBLIC_KEY_TYPE, UserEntity

_FIELDS = ("typ", "id", "kh", "alg", "rp", "rpn", "uid", "un", "udn", "ord")


@dataclass(frozen=True)
class CredentialSource:
    credential_id: bytes
    key_handle: bytes
    alg: int
    rp_id: str
    rp_name: str | None
    user: UserEntity
    created: int
    type: str = PUBLIC_KEY_TYPE

    def to_bytes(self) -> bytes:
        return cbor.encode(
            {
                "typ": self.type,
                "id": self.credential_id,
                "kh": self.key_handle,
                "alg": self.alg,
                "rp": self.rp_id,
                "rpn": self.rp_name,
                "uid": self.user.id,
                "un": self.user.name,
                "udn": self.user.display_name,
                "ord": self.created,
            }
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CredentialSource":
        try:
            decoded = cbor.decode(raw)
        except cbor.CborError as exc:
            raise CredentialDecodeError(str(exc)) from exc
        if not isinstance(decoded, dict) or set(decoded) != set(_FIELDS):
            raise CredentialDecodeError("unexpected credential source fields")
        try:
            return cls(
                credential_id=decoded["id"],
                key_handle=decoded["kh"],
                alg=decoded["alg"],
                rp_id=decoded["rp"],
                rp_name=decoded["rpn"],
                user=UserEntity(decoded["uid"], decoded["un"], decoded["udn"]),
                created=decoded["ord"],
                type=decoded["typ"],
            )
        except (KeyError, TypeError) as exc:
            raise CredentialDecodeError(str(exc)) from exc

    def with_credential_id(self, credential_id: bytes) -> "CredentialSource":
        return replace(self, credential_id=credential_id)
