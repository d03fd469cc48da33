"""CTAP2 CBOR request decoding and response encoding.

Requests arrive as one command byte followed by an optional CBOR map with
small-integer keys; responses leave as one status byte followed by a
canonical CBOR map. Decoding validates structure and required fields and
raises :class:`CtapError` with the matching status, so feeding arbitrary
bytes in yields either typed parameters or a typed error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import cbor
from .constants import CborCommand, ClientPinSubCommand, CtapStatus
from .errors import CtapError

PUBLIC_KEY_TYPE = "public-key"

# request map keys
_MC_CLIENT_DATA_HASH = 1
_MC_RP = 2
_MC_USER = 3
_MC_PUB_KEY_CRED_PARAMS = 4
_MC_EXCLUDE_LIST = 5
_MC_EXTENSIONS = 6
_MC_OPTIONS = 7
_MC_PIN_AUTH = 8
_MC_PIN_PROTOCOL = 9

_GA_RP_ID = 1
_GA_CLIENT_DATA_HASH = 2
_GA_ALLOW_LIST = 3
_GA_EXTENSIONS = 4
_GA_OPTIONS = 5
_GA_PIN_AUTH = 6
_GA_PIN_PROTOCOL = 7

_CP_PIN_PROTOCOL = 1
_CP_SUB_COMMAND = 2
_CP_KEY_AGREEMENT = 3
_CP_PIN_AUTH = 4
_CP_NEW_PIN_ENC = 5
_CP_PIN_HASH_ENC = 6

# response map keys
_MC_RESP_FMT = 1
_MC_RESP_AUTH_DATA = 2
_MC_RESP_ATT_STMT = 3

_GA_RESP_CREDENTIAL = 1
_GA_RESP_AUTH_DATA = 2
_GA_RESP_SIGNATURE = 3
_GA_RESP_USER = 4
_GA_RESP_NUMBER_OF_CREDENTIALS = 5

_GI_RESP_VERSIONS = 1
_GI_RESP_EXTENSIONS = 2
_GI_RESP_AAGUID = 3
_GI_RESP_OPTIONS = 4
_GI_RESP_MAX_MSG_SIZE = 5
_GI_RESP_PIN_PROTOCOLS = 6
_GI_RESP_ALGORITHMS = 10

_CP_RESP_KEY_AGREEMENT = 1
_CP_RESP_PIN_TOKEN = 2
_CP_RESP_RETRIES = 3


def _invalid(msg: str) -> CtapError:
    return CtapError(CtapStatus.INVALID_PARAMETER, msg)


def _missing(name: str) -> CtapError:
    return CtapError(CtapStatus.MISSING_PARAMETER, f"missing required field: {name}")


def _require(params: dict, key: int, name: str):
    if key not in params:
        raise _missing(name)
    return params[key]


def _check_bytes(value, name: str, length: int | None = None) -> bytes:
    if not isinstance(value, bytes):
        raise _invalid(f"{name} must be a byte string")
    if length is not None and len(value) != length:
        raise _invalid(f"{name} must be {length} bytes, got {len(value)}")
    return value


def _check_str(value, name: str, allow_empty: bool = True) -> str:
    if not isinstance(value, str):
        raise _invalid(f"{name} must be a text string")
    if not allow_empty and not value:
        raise _invalid(f"{name} must not be empty")
    return value


@dataclass(frozen=True)
class RpEntity:
    id: str
    name: str | None = None

    def to_cbor(self) -> dict:
        out: dict = {"id": self.id}
        if self.name is not None:
            out["name"] = self.name
        return out

    @classmethod
    def from_cbor(cls, raw) -> "RpEntity":
        if not isinstance(raw, dict):
            raise _invalid("rp entity must be a map")
        rp_id = _check_str(_require(raw, "id", "rp.id"), "rp.id", allow_empty=False)
        name = raw.get("name")
        return cls(rp_id, _check_str(name, "rp.name") if name is not None else None)


@dataclass(frozen=True)
class UserEntity:
    id: bytes
    name: str | None = None
    display_name: str | None = None

    def to_cbor(self) -> dict:
        out: dict = {"id": self.id}
        if self.name is not None:
            out["name"] = self.name
        if self.display_name is not None:
            out["displayName"] = self.display_name
        return out

    @classmethod
    def from_cbor(cls, raw) -> "UserEntity":
        if not isinstance(raw, dict):
            raise _invalid("user entity must be a map")
        uid = _check_bytes(_require(raw, "id", "user.id"), "user.id")
        if not uid:
            raise _invalid("user.id must not be empty")
        name = raw.get("name")
        display = raw.get("displayName")
        return cls(
            uid,
            _check_str(name, "user.name") if name is not None else None,
            _check_str(display, "user.displayName") if display is not None else None,
        )


@dataclass(frozen=True)
class CredentialParameter:
    type: str
    alg: int

    def to_cbor(self) -> dict:
        return {"alg": self.alg, "type": self.type}

    @classmethod
    def from_cbor(cls, raw) -> "CredentialParameter":
        if not isinstance(raw, dict):
            raise _invalid("credential parameter must be a map")
        ptype = _check_str(_require(raw, "type", "pubKeyCredParams.type"), "type")
        alg = _require(raw, "alg", "pubKeyCredParams.alg")
        if not isinstance(alg, int) or isinstance(alg, bool):
            raise _invalid("alg must be an integer")
        return cls(ptype, alg)


@dataclass(frozen=True)
class CredentialDescriptor:
    type: str
    id: bytes
    transports: tuple[str, ...] | None = None

    def to_cbor(self) -> dict:
        out: dict = {"id": self.id, "type": self.type}
        if self.transports is not None:
            out["transports"] = list(self.transports)
        return out

    @classmethod
    def from_cbor(cls, raw) -> "CredentialDescriptor":
        if not isinstance(raw, dict):
            raise _invalid("credential descriptor must be a map")
        dtype = _check_str(_require(raw, "type", "descriptor.type"), "descriptor.type")
        if dtype != PUBLIC_KEY_TYPE:
            raise _invalid(f"descriptor type must be {PUBLIC_KEY_TYPE!r}")
        did = _check_bytes(_require(raw, "id", "descriptor.id"), "descriptor.id")
        if not did:
            raise _invalid("descriptor.id must not be empty")
        transports = raw.get("transports")
        if transports is not None:
            if not isinstance(transports, list) or any(not isinstance(t, str) for t in transports):
                raise _invalid("transports must be a list of strings")
            transports = tuple(transports)
        return cls(dtype, did, transports)


def _decode_options(raw, name: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise _invalid(f"{name} must be a map")
    for key, value in raw.items():
        if not isinstance(key, str) or not isinstance(value, bool):
            raise _invalid(f"{name} entries must map strings to booleans")
    return dict(raw)


def _decode_descriptor_list(raw, name: str) -> tuple[CredentialDescriptor, ...] | None:
    if raw is None:
        return None
    if not isinstance(raw, list):
        raise _invalid(f"{name} must be an array")
    return tuple(CredentialDescriptor.from_cbor(item) for item in raw)


def _decode_pin_auth(raw) -> bytes | None:
    if raw is None:
        return None
    return _check_bytes(raw, "pinAuth", 16)


def _decode_pin_protocol(raw) -> int | None:
    if raw is None:
        return None
    if not isinstance(raw, int) or isinstance(raw, bool):
        raise _invalid("pinProtocol must be an integer")
    return raw


@dataclass(frozen=True)
class MakeCredentialParameters:
    client_data_hash: bytes
    rp: RpEntity
    user: UserEntity
    cred_params: tuple[CredentialParameter, ...]
    exclude_list: tuple[CredentialDescriptor, ...] | None = None
    options: dict = field(default_factory=dict)
    pin_auth: bytes | None = None
    pin_protocol: int | None = None

    @classmethod
    def from_cbor(cls, params: dict) -> "MakeCredentialParameters":
        cdh = _check_bytes(
            _require(params, _MC_CLIENT_DATA_HASH, "clientDataHash"), "clientDataHash", 32
        )
        rp = RpEntity.from_cbor(_require(params, _MC_RP, "rp"))
        user = UserEntity.from_cbor(_require(params, _MC_USER, "user"))
        raw_params = _require(params, _MC_PUB_KEY_CRED_PARAMS, "pubKeyCredParams")
        if not isinstance(raw_params, list) or not raw_params:
            raise _invalid("pubKeyCredParams must be a non-empty array")
        cred_params = tuple(CredentialParameter.from_cbor(item) for item in raw_params)
        return cls(
            client_data_hash=cdh,
            rp=rp,
            user=user,
            cred_params=cred_params,
            exclude_list=_decode_descriptor_list(params.get(_MC_EXCLUDE_LIST), "excludeList"),
            options=_decode_options(params.get(_MC_OPTIONS), "options"),
            pin_auth=_decode_pin_auth(params.get(_MC_PIN_AUTH)),
            pin_protocol=_decode_pin_protocol(params.get(_MC_PIN_PROTOCOL)),
        )


@dataclass(frozen=True)
class GetAssertionParameters:
    rp_id: str
    client_data_hash: bytes
    allow_list: tuple[CredentialDescriptor, ...] | None = None
    options: dict = field(default_factory=dict)
    pin_auth: bytes | None = None
    pin_protocol: int | None = None

    @classmethod
    def from_cbor(cls, params: dict) -> "GetAssertionParameters":
        rp_id = _check_str(_require(params, _GA_RP_ID, "rpId"), "rpId", allow_empty=False)
        cdh = _check_bytes(
            _require(params, _GA_CLIENT_DATA_HASH, "clientDataHash"), "clientDataHash", 32
        )
        return cls(
            rp_id=rp_id,
            client_data_hash=cdh,
            allow_list=_decode_descriptor_list(params.get(_GA_ALLOW_LIST), "allowList"),
            options=_decode_options(params.get(_GA_OPTIONS), "options"),
            pin_auth=_decode_pin_auth(params.get(_GA_PIN_AUTH)),
            pin_protocol=_decode_pin_protocol(params.get(_GA_PIN_PROTOCOL)),
        )


_PIN_SUBCOMMAND_REQUIRES = {
    ClientPinSubCommand.SET_PIN: ("key_agreement", "pin_auth", "new_pin_enc"),
    ClientPinSubCommand.CHANGE_PIN: ("key_agreement", "pin_auth", "new_pin_enc", "pin_hash_enc"),
    ClientPinSubCommand.GET_PIN_TOKEN: ("key_agreement", "pin_hash_enc"),
}

_PIN_FIELD_NAMES = {
    "key_agreement": "keyAgreement",
    "pin_auth": "pinAuth",
    "new_pin_enc": "newPinEnc",
    "pin_hash_enc": "pinHashEnc",
}


@dataclass(frozen=True)
class ClientPinParameters:
    pin_protocol: int
    sub_command: ClientPinSubCommand
    key_agreement: dict | None = None
    pin_auth: bytes | None = None
    new_pin_enc: bytes | None = None
    pin_hash_enc: bytes | None = None

    @classmethod
    def from_cbor(cls, params: dict) -> "ClientPinParameters":
        protocol = _require(params, _CP_PIN_PROTOCOL, "pinProtocol")
        if not isinstance(protocol, int) or isinstance(protocol, bool):
            raise _invalid("pinProtocol must be an integer")
        sub = _require(params, _CP_SUB_COMMAND, "subCommand")
        try:
            sub = ClientPinSubCommand(sub)
        except ValueError:
            raise _invalid(f"unknown clientPIN subcommand {sub!r}") from None
        key_agreement = params.get(_CP_KEY_AGREEMENT)
        if key_agreement is not None and not isinstance(key_agreement, dict):
            raise _invalid("keyAgreement must be a COSE key map")
        new_pin_enc = params.get(_CP_NEW_PIN_ENC)
        if new_pin_enc is not None:
            new_pin_enc = _check_bytes(new_pin_enc, "newPinEnc")
        pin_hash_enc = params.get(_CP_PIN_HASH_ENC)
        if pin_hash_enc is not None:
            pin_hash_enc = _check_bytes(pin_hash_enc, "pinHashEnc", 16)
        decoded = cls(
            pin_protocol=protocol,
            sub_command=sub,
            key_agreement=key_agreement,
            pin_auth=_decode_pin_auth(params.get(_CP_PIN_AUTH)),
            new_pin_enc=new_pin_enc,
            pin_hash_enc=pin_hash_enc,
        )
        for attr in _PIN_SUBCOMMAND_REQUIRES.get(sub, ()):
            if getattr(decoded, attr) is None:
                raise _missing(_PIN_FIELD_NAMES[attr])
        return decoded


_PARAMETER_DECODERS = {
    CborCommand.MAKE_CREDENTIAL: MakeCredentialParameters.from_cbor,
    CborCommand.GET_ASSERTION: GetAssertionParameters.from_cbor,
    CborCommand.CLIENT_PIN: ClientPinParameters.from_cbor,
}

_PARAMETERLESS = (CborCommand.GET_INFO, CborCommand.RESET, CborCommand.GET_NEXT_ASSERTION)


def decode_request(payload: bytes):
    """Decode a CBOR request payload into (command, typed parameters or None)."""
    if not payload:
        raise CtapError(CtapStatus.INVALID_COMMAND, "empty CBOR request")
    try:
        command = CborCommand(payload[0])
    except ValueError:
        raise CtapError(CtapStatus.INVALID_COMMAND, f"unknown command 0x{payload[0]:02x}") from None
    body = payload[1:]
    if command in _PARAMETERLESS:
        # a parameter map is tolerated but ignored, as long as it is valid CBOR
        if body:
            _decode_map(body)
        return command, None
    params = _decode_map(body)
    return command, _PARAMETER_DECODERS[command](params)


def _decode_map(body: bytes) -> dict:
    if not body:
        raise CtapError(CtapStatus.INVALID_CBOR, "missing parameter map")
    try:
        decoded = cbor.decode(body)
    except cbor.CborError as exc:
        raise CtapError(CtapStatus.INVALID_CBOR, str(exc)) from exc
    if not isinstance(decoded, dict):
        raise CtapError(CtapStatus.INVALID_CBOR, "request parameters must be a map")
    return decoded


# --- response models -------------------------------------------------


@dataclass(frozen=True)
class MakeCredentialResponse:
    fmt: str
    auth_data: bytes
    att_stmt: dict

    def to_cbor(self) -> dict:
        return {
            _MC_RESP_FMT: self.fmt,
            _MC_RESP_AUTH_DATA: self.auth_data,
            _MC_RESP_ATT_STMT: self.att_stmt,
        }

    @classmethod
    def from_cbor(cls, raw: dict) -> "MakeCredentialResponse":
        return cls(raw[_MC_RESP_FMT], raw[_MC_RESP_AUTH_DATA], raw[_MC_RESP_ATT_STMT])


@dataclass(frozen=True)
class GetAssertionResponse:
    credential: CredentialDescriptor
    auth_data: bytes
    signature: bytes
    user: UserEntity | None = None
    number_of_credentials: int | None = None

    def to_cbor(self) -> dict:
        out: dict = {
            _GA_RESP_CREDENTIAL: self.credential.to_cbor(),
            _GA_RESP_AUTH_DATA: self.auth_data,
            _GA_RESP_SIGNATURE: self.signature,
        }
        if self.user is not None:
            out[_GA_RESP_USER] = self.user.to_cbor()
        if self.number_of_credentials is not None:
            out[_GA_RESP_NUMBER_OF_CREDENTIALS] = self.number_of_credentials
        return out

    @classmethod
    def from_cbor(cls, raw: dict) -> "GetAssertionResponse":
        user = raw.get(_GA_RESP_USER)
        return cls(
            credential=CredentialDescriptor.from_cbor(raw[_GA_RESP_CREDENTIAL]),
            auth_data=raw[_GA_RESP_AUTH_DATA],
            signature=raw[_GA_RESP_SIGNATURE],
            user=UserEntity.from_cbor(user) if user is not None else None,
            number_of_credentials=raw.get(_GA_RESP_NUMBER_OF_CREDENTIALS),
        )


@dataclass(frozen=True)
class GetInfoResponse:
    versions: tuple[str, ...]
    aaguid: bytes
    options: dict
    max_msg_size: int
    pin_protocols: tuple[int, ...]
    algorithms: tuple[CredentialParameter, ...]

    def __post_init__(self):
        if len(self.aaguid) != 16:
            raise ValueError("aaguid must be exactly 16 bytes")
        if "FIDO_2_0" not in self.versions:
            raise ValueError("versions must include FIDO_2_0")

    def to_cbor(self) -> dict:
        return {
            _GI_RESP_VERSIONS: list(self.versions),
            _GI_RESP_AAGUID: self.aaguid,
            _GI_RESP_OPTIONS: dict(self.options),
            _GI_RESP_MAX_MSG_SIZE: self.max_msg_size,
            _GI_RESP_PIN_PROTOCOLS: list(self.pin_protocols),
            _GI_RESP_ALGORITHMS: [p.to_cbor() for p in self.algorithms],
        }

    @classmethod
    def from_cbor(cls, raw: dict) -> "GetInfoResponse":
        return cls(
            versions=tuple(raw[_GI_RESP_VERSIONS]),
            aaguid=raw[_GI_RESP_AAGUID],
            options=dict(raw[_GI_RESP_OPTIONS]),
            max_msg_size=raw[_GI_RESP_MAX_MSG_SIZE],
            pin_protocols=tuple(raw[_GI_RESP_PIN_PROTOCOLS]),
            algorithms=tuple(CredentialParameter.from_cbor(p) for p in raw.get(_GI_RESP_ALGORITHMS, [])),
        )


@dataclass(frozen=True)
class ClientPinResponse:
    key_agreement: dict | None = None
    pin_token_enc: bytes | None = None
    retries: int | None = None

    def to_cbor(self) -> dict:
        out: dict = {}
        if self.key_agreement is not None:
            out[_CP_RESP_KEY_AGREEMENT] = self.key_agreement
        if self.pin_token_enc is not None:
            out[_CP_RESP_PIN_TOKEN] = self.pin_token_enc
        if self.retries is not None:
            out[_CP_RESP_RETRIES] = self.retries
        return out

    @classmethod
    def from_cbor(cls, raw: dict) -> "ClientPinResponse":
        return cls(
            key_agreement=raw.get(_CP_RESP_KEY_AGREEMENT),
            pin_token_enc=raw.get(_CP_RESP_PIN_TOKEN),
            retries=raw.get(_CP_RESP_RETRIES),
        )


@dataclass(frozen=True)
class ResetResponse:
    """Reset succeeds with a bare status byte and no body."""

    def to_cbor(self) -> dict | None:
        return None

    @classmethod
    def from_cbor(cls, raw) -> "ResetResponse":
        return cls()


def encode_response(status: int, model=None) -> bytes:
    """Encode a response as status byte plus canonical CBOR body."""
    prefix = bytes([status])
    if model is None:
        return prefix
    body = model.to_cbor()
    if body is None:
        return prefix
    return prefix + cbor.encode(body)


_RESPONSE_DECODERS = {
    CborCommand.MAKE_CREDENTIAL: MakeCredentialResponse.from_cbor,
    CborCommand.GET_ASSERTION: GetAssertionResponse.from_cbor,
    CborCommand.GET_NEXT_ASSERTION: GetAssertionResponse.from_cbor,
    CborCommand.GET_INFO: GetInfoResponse.from_cbor,
    CborCommand.CLIENT_PIN: ClientPinResponse.from_cbor,
    CborCommand.RESET: ResetResponse.from_cbor,
}


def decode_response(command: CborCommand, payload: bytes):
    """Decode a response payload into (status, model or None).

    Used by the bundled client; only successful responses carry a model.
    """
    if not payload:
        raise CtapError(CtapStatus.OTHER, "empty response payload")
    status = payload[0]
    if status != CtapStatus.OK:
        return status, None
    body = payload[1:]
    if not body:
        return status, ResetResponse() if command == CborCommand.RESET else None
    return status, _RESPONSE_DECODERS[command](cbor.decode(body))
