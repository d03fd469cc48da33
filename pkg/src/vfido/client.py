"""Conformance client: drives an authenticator end to end over a transport.

``HidClient`` speaks the packet protocol (INIT, PING, CBOR, CANCEL) and
transparently collects keep-alives; ``ConformanceClient`` layers the
authenticator API on top, verifying every attestation and assertion it
receives (signature, rpIdHash, flags, and a strictly increasing counter)
and keeping client-side records of registered credentials.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import cbor, cose
from .constants import (
    BROADCAST_CID,
    FLAG_AT,
    FLAG_UP,
    CborCommand,
    ClientPinSubCommand,
    CtapStatus,
    HidCommand,
)
from .crypto import Es256Provider, Rng
from .errors import VfidoError
from .hid import AssembledMessage, MessageAssembler, fragment, parse_packet
from .messages import (
    PUBLIC_KEY_TYPE,
    GetAssertionResponse,
    GetInfoResponse,
    MakeCredentialResponse,
    decode_response,
)

_ZERO_IV = b"\x00" * 16


class ClientError(VfidoError):
    pass


class ClientHidError(ClientError):
    """The authenticator answered with a CTAPHID ERROR message."""

    def __init__(self, code: int):
        self.code = code
        super().__init__(f"CTAPHID error 0x{code:02x}")


class ClientCtapError(ClientError):
    """The authenticator answered a CBOR request with a failure status."""

    def __init__(self, status: int):
        self.status = status
        try:
            name = CtapStatus(status).name
        except ValueError:
            name = "UNKNOWN"
        super().__init__(f"CTAP2 error 0x{status:02x} ({name})")


class VerificationError(ClientError):
    """A response failed the client's local cryptographic checks."""


@dataclass
class DeviceInfo:
    cid: int
    protocol_version: int
    device_version: tuple[int, int, int]
    capabilities: int


@dataclass
class AuthData:
    rp_id_hash: bytes
    flags: int
    sign_count: int
    aaguid: bytes | None = None
    credential_id: bytes | None = None
    public_key: dict | None = None


def parse_auth_data(raw: bytes) -> AuthData:
    if len(raw) < 37:
        raise VerificationError("authenticator data shorter than 37 bytes")
    parsed = AuthData(raw[:32], raw[32], int.from_bytes(raw[33:37], "big"))
    if parsed.flags & FLAG_AT:
        if len(raw) < 55:
            raise VerificationError("attested credential data truncated")
        parsed.aaguid = raw[37:53]
        id_len = int.from_bytes(raw[53:55], "big")
        parsed.credential_id = raw[55 : 55 + id_len]
        if len(parsed.credential_id) != id_len:
            raise VerificationError("credential id truncated")
        parsed.public_key = cbor.decode(raw[55 + id_len :])
    elif len(raw) != 37:
        raise VerificationError("trailing bytes without the AT flag")
    return parsed


class HidClient:
    """Packet-level client bound to one channel of one authenticator."""

    def __init__(self, end, timeout: float = 10.0, rng: Rng | None = None):
        self._end = end
        self._timeout = timeout
        self._rng = rng or Rng()
        self.cid: int | None = None
        self.keepalives: list[int] = []

    def close(self) -> None:
        self._end.close()

    def init(self, nonce: bytes | None = None) -> DeviceInfo:
        """Open a channel via the broadcast CID, or re-init the current one."""
        nonce = nonce if nonce is not None else self._rng.bytes(8)
        request_cid = self.cid if self.cid is not None else BROADCAST_CID
        response = self._transact(HidCommand.INIT, nonce, cid=request_cid)
        if len(response.payload) != 17:
            raise ClientError(f"INIT response has {len(response.payload)} bytes, expected 17")
        if response.payload[:8] != nonce:
            raise VerificationError("INIT response nonce mismatch")
        self.cid = int.from_bytes(response.payload[8:12], "big")
        return DeviceInfo(
            cid=self.cid,
            protocol_version=response.payload[12],
            device_version=tuple(response.payload[13:16]),
            capabilities=response.payload[16],
        )

    def ping(self, payload: bytes = b"") -> bytes:
        return self._transact(HidCommand.PING, payload).payload

    def wink(self) -> None:
        self._transact(HidCommand.WINK, b"")

    def msg(self, payload: bytes = b"") -> AssembledMessage:
        return self._transact(HidCommand.MSG, payload)

    def cancel(self) -> None:
        """Fire-and-forget cancel for the current channel."""
        self._require_channel()
        for packet in fragment(self.cid, HidCommand.CANCEL, b""):
            self._end.write(packet.serialize())

    def send_raw(self, cmd: int, payload: bytes, cid: int | None = None) -> None:
        for packet in fragment(cid if cid is not None else self.cid, cmd, payload):
            self._end.write(packet.serialize())

    def read_message(self, cid: int | None = None) -> AssembledMessage:
        """Read one complete non-keepalive message for a channel."""
        wanted = cid if cid is not None else self.cid
        assembler = MessageAssembler(wanted)
        while True:
            packet = parse_packet(self._end.read(self._timeout))
            if packet.cid != wanted:
                continue  # bus traffic for another channel
            result = assembler.feed(packet)
            if result.message is None:
                continue
            message = result.message
            if message.cmd == HidCommand.KEEPALIVE:
                self.keepalives.append(message.payload[0])
                continue
            if message.cmd == HidCommand.ERROR:
                raise ClientHidError(message.payload[0])
            return message

    def _require_channel(self) -> None:
        if self.cid is None:
            raise ClientError("channel not initialized; call init() first")

    def _transact(self, cmd: HidCommand, payload: bytes, cid: int | None = None) -> AssembledMessage:
        if cid is None:
            self._require_channel()
            cid = self.cid
        self.send_raw(cmd, payload, cid)
        message = self.read_message(cid)
        if message.cmd != cmd:
            raise ClientError(f"expected response cmd 0x{cmd:02x}, got 0x{message.cmd:02x}")
        return message

    def cbor(self, command: CborCommand, params: dict | None = None):
        """Send a CBOR request; returns the decoded success model."""
        payload = bytes([command]) + (cbor.encode(params) if params is not None else b"")
        response = self._transact(HidCommand.CBOR, payload)
        status, model = decode_response(command, response.payload)
        if status != CtapStatus.OK:
            raise ClientCtapError(status)
        return model


@dataclass
class CredentialRecord:
    rp_id: str
    credential_id: bytes
    public_key: dict
    sign_count: int
    user_id: bytes
    user_name: str | None = None


@dataclass
class AssertionReport:
    credential_id: bytes
    sign_count: int
    flags: int
    user_id: bytes | None = None


def _verify_es256(public_key_cose: dict, signature: bytes, data: bytes) -> bool:
    x, y = cose.decode_ec2(public_key_cose)
    key = ec.EllipticCurvePublicNumbers(
        int.from_bytes(x, "big"), int.from_bytes(y, "big"), ec.SECP256R1()
    ).public_key()
    try:
        key.verify(signature, data, ec.ECDSA(hashes.SHA256()))
        return True
    except InvalidSignature:
        return False


class ConformanceClient:
    """Scriptable relying-party-plus-platform stand-in."""

    def __init__(self, hid: HidClient, state_path: str | None = None, rng: Rng | None = None):
        self.hid = hid
        self._rng = rng or Rng()
        self._state_path = state_path
        self.records: list[CredentialRecord] = []
        if state_path and os.path.exists(state_path):
            self._load_state()

    # -- state persistence --------------------------------------------------

    def _load_state(self) -> None:
        with open(self._state_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        self.records = [
            CredentialRecord(
                rp_id=item["rp_id"],
                credential_id=bytes.fromhex(item["credential_id"]),
                public_key=cbor.decode(bytes.fromhex(item["public_key"])),
                sign_count=item["sign_count"],
                user_id=bytes.fromhex(item["user_id"]),
                user_name=item.get("user_name"),
            )
            for item in raw
        ]

    def _save_state(self) -> None:
        if not self._state_path:
            return
        raw = [
            {
                "rp_id": r.rp_id,
                "credential_id": r.credential_id.hex(),
                "public_key": cbor.encode(r.public_key).hex(),
                "sign_count": r.sign_count,
                "user_id": r.user_id.hex(),
                "user_name": r.user_name,
            }
            for r in self.records
        ]
        with open(self._state_path, "w", encoding="utf-8") as fh:
            json.dump(raw, fh, indent=1)

    # -- info -----------------------------------------------------------------

    def get_info(self) -> GetInfoResponse:
        return self.hid.cbor(CborCommand.GET_INFO)

    # -- registration ------------------------------------------------------------

    def register(
        self,
        rp_id: str,
        user_name: str,
        *,
        rp_name: str | None = None,
        user_id: bytes | None = None,
        resident: bool | None = None,
        pin: str | None = None,
        exclude_ids: list[bytes] | None = None,
        algs: tuple[int, ...] = (-7,),
        client_data_hash: bytes | None = None,
    ) -> CredentialRecord:
        cdh = client_data_hash if client_data_hash is not None else self._rng.bytes(32)
        user_id = user_id if user_id is not None else self._rng.bytes(16)
        params: dict = {
            1: cdh,
            2: {"id": rp_id, **({"name": rp_name} if rp_name else {})},
            3: {"id": user_id, "name": user_name},
            4: [{"alg": alg, "type": PUBLIC_KEY_TYPE} for alg in algs],
        }
        if exclude_ids:
            params[5] = [{"id": i, "type": PUBLIC_KEY_TYPE} for i in exclude_ids]
        if resident is not None:
            params[7] = {"rk": resident}
        if pin is not None:
            token = self.get_pin_token(pin)
            params[8] = hmac.new(token, cdh, hashlib.sha256).digest()[:16]
            params[9] = 1
        model: MakeCredentialResponse = self.hid.cbor(CborCommand.MAKE_CREDENTIAL, params)
        record = self._verify_attestation(model, rp_id, cdh, user_id, user_name)
        self.records.append(record)
        self._save_state()
        return record

    def _verify_attestation(
        self, model: MakeCredentialResponse, rp_id: str, cdh: bytes, user_id: bytes, user_name: str
    ) -> CredentialRecord:
        if model.fmt != "packed":
            raise VerificationError(f"unexpected attestation format {model.fmt!r}")
        parsed = parse_auth_data(model.auth_data)
        if parsed.rp_id_hash != hashlib.sha256(rp_id.encode()).digest():
            raise VerificationError("rpIdHash mismatch")
        if not parsed.flags & FLAG_UP or parsed.public_key is None:
            raise VerificationError("missing UP flag or attested credential data")
        if model.att_stmt.get("alg") != parsed.public_key.get(cose.ALG):
            raise VerificationError("attestation alg disagrees with the credential key")
        if not _verify_es256(parsed.public_key, model.att_stmt["sig"], model.auth_data + cdh):
            raise VerificationError("self-attestation signature failed to verify")
        return CredentialRecord(
            rp_id=rp_id,
            credential_id=parsed.credential_id,
            public_key=parsed.public_key,
            sign_count=parsed.sign_count,
            user_id=user_id,
            user_name=user_name,
        )

    # -- assertions ------------------------------------------------------------------

    def assert_credential(
        self,
        rp_id: str,
        *,
        allow_ids: list[bytes] | None = None,
        pin: str | None = None,
        iterate: bool = True,
        client_data_hash: bytes | None = None,
    ) -> list[AssertionReport]:
        """Run getAssertion (plus iteration) and verify every signature."""
        cdh = client_data_hash if client_data_hash is not None else self._rng.bytes(32)
        params: dict = {1: rp_id, 2: cdh}
        if allow_ids is not None:
            params[3] = [{"id": i, "type": PUBLIC_KEY_TYPE} for i in allow_ids]
        if pin is not None:
            token = self.get_pin_token(pin)
            params[6] = hmac.new(token, cdh, hashlib.sha256).digest()[:16]
            params[7] = 1
        first: GetAssertionResponse = self.hid.cbor(CborCommand.GET_ASSERTION, params)
        reports = [self._verify_assertion(first, rp_id, cdh)]
        total = first.number_of_credentials or 1
        if iterate:
            for _ in range(total - 1):
                nxt = self.hid.cbor(CborCommand.GET_NEXT_ASSERTION)
                reports.append(self._verify_assertion(nxt, rp_id, cdh))
        return reports

    def _verify_assertion(self, model: GetAssertionResponse, rp_id: str, cdh: bytes) -> AssertionReport:
        parsed = parse_auth_data(model.auth_data)
        if parsed.rp_id_hash != hashlib.sha256(rp_id.encode()).digest():
            raise VerificationError("rpIdHash mismatch in assertion")
        record = next(
            (r for r in self.records if r.credential_id == model.credential.id), None
        )
        if record is None:
            raise VerificationError("assertion for a credential this client never registered")
        if not _verify_es256(record.public_key, model.signature, model.auth_data + cdh):
            raise VerificationError("assertion signature failed to verify")
        if parsed.sign_count <= record.sign_count:
            raise VerificationError(
                f"signature counter did not increase ({record.sign_count} -> {parsed.sign_count})"
            )
        record.sign_count = parsed.sign_count
        self._save_state()
        return AssertionReport(
            credential_id=model.credential.id,
            sign_count=parsed.sign_count,
            flags=parsed.flags,
            user_id=model.user.id if model.user else None,
        )

    # -- client PIN (platform side) ---------------------------------------------------

    def _pin_handshake(self) -> tuple[bytes, dict]:
        """ECDH with the authenticator; returns (shared secret, platform COSE key)."""
        response = self.hid.cbor(
            CborCommand.CLIENT_PIN,
            {1: 1, 2: int(ClientPinSubCommand.GET_KEY_AGREEMENT)},
        )
        authenticator_key = response.key_agreement
        platform = Es256Provider(self._rng).create_keypair()
        shared = hashlib.sha256(platform.private.ecdh(authenticator_key)).digest()
        public = platform.public
        platform_cose = cose.ec2_key(-25, public.x, public.y)
        return shared, platform_cose

    @staticmethod
    def _cbc(key: bytes, data: bytes, *, decrypt: bool = False) -> bytes:
        cipher = Cipher(algorithms.AES(key), modes.CBC(_ZERO_IV))
        op = cipher.decryptor() if decrypt else cipher.encryptor()
        return op.update(data) + op.finalize()

    @staticmethod
    def _pad_pin(pin: str) -> bytes:
        raw = pin.encode("utf-8")
        if len(raw) >= 64:
            raise ClientError("PIN too long")
        return raw.ljust(64, b"\x00")

    def get_retries(self) -> int:
        response = self.hid.cbor(
            CborCommand.CLIENT_PIN, {1: 1, 2: int(ClientPinSubCommand.GET_RETRIES)}
        )
        return response.retries

    def set_pin(self, pin: str) -> None:
        shared, platform_cose = self._pin_handshake()
        new_pin_enc = self._cbc(shared, self._pad_pin(pin))
        pin_auth = hmac.new(shared, new_pin_enc, hashlib.sha256).digest()[:16]
        self.hid.cbor(
            CborCommand.CLIENT_PIN,
            {1: 1, 2: int(ClientPinSubCommand.SET_PIN), 3: platform_cose, 4: pin_auth, 5: new_pin_enc},
        )

    def change_pin(self, old_pin: str, new_pin: str) -> None:
        shared, platform_cose = self._pin_handshake()
        new_pin_enc = self._cbc(shared, self._pad_pin(new_pin))
        pin_hash_enc = self._cbc(shared, hashlib.sha256(old_pin.encode()).digest()[:16])
        pin_auth = hmac.new(shared, new_pin_enc + pin_hash_enc, hashlib.sha256).digest()[:16]
        self.hid.cbor(
            CborCommand.CLIENT_PIN,
            {
                1: 1,
                2: int(ClientPinSubCommand.CHANGE_PIN),
                3: platform_cose,
                4: pin_auth,
                5: new_pin_enc,
                6: pin_hash_enc,
            },
        )

    def get_pin_token(self, pin: str) -> bytes:
        shared, platform_cose = self._pin_handshake()
        pin_hash_enc = self._cbc(shared, hashlib.sha256(pin.encode()).digest()[:16])
        response = self.hid.cbor(
            CborCommand.CLIENT_PIN,
            {1: 1, 2: int(ClientPinSubCommand.GET_PIN_TOKEN), 3: platform_cose, 6: pin_hash_enc},
        )
        return self._cbc(shared, response.pin_token_enc, decrypt=True)

    # -- reset --------------------------------------------------------------------------

    def reset(self) -> None:
        self.hid.cbor(CborCommand.RESET)
        self.records = []
        self._save_state()
