"""Authenticator API tests, exercised directly (no packet layer).

The platform side of the PIN protocol is implemented here with the
independent oracles only (pure-Python ECDH, stdlib HMAC, from-scratch
AES-CBC), so the authenticator's key agreement, transport encryption, and
proof checks are verified against a second implementation of the whole
chain. Signatures are verified with the pure-Python ECDSA oracle.
"""

import hashlib
import hmac as hmac_mod
import time

import pytest

import oracles
from vfido import cbor, cose
from vfido.authenticator import Authenticator, build_auth_data
from vfido.constants import CborCommand, CtapStatus
from vfido.crypto import Es256Provider, ProviderRegistry
from vfido.errors import CtapError
from vfido.messages import decode_response
from vfido.policy import AutoApprovePolicy, AutoDenyPolicy
from vfido.storage import JsonFileStore

CDH = hashlib.sha256(b"client data").digest()
RP = {"id": "example.com", "name": "Example"}
USER = {"id": b"user-1", "name": "alice", "displayName": "Alice"}
ES256 = [{"alg": -7, "type": "public-key"}]


def run(authenticator, cmd: CborCommand, params: dict | None = None):
    """Returns (status, decoded model or None)."""
    payload = bytes([cmd]) + (cbor.encode(params) if params is not None else b"")
    try:
        raw = authenticator.process_cbor(payload)
    except CtapError as exc:
        return exc.status, None
    return decode_response(cmd, raw)


def make_credential(authenticator, *, rp=RP, user=USER, options=None, exclude=None,
                    pin_auth=None, cdh=CDH, algs=ES256):
    params = {1: cdh, 2: rp, 3: user, 4: algs}
    if exclude is not None:
        params[5] = exclude
    if options is not None:
        params[7] = options
    if pin_auth is not None:
        params[8] = pin_auth
        params[9] = 1
    return run(authenticator, CborCommand.MAKE_CREDENTIAL, params)


def get_assertion(authenticator, rp_id="example.com", allow=None, options=None, pin_auth=None, cdh=CDH):
    params = {1: rp_id, 2: cdh}
    if allow is not None:
        params[3] = allow
    if options is not None:
        params[5] = options
    if pin_auth is not None:
        params[6] = pin_auth
        params[7] = 1
    return run(authenticator, CborCommand.GET_ASSERTION, params)


def parse_attested(auth_data: bytes):
    """(aaguid, credential_id, cose key) from attested credential data."""
    assert auth_data[32] & 0x40
    id_len = int.from_bytes(auth_data[53:55], "big")
    return auth_data[37:53], auth_data[55 : 55 + id_len], cbor.decode(auth_data[55 + id_len :])


def oracle_verify(cose_key: dict, signature_der: bytes, message: bytes) -> bool:
    point = (int.from_bytes(cose_key[-2], "big"), int.from_bytes(cose_key[-3], "big"))
    r, s = oracles.parse_der_signature(signature_der)
    return oracles.ecdsa_verify_message(point, message, r, s)


class TestBuildAuthData:
    def test_flag_byte_values(self):
        data = build_auth_data("example.com", 0x01 | 0x04 | 0x40, 1)
        assert data[32] == 0x45

    def test_length_without_attested_data(self):
        assert len(build_auth_data("example.com", 0x01, 5)) == 37

    def test_rp_id_hash_matches_independent_digest(self):
        data = build_auth_data("example.com", 0x01, 5)
        assert data[:32] == hashlib.sha256(b"example.com").digest()

    def test_counter_is_big_endian(self):
        data = build_auth_data("x", 0, 0x01020304)
        assert data[33:37] == b"\x01\x02\x03\x04"


class TestGetInfo:
    def test_fresh_device(self, authenticator):
        status, info = run(authenticator, CborCommand.GET_INFO)
        assert status == CtapStatus.OK
        assert info.versions == ("FIDO_2_0",)
        assert info.options == {"rk": True, "up": True, "clientPin": False}
        assert info.max_msg_size == 7609
        assert info.pin_protocols == (1,)
        assert len(info.aaguid) == 16
        assert [a.alg for a in info.algorithms] == [-7]

    def test_client_pin_option_tracks_pin_state(self, authenticator):
        PinSide(authenticator).set_pin("1234")
        _, info = run(authenticator, CborCommand.GET_INFO)
        assert info.options["clientPin"] is True


class TestMakeCredential:
    def test_self_attestation_verifies_under_oracle(self, authenticator):
        status, resp = make_credential(authenticator)
        assert status == CtapStatus.OK
        assert resp.fmt == "packed"
        assert resp.att_stmt["alg"] == -7
        _, _, key = parse_attested(resp.auth_data)
        assert oracle_verify(key, resp.att_stmt["sig"], resp.auth_data + CDH)

    def test_first_supported_algorithm_wins(self, authenticator):
        status, resp = make_credential(
            authenticator, algs=[{"alg": -8, "type": "public-key"}, {"alg": -7, "type": "public-key"}]
        )
        assert status == CtapStatus.OK
        assert resp.att_stmt["alg"] == -7

    def test_no_supported_algorithm(self, authenticator):
        status, _ = make_credential(authenticator, algs=[{"alg": -8, "type": "public-key"}])
        assert status == CtapStatus.UNSUPPORTED_ALGORITHM

    def test_presence_denied(self, store, registry):
        authenticator = Authenticator(store, registry, AutoDenyPolicy())
        status, _ = make_credential(authenticator)
        assert status == CtapStatus.OPERATION_DENIED

    def test_resident_credential_persisted_in_creation_order(self, authenticator, store):
        make_credential(authenticator, options={"rk": True})
        make_credential(authenticator, options={"rk": True}, user={"id": b"user-2", "name": "bob"})
        sources = store.get_credential_sources("example.com")
        assert [s.user.id for s in sources] == [b"user-2", b"user-1"]

    def test_non_resident_leaves_store_untouched(self, authenticator, store):
        status, resp = make_credential(authenticator, options={"rk": False})
        assert status == CtapStatus.OK
        assert store.get_credential_sources("example.com") == []
        _, cred_id, _ = parse_attested(resp.auth_data)
        assert len(cred_id) > 64  # a wrapped source, not a 16-byte handle

    def test_exclude_list_blocks_known_resident_credential(self, authenticator):
        _, resp = make_credential(authenticator, options={"rk": True})
        _, cred_id, _ = parse_attested(resp.auth_data)
        status, _ = make_credential(
            authenticator, exclude=[{"id": cred_id, "type": "public-key"}]
        )
        assert status == CtapStatus.CREDENTIAL_EXCLUDED

    def test_exclude_list_blocks_wrapped_credential(self, authenticator):
        _, resp = make_credential(authenticator, options={"rk": False})
        _, cred_id, _ = parse_attested(resp.auth_data)
        status, _ = make_credential(
            authenticator, exclude=[{"id": cred_id, "type": "public-key"}]
        )
        assert status == CtapStatus.CREDENTIAL_EXCLUDED

    def test_exclude_list_ignores_foreign_ids(self, authenticator):
        status, _ = make_credential(
            authenticator, exclude=[{"id": b"\x00" * 16, "type": "public-key"}]
        )
        assert status == CtapStatus.OK

    def test_up_and_at_flags_set(self, authenticator):
        _, resp = make_credential(authenticator)
        assert resp.auth_data[32] & 0x01
        assert resp.auth_data[32] & 0x40

    def test_aaguid_and_id_length_layout(self, store, registry):
        aaguid = bytes(range(16))
        authenticator = Authenticator(store, registry, AutoApprovePolicy(), aaguid=aaguid)
        _, resp = make_credential(authenticator, options={"rk": True})
        got_aaguid, cred_id, _ = parse_attested(resp.auth_data)
        assert got_aaguid == aaguid
        assert len(cred_id) == 16


class TestGetAssertion:
    def test_register_then_assert_verifies(self, authenticator):
        _, reg = make_credential(authenticator, options={"rk": True})
        _, _, key = parse_attested(reg.auth_data)
        status, assertion = get_assertion(authenticator)
        assert status == CtapStatus.OK
        assert oracle_verify(key, assertion.signature, assertion.auth_data + CDH)
        assert assertion.user.id == b"user-1"

    def test_unknown_rp_is_no_credentials(self, authenticator):
        status, _ = get_assertion(authenticator, rp_id="unknown.example")
        assert status == CtapStatus.NO_CREDENTIALS

    def test_non_resident_flow_via_allow_list(self, authenticator):
        _, reg = make_credential(authenticator, options={"rk": False})
        _, cred_id, key = parse_attested(reg.auth_data)
        status, assertion = get_assertion(
            authenticator, allow=[{"id": cred_id, "type": "public-key"}]
        )
        assert status == CtapStatus.OK
        assert assertion.credential.id == cred_id
        assert assertion.user is None
        assert oracle_verify(key, assertion.signature, assertion.auth_data + CDH)

    def test_allow_list_filters_resident_credentials(self, authenticator):
        _, first = make_credential(authenticator, options={"rk": True})
        make_credential(authenticator, options={"rk": True}, user={"id": b"user-2", "name": "bob"})
        _, first_id, _ = parse_attested(first.auth_data)
        status, assertion = get_assertion(
            authenticator, allow=[{"id": first_id, "type": "public-key"}]
        )
        assert status == CtapStatus.OK
        assert assertion.credential.id == first_id
        assert assertion.number_of_credentials is None

    def test_counter_strictly_increases(self, authenticator):
        make_credential(authenticator, options={"rk": True})
        counts = []
        for _ in range(5):
            _, assertion = get_assertion(authenticator)
            counts.append(int.from_bytes(assertion.auth_data[33:37], "big"))
        assert counts == sorted(counts) and len(set(counts)) == 5

    def test_up_false_skips_presence_flag(self, store, registry):
        # a denying policy cannot block a request that waives presence
        authenticator = Authenticator(store, registry, AutoApprovePolicy())
        make_credential(authenticator, options={"rk": True})
        denying = Authenticator(store, registry, AutoDenyPolicy())
        status, assertion = get_assertion(denying, options={"up": False})
        assert status == CtapStatus.OK
        assert not assertion.auth_data[32] & 0x01

    def test_presence_denied(self, store, registry):
        authenticator = Authenticator(store, registry, AutoApprovePolicy())
        make_credential(authenticator, options={"rk": True})
        denying = Authenticator(store, registry, AutoDenyPolicy())
        status, _ = get_assertion(denying)
        assert status == CtapStatus.OPERATION_DENIED


class TestGetNextAssertion:
    def _register_three(self, authenticator):
        keys = {}
        for i in range(3):
            _, resp = make_credential(
                authenticator,
                options={"rk": True},
                user={"id": f"user-{i}".encode(), "name": f"u{i}"},
            )
            _, cred_id, key = parse_attested(resp.auth_data)
            keys[f"user-{i}".encode()] = key
        return keys

    def test_newest_first_iteration(self, authenticator):
        keys = self._register_three(authenticator)
        status, first = get_assertion(authenticator)
        assert status == CtapStatus.OK
        assert first.number_of_credentials == 3
        assert first.user.id == b"user-2"  # most recent first
        _, second = run(authenticator, CborCommand.GET_NEXT_ASSERTION)
        _, third = run(authenticator, CborCommand.GET_NEXT_ASSERTION)
        assert second.user.id == b"user-1"
        assert third.user.id == b"user-0"
        assert second.number_of_credentials is None
        for model, uid in ((second, b"user-1"), (third, b"user-0")):
            assert oracle_verify(keys[uid], model.signature, model.auth_data + CDH)

    def test_without_prior_assertion(self, authenticator):
        status, _ = run(authenticator, CborCommand.GET_NEXT_ASSERTION)
        assert status == CtapStatus.NOT_ALLOWED

    def test_exhaustion(self, authenticator):
        self._register_three(authenticator)
        get_assertion(authenticator)
        run(authenticator, CborCommand.GET_NEXT_ASSERTION)
        run(authenticator, CborCommand.GET_NEXT_ASSERTION)
        status, _ = run(authenticator, CborCommand.GET_NEXT_ASSERTION)
        assert status == CtapStatus.NOT_ALLOWED

    def test_interleaved_request_invalidates_iteration(self, authenticator):
        self._register_three(authenticator)
        get_assertion(authenticator)
        run(authenticator, CborCommand.GET_INFO)
        status, _ = run(authenticator, CborCommand.GET_NEXT_ASSERTION)
        assert status == CtapStatus.NOT_ALLOWED

    def test_stale_iteration_times_out(self, store, registry):
        authenticator = Authenticator(
            store, registry, AutoApprovePolicy(), iteration_timeout=0.05
        )
        self._register_three(authenticator)
        get_assertion(authenticator)
        time.sleep(0.1)
        status, _ = run(authenticator, CborCommand.GET_NEXT_ASSERTION)
        assert status == CtapStatus.NOT_ALLOWED


class PinSide:
    """Platform side of the PIN protocol built only from the oracles."""

    def __init__(self, authenticator, scalar: int = 0x1234567890ABCDEF1234):
        self.authenticator = authenticator
        self.scalar = scalar
        point = oracles.ec_mul(scalar, oracles.G)
        self.cose_key = {
            1: 2, 3: -25, -1: 1,
            -2: point[0].to_bytes(32, "big"),
            -3: point[1].to_bytes(32, "big"),
        }

    def shared_secret(self) -> bytes:
        status, resp = run(self.authenticator, CborCommand.CLIENT_PIN, {1: 1, 2: 2})
        assert status == CtapStatus.OK
        authn_point = (
            int.from_bytes(resp.key_agreement[-2], "big"),
            int.from_bytes(resp.key_agreement[-3], "big"),
        )
        assert oracles.on_curve(authn_point)
        assert resp.key_agreement[3] == -25
        return hashlib.sha256(oracles.ecdh_shared_x(self.scalar, authn_point)).digest()

    def key_agreement_key(self) -> dict:
        _, resp = run(self.authenticator, CborCommand.CLIENT_PIN, {1: 1, 2: 2})
        return resp.key_agreement

    @staticmethod
    def _cbc_enc(key: bytes, data: bytes) -> bytes:
        return oracles.aes_cbc_encrypt(key, b"\x00" * 16, data)

    @staticmethod
    def _cbc_dec(key: bytes, data: bytes) -> bytes:
        return oracles.aes_cbc_decrypt(key, b"\x00" * 16, data)

    def get_retries(self) -> int:
        status, resp = run(self.authenticator, CborCommand.CLIENT_PIN, {1: 1, 2: 1})
        assert status == CtapStatus.OK
        return resp.retries

    def set_pin(self, pin: str):
        shared = self.shared_secret()
        new_pin_enc = self._cbc_enc(shared, pin.encode().ljust(64, b"\x00"))
        pin_auth = hmac_mod.new(shared, new_pin_enc, hashlib.sha256).digest()[:16]
        return run(
            self.authenticator,
            CborCommand.CLIENT_PIN,
            {1: 1, 2: 3, 3: self.cose_key, 4: pin_auth, 5: new_pin_enc},
        )

    def change_pin(self, old: str, new: str):
        shared = self.shared_secret()
        new_pin_enc = self._cbc_enc(shared, new.encode().ljust(64, b"\x00"))
        pin_hash_enc = self._cbc_enc(shared, hashlib.sha256(old.encode()).digest()[:16])
        pin_auth = hmac_mod.new(shared, new_pin_enc + pin_hash_enc, hashlib.sha256).digest()[:16]
        return run(
            self.authenticator,
            CborCommand.CLIENT_PIN,
            {1: 1, 2: 4, 3: self.cose_key, 4: pin_auth, 5: new_pin_enc, 6: pin_hash_enc},
        )

    def get_pin_token(self, pin: str):
        shared = self.shared_secret()
        pin_hash_enc = self._cbc_enc(shared, hashlib.sha256(pin.encode()).digest()[:16])
        status, resp = run(
            self.authenticator,
            CborCommand.CLIENT_PIN,
            {1: 1, 2: 5, 3: self.cose_key, 6: pin_hash_enc},
        )
        if status != CtapStatus.OK:
            return status, None
        return status, self._cbc_dec(shared, resp.pin_token_enc)


class TestClientPin:
    def test_fresh_device_has_eight_retries(self, authenticator):
        assert PinSide(authenticator).get_retries() == 8

    def test_set_pin_then_token_then_pin_auth_accepted(self, authenticator):
        side = PinSide(authenticator)
        status, _ = side.set_pin("1234")
        assert status == CtapStatus.OK
        status, token = side.get_pin_token("1234")
        assert status == CtapStatus.OK and len(token) == 16
        pin_auth = hmac_mod.new(token, CDH, hashlib.sha256).digest()[:16]
        status, resp = make_credential(authenticator, pin_auth=pin_auth)
        assert status == CtapStatus.OK
        assert resp.auth_data[32] & 0x04  # UV set via PIN token

    def test_pin_required_once_set(self, authenticator):
        side = PinSide(authenticator)
        side.set_pin("1234")
        status, _ = make_credential(authenticator)
        assert status == CtapStatus.PIN_AUTH_INVALID
        status, _ = make_credential(authenticator, pin_auth=b"\x00" * 16)
        assert status == CtapStatus.PIN_AUTH_INVALID

    def test_set_pin_twice_rejected(self, authenticator):
        side = PinSide(authenticator)
        side.set_pin("1234")
        status, _ = side.set_pin("5678")
        assert status == CtapStatus.PIN_AUTH_INVALID

    def test_wrong_pin_decrements_and_rotates_key_agreement(self, authenticator):
        side = PinSide(authenticator)
        side.set_pin("1234")
        ka_before = side.key_agreement_key()
        status, _ = side.get_pin_token("wrong")
        assert status == CtapStatus.PIN_INVALID
        assert side.get_retries() == 7
        ka_mid = side.key_agreement_key()
        assert ka_mid != ka_before
        status, _ = side.get_pin_token("also wrong")
        assert status == CtapStatus.PIN_INVALID
        assert side.get_retries() == 6
        assert side.key_agreement_key() != ka_mid

    def test_correct_pin_restores_retries(self, authenticator):
        side = PinSide(authenticator)
        side.set_pin("1234")
        side.get_pin_token("wrong")
        side.get_pin_token("still wrong")
        assert side.get_retries() == 6
        status, token = side.get_pin_token("1234")
        assert status == CtapStatus.OK and token is not None
        assert side.get_retries() == 8

    def test_change_pin(self, authenticator):
        side = PinSide(authenticator)
        side.set_pin("1234")
        status, _ = side.change_pin("1234", "new-pin-99")
        assert status == CtapStatus.OK
        status, _ = side.get_pin_token("1234")
        assert status == CtapStatus.PIN_INVALID
        status, token = side.get_pin_token("new-pin-99")
        assert status == CtapStatus.OK and token is not None

    def test_retries_exhaust_to_blocked(self, authenticator):
        side = PinSide(authenticator)
        side.set_pin("1234")
        last = None
        for _ in range(8):
            last, _ = side.get_pin_token("wrong")
        assert last == CtapStatus.PIN_BLOCKED
        status, _ = side.get_pin_token("1234")
        assert status == CtapStatus.PIN_BLOCKED

    def test_pin_policy_length_bounds(self, authenticator):
        side = PinSide(authenticator)
        status, _ = side.set_pin("123")
        assert status == CtapStatus.PIN_POLICY_VIOLATION
        status, _ = side.set_pin("x" * 64)
        assert status == CtapStatus.PIN_POLICY_VIOLATION
        status, _ = side.set_pin("x" * 63)
        assert status == CtapStatus.OK

    def test_token_ops_without_pin(self, authenticator):
        side = PinSide(authenticator)
        status, _ = side.get_pin_token("1234")
        assert status == CtapStatus.PIN_NOT_SET
        status, _ = side.change_pin("1234", "5678")
        assert status == CtapStatus.PIN_NOT_SET

    def test_retries_persist_across_power_cycles(self, tmp_path, registry):
        path = tmp_path / "persist.json"
        with JsonFileStore(path) as store:
            authenticator = Authenticator(store, registry, AutoApprovePolicy())
            side = PinSide(authenticator)
            side.set_pin("1234")
            side.get_pin_token("wrong")
        with JsonFileStore(path) as store:
            authenticator = Authenticator(store, registry, AutoApprovePolicy())
            assert PinSide(authenticator).get_retries() == 7


class TestReset:
    def test_reset_clears_everything(self, authenticator, store):
        side = PinSide(authenticator)
        make_credential(authenticator, options={"rk": True})
        side.set_pin("1234")
        old_wrap = store.wrap_key
        status, _ = run(authenticator, CborCommand.RESET)
        assert status == CtapStatus.OK
        assert store.wrap_key != old_wrap
        status, _ = get_assertion(authenticator)
        assert status == CtapStatus.NO_CREDENTIALS
        _, info = run(authenticator, CborCommand.GET_INFO)
        assert info.options["clientPin"] is False

    def test_reset_requires_presence(self, store, registry):
        authenticator = Authenticator(store, registry, AutoDenyPolicy())
        status, _ = run(authenticator, CborCommand.RESET)
        assert status == CtapStatus.OPERATION_DENIED

    def test_wrapped_credentials_die_with_the_wrap_key(self, authenticator):
        _, resp = make_credential(authenticator, options={"rk": False})
        _, cred_id, _ = parse_attested(resp.auth_data)
        run(authenticator, CborCommand.RESET)
        status, _ = get_assertion(authenticator, allow=[{"id": cred_id, "type": "public-key"}])
        assert status == CtapStatus.NO_CREDENTIALS

    def test_counter_restarts_from_one(self, authenticator):
        make_credential(authenticator)
        run(authenticator, CborCommand.RESET)
        _, resp = make_credential(authenticator)
        assert int.from_bytes(resp.auth_data[33:37], "big") == 1
