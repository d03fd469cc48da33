"""TPM simulator contract tests: the nine calls, hierarchy rules, and the
provider built on the device."""

import hashlib
import os
import stat

import pytest

import oracles
from vfido.crypto import ProviderRegistry
from vfido.tpm import (
    ByteArray,
    KeyData,
    RC_SUCCESS,
    TpmBackedEs256Provider,
    TpmDevice,
    TpmKeyHandleError,
)

USER = ByteArray.from_text("alice")
USER_AUTH = ByteArray.from_text("user-password")
RP = ByteArray.from_text("rp.example")
RP_AUTH = ByteArray.from_text("rp-password")
DIGEST = hashlib.sha256(b"challenge").digest()


@pytest.fixture
def device(tmp_path):
    dev = TpmDevice()
    assert dev.setup(tmp_path / "tpm") == RC_SUCCESS
    return dev


def point_of(key_point) -> tuple[int, int]:
    return (
        int.from_bytes(key_point.x_coord.data, "big"),
        int.from_bytes(key_point.y_coord.data, "big"),
    )


class TestByteArray:
    def test_size_tracks_data(self):
        assert ByteArray(b"abc").size == 3
        assert ByteArray().size == 0 and ByteArray().empty

    def test_sixteen_bit_bound(self):
        ByteArray(b"\x00" * 0xFFFF)
        with pytest.raises(ValueError):
            ByteArray(b"\x00" * 0x10000)


class TestSetup:
    def test_fresh_dir_creates_srk_file(self, tmp_path):
        dev = TpmDevice()
        assert dev.setup(tmp_path / "tpm") == RC_SUCCESS
        assert (tmp_path / "tpm" / "srk.bin").exists()

    def test_second_setup_reuses_srk(self, tmp_path):
        first = TpmDevice()
        first.setup(tmp_path / "tpm")
        kd = first.create_and_load_user_key(USER, USER_AUTH)
        second = TpmDevice()
        assert second.setup(tmp_path / "tpm") == RC_SUCCESS
        assert second.load_user_key(kd, USER) == RC_SUCCESS

    def test_unusable_dir_fails_with_error(self, tmp_path):
        # a regular file where the data dir should be
        blocked = tmp_path / "not-a-dir"
        blocked.write_text("occupied")
        dev = TpmDevice()
        assert dev.setup(blocked) != RC_SUCCESS
        assert dev.get_last_error() != ""

    def test_readonly_dir_fails_with_error(self, tmp_path):
        if os.geteuid() == 0:
            pytest.skip("permission bits do not bind root")
        locked = tmp_path / "locked"
        locked.mkdir()
        os.chmod(locked, stat.S_IRUSR | stat.S_IXUSR)
        try:
            dev = TpmDevice()
            assert dev.setup(locked) != RC_SUCCESS
            assert dev.get_last_error() != ""
        finally:
            os.chmod(locked, stat.S_IRWXU)

    def test_calls_before_setup_fail_closed(self):
        dev = TpmDevice()
        assert dev.create_and_load_user_key(USER, USER_AUTH).empty
        assert dev.get_last_error() != ""
        assert dev.load_rp_key(KeyData(), RP, USER_AUTH).empty
        assert dev.sign_using_rp_key(RP, ByteArray(DIGEST), RP_AUTH).empty

    def test_creates_tpm_log_file(self, tmp_path):
        dev = TpmDevice()
        dev.setup(tmp_path / "tpm")
        logs = [p for p in (tmp_path / "tpm").iterdir() if p.name.startswith("tpm_log_")]
        assert len(logs) == 1


class TestUserKeys:
    def test_create_returns_blob_and_commitment(self, device):
        kd = device.create_and_load_user_key(USER, USER_AUTH)
        assert not kd.empty
        assert kd.public_data.size == 32
        assert kd.private_data.size > 64

    def test_empty_user_name_rejected(self, device):
        assert device.create_and_load_user_key(ByteArray(), USER_AUTH).empty
        assert "empty" in device.get_last_error()

    def test_blob_reloads_for_same_user(self, device):
        kd = device.create_and_load_user_key(USER, USER_AUTH)
        device.flush_data()
        assert device.load_user_key(kd, USER) == RC_SUCCESS

    def test_blob_refuses_wrong_user_label(self, device):
        kd = device.create_and_load_user_key(USER, USER_AUTH)
        assert device.load_user_key(kd, ByteArray.from_text("mallory")) != RC_SUCCESS
        assert "belong" in device.get_last_error()

    def test_bit_flipped_blob_rejected(self, device):
        kd = device.create_and_load_user_key(USER, USER_AUTH)
        raw = bytearray(kd.private_data.data)
        raw[20] ^= 0x01
        bad = KeyData(kd.public_data, ByteArray(bytes(raw)))
        assert device.load_user_key(bad, USER) != RC_SUCCESS
        assert "unwrap" in device.get_last_error()

    def test_blob_from_another_device_rejected(self, device, tmp_path):
        other = TpmDevice()
        other.setup(tmp_path / "other-tpm")
        kd = other.create_and_load_user_key(USER, USER_AUTH)
        assert device.load_user_key(kd, USER) != RC_SUCCESS

    def test_creating_second_user_flushes_rp_slot(self, device):
        device.create_and_load_user_key(USER, USER_AUTH)
        device.create_and_load_rp_key(RP, USER_AUTH, RP_AUTH)
        device.create_and_load_user_key(ByteArray.from_text("bob"), USER_AUTH)
        sig = device.sign_using_rp_key(RP, ByteArray(DIGEST), RP_AUTH)
        assert sig.empty
        assert device.get_last_error() != ""

    def test_private_blobs_look_random(self, device):
        blobs = {
            device.create_and_load_user_key(USER, USER_AUTH).private_data.data
            for _ in range(20)
        }
        assert len(blobs) == 20
        joined = b"".join(blobs)
        assert len(set(joined)) > 200  # byte histogram spread, not structured text


class TestRpKeys:
    def test_created_point_is_on_the_curve(self, device):
        device.create_and_load_user_key(USER, USER_AUTH)
        rpk = device.create_and_load_rp_key(RP, USER_AUTH, RP_AUTH)
        assert not rpk.empty
        assert oracles.on_curve(point_of(rpk.key_point))
        # public_data carries the same point, SEC1-uncompressed
        assert rpk.key_blob.public_data.data == (
            b"\x04" + rpk.key_point.x_coord.data + rpk.key_point.y_coord.data
        )

    def test_wrong_user_auth_fails_then_error_clears(self, device):
        device.create_and_load_user_key(USER, USER_AUTH)
        rpk = device.create_and_load_rp_key(RP, ByteArray.from_text("bad"), RP_AUTH)
        assert rpk.empty
        assert device.get_last_error() == "user key authorisation failed"
        assert device.get_last_error() == ""

    def test_no_user_key_loaded(self, device):
        assert device.create_and_load_rp_key(RP, USER_AUTH, RP_AUTH).empty
        assert "no user key" in device.get_last_error()

    def test_fresh_user_key_with_same_name_cannot_load_old_rp_blob(self, device):
        device.create_and_load_user_key(USER, USER_AUTH)
        rpk = device.create_and_load_rp_key(RP, USER_AUTH, RP_AUTH)
        device.flush_data()
        # same user name, but new key material: the old blob must not load
        device.create_and_load_user_key(USER, USER_AUTH)
        point = device.load_rp_key(rpk.key_blob, RP, USER_AUTH)
        assert point.empty
        assert "unwrap" in device.get_last_error()

    def test_load_rp_key_returns_original_point(self, device):
        kd_user = device.create_and_load_user_key(USER, USER_AUTH)
        rpk = device.create_and_load_rp_key(RP, USER_AUTH, RP_AUTH)
        device.flush_data()
        assert device.load_user_key(kd_user, USER) == RC_SUCCESS
        point = device.load_rp_key(rpk.key_blob, RP, USER_AUTH)
        assert not point.empty
        assert point == rpk.key_point

    def test_uninitialized_device_returns_empty_point(self):
        dev = TpmDevice()
        point = dev.load_rp_key(KeyData(), RP, USER_AUTH)
        assert point.empty and point.x_coord.size == 0

    def test_rp_blob_under_wrong_user_key_rejected(self, device):
        device.create_and_load_user_key(USER, USER_AUTH)
        rpk = device.create_and_load_rp_key(RP, USER_AUTH, RP_AUTH)
        device.create_and_load_user_key(ByteArray.from_text("bob"), USER_AUTH)
        point = device.load_rp_key(rpk.key_blob, RP, USER_AUTH)
        assert point.empty
        assert "unwrap" in device.get_last_error()


class TestSigning:
    def _loaded(self, device):
        device.create_and_load_user_key(USER, USER_AUTH)
        return device.create_and_load_rp_key(RP, USER_AUTH, RP_AUTH)

    def test_signature_verifies_prehashed_under_oracle(self, device):
        rpk = self._loaded(device)
        sig = device.sign_using_rp_key(RP, ByteArray(DIGEST), RP_AUTH)
        assert not sig.empty
        assert sig.sig_r.size == 32 and sig.sig_s.size == 32
        assert oracles.ecdsa_verify(
            point_of(rpk.key_point),
            DIGEST,
            int.from_bytes(sig.sig_r.data, "big"),
            int.from_bytes(sig.sig_s.data, "big"),
        )

    def test_33_byte_digest_rejected(self, device):
        self._loaded(device)
        assert device.sign_using_rp_key(RP, ByteArray(b"\x00" * 33), RP_AUTH).empty
        assert "larger than the hash" in device.get_last_error()

    def test_short_digest_accepted_and_verifies(self, device):
        rpk = self._loaded(device)
        short = b"\x01\x02\x03\x04" * 5  # 20-byte digest
        sig = device.sign_using_rp_key(RP, ByteArray(short), RP_AUTH)
        assert not sig.empty
        assert oracles.ecdsa_verify(
            point_of(rpk.key_point),
            short,
            int.from_bytes(sig.sig_r.data, "big"),
            int.from_bytes(sig.sig_s.data, "big"),
        )

    def test_two_signatures_differ_but_both_verify(self, device):
        rpk = self._loaded(device)
        one = device.sign_using_rp_key(RP, ByteArray(DIGEST), RP_AUTH)
        two = device.sign_using_rp_key(RP, ByteArray(DIGEST), RP_AUTH)
        assert (one.sig_r.data, one.sig_s.data) != (two.sig_r.data, two.sig_s.data)
        for sig in (one, two):
            assert oracles.ecdsa_verify(
                point_of(rpk.key_point),
                DIGEST,
                int.from_bytes(sig.sig_r.data, "big"),
                int.from_bytes(sig.sig_s.data, "big"),
            )

    def test_wrong_rp_key_auth_rejected(self, device):
        self._loaded(device)
        sig = device.sign_using_rp_key(RP, ByteArray(DIGEST), ByteArray.from_text("bad"))
        assert sig.empty
        assert "authorisation" in device.get_last_error()

    def test_sign_after_flush_fails(self, device):
        self._loaded(device)
        device.flush_data()
        assert device.sign_using_rp_key(RP, ByteArray(DIGEST), RP_AUTH).empty

    def test_sign_for_unloaded_rp_label_fails(self, device):
        self._loaded(device)
        assert device.sign_using_rp_key(ByteArray.from_text("other"), ByteArray(DIGEST), RP_AUTH).empty


class TestErrorAndLog:
    def test_get_last_error_returns_then_clears(self, device):
        device.sign_using_rp_key(RP, ByteArray(DIGEST), RP_AUTH)  # fails: nothing loaded
        first = device.get_last_error()
        assert first != ""
        assert device.get_last_error() == ""

    def test_log_levels_validated(self, device):
        for level in (1, 2, 3):
            assert device.set_log_level(level) == RC_SUCCESS
        assert device.set_log_level(4) != RC_SUCCESS
        assert device.set_log_level(0) != RC_SUCCESS

    def test_higher_level_logs_more(self, tmp_path):
        def run(level):
            d = TpmDevice()
            d.setup(tmp_path / f"tpm{level}")
            d.set_log_level(level)
            d.create_and_load_user_key(USER, USER_AUTH)
            d.create_and_load_rp_key(RP, USER_AUTH, RP_AUTH)
            d.sign_using_rp_key(RP, ByteArray(DIGEST), RP_AUTH)
            d.flush_data()
            (log,) = [p for p in (tmp_path / f"tpm{level}").iterdir() if "tpm_log" in p.name]
            return len(log.read_text().splitlines())

        quiet, basic, full = run(1), run(2), run(3)
        assert quiet < basic < full
        assert quiet == 0


class TestProvider:
    def test_keypair_sign_verify_under_oracle(self, tmp_path):
        device = TpmDevice()
        device.setup(tmp_path / "tpm")
        provider = TpmBackedEs256Provider(device, tmp_path / "tpm")
        pair = provider.create_keypair()
        cose_key = pair.public.cose()
        assert cose_key[1] == 2 and cose_key[3] == -7 and cose_key[-1] == 1
        signature = pair.private.sign(b"message to sign")
        r, s = oracles.parse_der_signature(signature)
        point = (int.from_bytes(cose_key[-2], "big"), int.from_bytes(cose_key[-3], "big"))
        assert oracles.ecdsa_verify_message(point, b"message to sign", r, s)

    def test_handle_round_trip_survives_provider_restart(self, tmp_path):
        device = TpmDevice()
        device.setup(tmp_path / "tpm")
        provider = TpmBackedEs256Provider(device, tmp_path / "tpm")
        pair = provider.create_keypair()
        encoded = pair.private.get_encoded()

        device2 = TpmDevice()
        device2.setup(tmp_path / "tpm")
        provider2 = TpmBackedEs256Provider(device2, tmp_path / "tpm")
        loaded = provider2.load_private(encoded)
        assert loaded.public.cose() == pair.public.cose()
        r, s = oracles.parse_der_signature(loaded.sign(b"after restart"))
        point = (
            int.from_bytes(pair.public.cose()[-2], "big"),
            int.from_bytes(pair.public.cose()[-3], "big"),
        )
        assert oracles.ecdsa_verify_message(point, b"after restart", r, s)

    def test_garbage_handle_rejected(self, tmp_path):
        device = TpmDevice()
        device.setup(tmp_path / "tpm")
        provider = TpmBackedEs256Provider(device, tmp_path / "tpm")
        with pytest.raises(TpmKeyHandleError):
            provider.load_private(b"\x00\x01\x02")

    def test_registry_integration(self, tmp_path):
        device = TpmDevice()
        device.setup(tmp_path / "tpm")
        registry = ProviderRegistry([TpmBackedEs256Provider(device, tmp_path / "tpm")])
        assert registry.algorithms() == [-7]
        assert registry.supports(-7)
