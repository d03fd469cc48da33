"""Crypto provider and credential wrapper tests, checked against the
independent pure-Python oracles."""

import hashlib
import random

import pytest

import oracles
from vfido import cose
from vfido.crypto import (
    AesCredentialWrapper,
    Es256Provider,
    ProviderRegistry,
    Rng,
    SeededRng,
    unwrap_with_padding,
    wrap_with_padding,
)
from vfido.errors import CredentialUnwrapError, KeyDecodeError


def _oracle_point(public) -> tuple[int, int]:
    return int.from_bytes(public.x, "big"), int.from_bytes(public.y, "big")


class TestEs256Provider:
    def test_cose_encoding_shape(self):
        pair = Es256Provider().create_keypair()
        key = pair.public.cose()
        assert key[cose.KTY] == 2 and key[cose.CRV] == 1 and key[cose.ALG] == -7
        assert len(key[cose.X]) == 32 and len(key[cose.Y]) == 32

    def test_public_key_on_curve_per_oracle(self):
        pair = Es256Provider().create_keypair()
        assert oracles.on_curve(_oracle_point(pair.public))

    def test_two_keypairs_differ(self):
        provider = Es256Provider()
        assert provider.create_keypair().public.cose() != provider.create_keypair().public.cose()

    def test_sign_verifies_under_independent_oracle(self):
        pair = Es256Provider().create_keypair()
        for message in (b"", b"m", b"x" * 1000):
            signature = pair.private.sign(message)
            r, s = oracles.parse_der_signature(signature)
            assert oracles.ecdsa_verify_message(_oracle_point(pair.public), message, r, s)

    def test_tampered_message_rejected(self):
        pair = Es256Provider().create_keypair()
        r, s = oracles.parse_der_signature(pair.private.sign(b"payload"))
        assert not oracles.ecdsa_verify_message(_oracle_point(pair.public), b"payloae", r, s)

    def test_serialize_load_round_trip_preserves_identity(self):
        provider = Es256Provider()
        pair = provider.create_keypair()
        loaded = provider.load_private(pair.private.get_encoded())
        assert loaded.public.cose() == pair.public.cose()
        r, s = oracles.parse_der_signature(loaded.sign(b"check"))
        assert oracles.ecdsa_verify_message(_oracle_point(pair.public), b"check", r, s)

    def test_truncated_encoding_fails_to_load(self):
        provider = Es256Provider()
        encoded = provider.create_keypair().private.get_encoded()
        with pytest.raises(KeyDecodeError):
            provider.load_private(encoded[:-7])

    def test_encoding_is_pkcs8_with_p256_oid(self):
        pair = Es256Provider().create_keypair()
        parsed = oracles.parse_pkcs8_ec(pair.private.get_encoded())
        assert parsed["curve_oid"] == oracles.P256_CURVE_OID
        assert oracles.ec_mul(parsed["scalar"], oracles.G) == _oracle_point(pair.public)

    def test_public_from_cose_round_trip(self):
        provider = Es256Provider()
        pair = provider.create_keypair()
        rebuilt = provider.public_from_cose(pair.public.cose())
        assert rebuilt.cose() == pair.public.cose()

    def test_ecdh_agrees_with_oracle(self):
        provider = Es256Provider()
        ours = provider.create_keypair()
        theirs_scalar = 0xDEADBEEF12345678
        theirs = oracles.ec_mul(theirs_scalar, oracles.G)
        theirs_cose = cose.ec2_key(-25, theirs[0].to_bytes(32, "big"), theirs[1].to_bytes(32, "big"))
        shared = ours.private.ecdh(theirs_cose)
        assert shared == oracles.ecdh_shared_x(theirs_scalar, _oracle_point(ours.public))

    def test_seeded_rng_reproduces_keys_and_signatures(self):
        one = Es256Provider(SeededRng(99)).create_keypair()
        two = Es256Provider(SeededRng(99)).create_keypair()
        assert one.public.cose() == two.public.cose()
        assert one.private.sign(b"same") == two.private.sign(b"same")


class TestProviderRegistry:
    def test_lookup_and_algorithms(self):
        provider = Es256Provider()
        registry = ProviderRegistry([provider])
        assert registry.supports(-7)
        assert not registry.supports(-8)
        assert registry.get(-7) is provider
        assert registry.algorithms() == [-7]

    def test_one_provider_per_algorithm(self):
        registry = ProviderRegistry([Es256Provider()])
        with pytest.raises(ValueError):
            registry.register(Es256Provider())


class TestCredentialWrapper:
    def test_rfc5649_vector_via_primitive(self):
        kek = bytes.fromhex("5840df6e29b02af1ab493b705bf16ea1ae8338f4dcc176a8")
        pt = bytes.fromhex("c37b7e6492584340bed12207808941155068f738")
        expected = "138bdeaa9b8fa7fc61f97742e72248ee5ae6ae5360d1ae6a5f54f373fa543b6a"
        assert wrap_with_padding(kek, pt).hex() == expected
        assert oracles.wrap_with_padding(kek, pt).hex() == expected
        assert unwrap_with_padding(kek, bytes.fromhex(expected)) == pt

    def test_wrap_agrees_with_oracle_for_all_small_lengths(self):
        key = bytes(range(32))
        for length in range(1, 129):
            pt = bytes((length + i) & 0xFF for i in range(length))
            assert wrap_with_padding(key, pt) == oracles.wrap_with_padding(key, pt)

    def test_round_trip_random_lengths(self):
        wrapper = AesCredentialWrapper(AesCredentialWrapper.generate_key())
        rng = random.Random(7)
        for length in range(1, 129):
            pt = rng.randbytes(length)
            assert wrapper.unwrap(wrapper.wrap(pt)) == pt

    def test_oracle_can_unwrap_our_blobs(self):
        key = AesCredentialWrapper.generate_key()
        wrapper = AesCredentialWrapper(key)
        pt = b"interop check payload"
        assert oracles.unwrap_with_padding(key, wrapper.wrap(pt)) == pt

    def test_single_bit_flip_rejected(self):
        wrapper = AesCredentialWrapper(b"\x42" * 32)
        wrapped = bytearray(wrapper.wrap(b"secret credential"))
        rng = random.Random(3)
        for _ in range(200):
            pos = rng.randrange(len(wrapped))
            bit = 1 << rng.randrange(8)
            mutated = bytes(wrapped[:pos]) + bytes([wrapped[pos] ^ bit]) + bytes(wrapped[pos + 1 :])
            with pytest.raises(CredentialUnwrapError):
                wrapper.unwrap(mutated)

    def test_wrong_key_rejected(self):
        wrapped = AesCredentialWrapper(b"\x01" * 32).wrap(b"data")
        with pytest.raises(CredentialUnwrapError):
            AesCredentialWrapper(b"\x02" * 32).unwrap(wrapped)

    def test_impossible_lengths_rejected(self):
        wrapper = AesCredentialWrapper(b"\x00" * 32)
        for bad in (b"", b"\x00" * 8, b"\x00" * 17):
            with pytest.raises(CredentialUnwrapError):
                wrapper.unwrap(bad)

    def test_empty_plaintext_refused(self):
        with pytest.raises(ValueError):
            AesCredentialWrapper(b"\x00" * 32).wrap(b"")

    def test_key_must_be_32_bytes(self):
        with pytest.raises(ValueError):
            AesCredentialWrapper(b"\x00" * 16)
        assert len(AesCredentialWrapper.generate_key()) == 32


class TestRng:
    def test_seeded_rng_is_reproducible(self):
        assert SeededRng(5).bytes(40) == SeededRng(5).bytes(40)
        assert SeededRng(5).bytes(40) != SeededRng(6).bytes(40)

    def test_default_rng_is_not(self):
        rng = Rng()
        assert rng.bytes(32) != rng.bytes(32)
        assert not rng.deterministic and SeededRng(0).deterministic
