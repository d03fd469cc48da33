"""COSE EC2 key maps for NIST P-256 and the curve membership check."""

from __future__ import annotations

from .constants import ALG_ECDH_ES_HKDF_256, ALG_ES256, CtapStatus
from .errors import CtapError

KTY = 1
ALG = 3
CRV = -1
X = -2
Y = -3

KTY_EC2 = 2
CRV_P256 = 1

# NIST P-256 (secp256r1) domain parameters
P256_P = 0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF
P256_A = P256_P - 3
P256_B = 0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B
P256_N = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
P256_GX = 0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296
P256_GY = 0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5

_SUPPORTED_ALGS = (ALG_ES256, ALG_ECDH_ES_HKDF_256)


def is_on_curve(x: int, y: int) -> bool:
    """True when (x, y) satisfies the P-256 curve equation; excludes infinity."""
    if not (0 <= x < P256_P and 0 <= y < P256_P):
        return False
    return (y * y - (x * x * x + P256_A * x + P256_B)) % P256_P == 0


def ec2_key(alg: int, x: bytes, y: bytes) -> dict:
    """Build the COSE map for a P-256 public key."""
    return {KTY: KTY_EC2, ALG: alg, CRV: CRV_P256, X: bytes(x), Y: bytes(y)}


def decode_ec2(cose: dict) -> tuple[bytes, bytes]:
    """Extract and validate the (x, y) coordinates of a COSE EC2 key.

    Rejects non-EC2 key types and unknown curves with an
    unsupported-algorithm status, and off-curve points with an
    invalid-parameter status.
    """
    if not isinstance(cose, dict):
        raise CtapError(CtapStatus.INVALID_PARAMETER, "COSE key must be a map")
    if cose.get(KTY) != KTY_EC2 or cose.get(CRV) != CRV_P256:
        raise CtapError(CtapStatus.UNSUPPORTED_ALGORITHM, "only EC2 keys on P-256 are supported")
    alg = cose.get(ALG)
    if alg is not None and alg not in _SUPPORTED_ALGS:
        raise CtapError(CtapStatus.UNSUPPORTED_ALGORITHM, f"COSE algorithm {alg}")
    x, y = cose.get(X), cose.get(Y)
    if not (isinstance(x, bytes) and isinstance(y, bytes) and len(x) == 32 and len(y) == 32):
        raise CtapError(CtapStatus.INVALID_PARAMETER, "coordinates must be 32-byte strings")
    if not is_on_curve(int.from_bytes(x, "big"), int.from_bytes(y, "big")):
        raise CtapError(CtapStatus.INVALID_PARAMETER, "point is not on P-256")
    return x, y
