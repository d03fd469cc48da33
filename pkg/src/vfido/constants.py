"""Protocol constants: packet geometry, command bytes, status codes, flags.

Collected in one place because the same values are referenced from the
framing layer, the transaction layer, the authenticator, and the client.
"""

from enum import IntEnum

REPORT_SIZE = 64
INIT_DATA_SIZE = 57
CONT_DATA_SIZE = 59
MAX_SEQ = 127
# one initialization packet plus 128 continuations: 57 + 128 * 59
MAX_PAYLOAD = INIT_DATA_SIZE + (MAX_SEQ + 1) * CONT_DATA_SIZE

BROADCAST_CID = 0xFFFFFFFF
RESERVED_CID = 0x00000000

PROTOCOL_VERSION = 2
DEVICE_VERSION = (1, 0, 0)

KEEPALIVE_INTERVAL = 0.1
REQUEST_BUDGET = 30.0
ITERATION_TIMEOUT = 30.0

AAGUID_SIZE = 16
ZERO_AAGUID = b"\x00" * AAGUID_SIZE

PIN_MAX_RETRIES = 8
PIN_TOKEN_SIZE = 16


class HidCommand(IntEnum):
    """Command byte of an initialization packet (without the 0x80 marker)."""

    PING = 0x01
    MSG = 0x03
    INIT = 0x06
    WINK = 0x08
    CBOR = 0x10
    CANCEL = 0x11
    KEEPALIVE = 0x3B
    ERROR = 0x3F


class HidError(IntEnum):
    """One-byte payload of an ERROR message."""

    INVALID_COMMAND = 0x01
    INVALID_SEQUENCE = 0x04
    TIMEOUT = 0x05
    CHANNEL_BUSY = 0x06
    INVALID_CHANNEL = 0x0B
    INVALID_LENGTH = 0x11
    OTHER = 0x7F


class KeepAliveStatus(IntEnum):
    PROCESSING = 1
    UP_NEEDED = 2


# capabilities byte in the INIT response
CAP_WINK = 0x01
CAP_CBOR = 0x04
CAP_NMSG = 0x08
CAPABILITIES = CAP_WINK | CAP_CBOR | CAP_NMSG


class CborCommand(IntEnum):
    """First byte of a CBOR request payload."""

    MAKE_CREDENTIAL = 0x01
    GET_ASSERTION = 0x02
    GET_INFO = 0x04
    CLIENT_PIN = 0x06
    RESET = 0x07
    GET_NEXT_ASSERTION = 0x08


class CtapStatus(IntEnum):
    """First byte of a CBOR response payload."""

    OK = 0x00
    INVALID_COMMAND = 0x01
    INVALID_PARAMETER = 0x02
    INVALID_CBOR = 0x12
    MISSING_PARAMETER = 0x14
    CREDENTIAL_EXCLUDED = 0x19
    UNSUPPORTED_ALGORITHM = 0x26
    OPERATION_DENIED = 0x27
    KEEPALIVE_CANCEL = 0x2D
    NO_CREDENTIALS = 0x2E
    NOT_ALLOWED = 0x30
    PIN_INVALID = 0x31
    PIN_BLOCKED = 0x32
    PIN_AUTH_INVALID = 0x33
    PIN_NOT_SET = 0x35
    PIN_POLICY_VIOLATION = 0x37
    OTHER = 0x7F


class ClientPinSubCommand(IntEnum):
    GET_RETRIES = 1
    GET_KEY_AGREEMENT = 2
    SET_PIN = 3
    CHANGE_PIN = 4
    GET_PIN_TOKEN = 5


# authenticator data flag bits
FLAG_UP = 0x01
FLAG_UV = 0x04
FLAG_AT = 0x40

# COSE algorithm identifiers
ALG_ES256 = -7
ALG_ECDH_ES_HKDF_256 = -25
