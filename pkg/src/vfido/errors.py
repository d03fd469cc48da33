"""Exception hierarchy.

Protocol failures are raised as exceptions and converted to wire error
messages near the transport: a :class:`CtapError` becomes the status byte
of a CBOR response, a :class:`FramingError` becomes a CTAPHID ERROR
message carrying its ``hid_error`` code.
"""

from .constants import CtapStatus, HidError


class VfidoError(Exception):
    pass


class CtapError(VfidoError):
    """A CTAP2-level failure, reported as a one-byte CBOR status."""

    def __init__(self, status: CtapStatus | int, message: str = ""):
        self.status = CtapStatus(status)
        super().__init__(message or self.status.name)


class FramingError(VfidoError):
    """A packet-layer failure; ``hid_error`` is the wire code, if any."""

    hid_error: HidError | None = None


class PacketLengthError(FramingError):
    pass


class PayloadTooLargeError(FramingError):
    hid_error = HidError.INVALID_LENGTH


class InvalidSequenceError(FramingError):
    hid_error = HidError.INVALID_SEQUENCE


class UnexpectedContinuationError(FramingError):
    pass


class ChannelExhaustedError(VfidoError):
    pass


class RequestCancelled(VfidoError):
    """The client cancelled the request mid-processing."""


class RequestTimeout(VfidoError):
    """The per-request processing budget expired."""


class KeyDecodeError(VfidoError):
    """Serialized key material could not be loaded."""


class CredentialUnwrapError(VfidoError):
    """A wrapped credential failed authenticated unwrapping."""


class CredentialDecodeError(VfidoError):
    """Serialized credential-source bytes could not be decoded."""
