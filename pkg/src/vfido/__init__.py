"""vfido: a virtual FIDO2/CTAP2 authenticator.

The stack, bottom up: 64-byte report framing (:mod:`vfido.hid`), the
CTAPHID command set and transaction discipline (:mod:`vfido.ctaphid`),
CBOR codecs (:mod:`vfido.cbor`, :mod:`vfido.messages`), the authenticator
API (:mod:`vfido.authenticator`), pluggable crypto providers including a
simulated TPM key hierarchy (:mod:`vfido.crypto`, :mod:`vfido.tpm`),
persistent storage (:mod:`vfido.storage`), and transports plus a
conformance client (:mod:`vfido.transport`, :mod:`vfido.client`,
:mod:`vfido.daemon`).
"""

__version__ = "0.1.0"
