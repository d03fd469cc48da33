"""64-byte HID report framing: packets, fragmentation, reassembly, channels.

Wire layout of the two packet kinds::

    initialization: CID(4, BE) | CMD|0x80 (1) | BCNT(2, BE) | DATA(57)
    continuation:   CID(4, BE) | SEQ (1)      | DATA(59)

Byte 4 disambiguates: its high bit is set on initialization packets only.
A message is one initialization packet plus 0..128 continuation packets,
so payloads are capped at 57 + 128 * 59 = 7609 bytes. Padding is 0x00 and
is discarded on reassembly.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

from .constants import (
    BROADCAST_CID,
    CONT_DATA_SIZE,
    INIT_DATA_SIZE,
    MAX_PAYLOAD,
    MAX_SEQ,
    REPORT_SIZE,
    RESERVED_CID,
)
from .errors import (
    ChannelExhaustedError,
    InvalidSequenceError,
    PacketLengthError,
    PayloadTooLargeError,
    UnexpectedContinuationError,
)

_CMD_MARKER = 0x80


def _pad(data: bytes, size: int) -> bytes:
    if len(data) > size:
        raise PayloadTooLargeError(f"{len(data)} bytes exceed packet capacity {size}")
    return data + b"\x00" * (size - len(data))


@dataclass(frozen=True)
class InitializationPacket:
    cid: int
    cmd: int
    bcnt: int
    data: bytes

    def __post_init__(self):
        if not 0 <= self.cmd <= 0x7F:
            raise ValueError("command code must fit in 7 bits")
        if self.bcnt > MAX_PAYLOAD:
            raise PayloadTooLargeError(f"bcnt {self.bcnt} exceeds {MAX_PAYLOAD}")
        if len(self.data) != INIT_DATA_SIZE:
            raise PacketLengthError("initialization data must be 57 bytes")

    def serialize(self) -> bytes:
        return struct.pack(">IBH", self.cid, self.cmd | _CMD_MARKER, self.bcnt) + self.data


@dataclass(frozen=True)
class ContinuationPacket:
    cid: int
    seq: int
    data: bytes

    def __post_init__(self):
        if not 0 <= self.seq <= MAX_SEQ:
            raise ValueError("sequence number must be 0..127")
        if len(self.data) != CONT_DATA_SIZE:
            raise PacketLengthError("continuation data must be 59 bytes")

    def serialize(self) -> bytes:
        return struct.pack(">IB", self.cid, self.seq) + self.data


HidPacket = InitializationPacket | ContinuationPacket


@dataclass(frozen=True)
class AssembledMessage:
    cid: int
    cmd: int
    payload: bytes


def parse_packet(raw: bytes) -> HidPacket:
    """Parse one 64-byte report into a typed packet."""
    if len(raw) != REPORT_SIZE:
        raise PacketLengthError(f"report must be {REPORT_SIZE} bytes, got {len(raw)}")
    cid = struct.unpack_from(">I", raw)[0]
    marker = raw[4]
    if marker & _CMD_MARKER:
        bcnt = struct.unpack_from(">H", raw, 5)[0]
        return InitializationPacket(cid, marker & 0x7F, bcnt, bytes(raw[7:]))
    return ContinuationPacket(cid, marker, bytes(raw[5:]))


def packet_count(payload_length: int) -> int:
    """Number of 64-byte reports needed for a payload of the given length."""
    if payload_length <= INIT_DATA_SIZE:
        return 1
    return 1 + -(-(payload_length - INIT_DATA_SIZE) // CONT_DATA_SIZE)


def fragment(cid: int, cmd: int, payload: bytes) -> list[HidPacket]:
    """Split a payload into one initialization packet plus continuations."""
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLargeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    packets: list[HidPacket] = [
        InitializationPacket(cid, cmd, len(payload), _pad(payload[:INIT_DATA_SIZE], INIT_DATA_SIZE))
    ]
    rest = payload[INIT_DATA_SIZE:]
    for seq in range(packet_count(len(payload)) - 1):
        chunk = rest[seq * CONT_DATA_SIZE : (seq + 1) * CONT_DATA_SIZE]
        packets.append(ContinuationPacket(cid, seq, _pad(chunk, CONT_DATA_SIZE)))
    return packets


@dataclass
class FeedResult:
    """Outcome of feeding one packet to an assembler."""

    message: AssembledMessage | None = None
    aborted: bool = False


class MessageAssembler:
    """Reassembles the packet stream of a single channel.

    Holds at most one open message. A new initialization packet while a
    message is open aborts the old message and restarts from the new one;
    the caller learns about it through ``FeedResult.aborted``.
    """

    def __init__(self, cid: int):
        self.cid = cid
        self._cmd = 0
        self._expected = 0
        self._buffer = bytearray()
        self._next_seq = 0
        self._open = False

    @property
    def open(self) -> bool:
        return self._open

    def reset(self) -> None:
        self._open = False
        self._buffer = bytearray()

    def feed(self, pkt: HidPacket) -> FeedResult:
        if pkt.cid != self.cid:
            raise ValueError("packet fed to the wrong channel's assembler")
        if isinstance(pkt, InitializationPacket):
            aborted = self._open
            self._cmd = pkt.cmd
            self._expected = pkt.bcnt
            self._buffer = bytearray(pkt.data[: pkt.bcnt])
            self._next_seq = 0
            self._open = True
            return FeedResult(self._maybe_complete(), aborted)
        if not self._open:
            raise UnexpectedContinuationError("continuation packet with no open message")
        if pkt.seq != self._next_seq:
            self.reset()
            raise InvalidSequenceError(f"expected seq {self._next_seq}, got {pkt.seq}")
        self._next_seq += 1
        remaining = self._expected - len(self._buffer)
        self._buffer += pkt.data[:remaining]
        return FeedResult(self._maybe_complete(), False)

    def _maybe_complete(self) -> AssembledMessage | None:
        if len(self._buffer) < self._expected:
            return None
        self._open = False
        return AssembledMessage(self.cid, self._cmd, bytes(self._buffer))


def reassemble(packets) -> AssembledMessage:
    """Reassemble a complete packet sequence for one channel.

    Convenience wrapper over :class:`MessageAssembler` for callers that
    already hold the full sequence.
    """
    packets = list(packets)
    if not packets:
        raise UnexpectedContinuationError("empty packet sequence")
    assembler = MessageAssembler(packets[0].cid)
    result = FeedResult()
    for pkt in packets:
        result = assembler.feed(pkt)
    if result.message is None:
        raise PacketLengthError("packet sequence ends mid-message")
    return result.message


class ChannelAllocator:
    """Hands out unique channel IDs, never zero and never broadcast."""

    def __init__(self, limit: int = BROADCAST_CID - 1):
        if not RESERVED_CID < limit < BROADCAST_CID:
            raise ValueError("limit must lie strictly between reserved and broadcast")
        self._limit = limit
        self._next = 1
        self._lock = threading.Lock()

    def allocate(self) -> int:
        with self._lock:
            if self._next > self._limit:
                raise ChannelExhaustedError("channel ID space exhausted")
            cid = self._next
            self._next += 1
            return cid

    def is_allocated(self, cid: int) -> bool:
        with self._lock:
            return RESERVED_CID < cid < self._next
