"""CTAPHID command set and transaction discipline.

One transaction (request/response pair) is in flight at any time, across
all channels; complete requests arriving elsewhere in the meantime are
answered with a channel-busy error. INIT and CANCEL operate outside that
rule, and ERROR and KEEPALIVE messages are emitted as response-only
transactions.

Packets are routed on the caller's thread (the transport reader). CBOR
requests execute on a single worker thread so the reader stays free to
serve INIT, deliver busy errors, and honour CANCEL while the
authenticator is blocked on a presence prompt. Keep-alives tick from
their own timer thread. All outbound reports are serialized through one
writer lock so 64-byte reports never interleave.
"""

from __future__ import annotations

import enum
import queue
import threading
import time

from .constants import (
    BROADCAST_CID,
    CAPABILITIES,
    DEVICE_VERSION,
    KEEPALIVE_INTERVAL,
    PROTOCOL_VERSION,
    REQUEST_BUDGET,
    RESERVED_CID,
    CtapStatus,
    HidCommand,
    HidError,
    KeepAliveStatus,
)
from .errors import (
    CtapError,
    InvalidSequenceError,
    PayloadTooLargeError,
    RequestCancelled,
    RequestTimeout,
    UnexpectedContinuationError,
    VfidoError,
)
from .hid import (
    AssembledMessage,
    ChannelAllocator,
    InitializationPacket,
    MessageAssembler,
    fragment,
    parse_packet,
)

INIT_NONCE_SIZE = 8


class TransactionState(enum.Enum):
    EMPTY = "EMPTY"
    REQUEST_RECV = "REQUEST_RECV"
    RESPONSE_SET = "RESPONSE_SET"
    KEEP_ALIVE = "KEEP_ALIVE"
    CANCEL = "CANCEL"
    ERROR = "ERROR"


_S = TransactionState
#: the request/response flow plus response-only wrappers; anything may reset
LEGAL_TRANSITIONS = frozenset(
    {
        (_S.EMPTY, _S.REQUEST_RECV),
        (_S.REQUEST_RECV, _S.RESPONSE_SET),
        (_S.EMPTY, _S.ERROR),
        (_S.EMPTY, _S.CANCEL),
        (_S.EMPTY, _S.KEEP_ALIVE),
    }
    | {(state, _S.EMPTY) for state in _S}
)


class TransactionStateError(VfidoError):
    """An operation would have produced an illegal state transition."""


class RequestContext:
    """Cancellation flag and processing deadline shared with the policy."""

    def __init__(self, budget: float):
        self.cancel = threading.Event()
        self.deadline = time.monotonic() + budget

    def check(self) -> None:
        if self.cancel.is_set():
            raise RequestCancelled()
        if time.monotonic() >= self.deadline:
            raise RequestTimeout()

    def wait(self, seconds: float) -> None:
        """Sleep interruptibly; raises on cancel or budget expiry."""
        end = time.monotonic() + seconds
        while True:
            self.check()
            now = time.monotonic()
            if now >= end:
                return
            if self.cancel.wait(min(end, self.deadline) - now):
                raise RequestCancelled()


class Transaction:
    """Channel-scoped request/response pair with its FSM state."""

    def __init__(self, cid: int, audit=(), budget: float = REQUEST_BUDGET):
        self.cid = cid
        self.state = TransactionState.EMPTY
        self.request: AssembledMessage | None = None
        self.response: AssembledMessage | None = None
        self.ctx = RequestContext(budget)
        self.abandoned = False
        self._audit = tuple(audit)

    def _transition(self, new: TransactionState) -> None:
        old = self.state
        legal = (old, new) in LEGAL_TRANSITIONS
        for hook in self._audit:
            hook(self, old, new, legal)
        if not legal:
            raise TransactionStateError(f"illegal transition {old.name} -> {new.name}")
        self.state = new

    def receive_request(self, message: AssembledMessage) -> None:
        self._transition(TransactionState.REQUEST_RECV)
        self.request = message

    def set_response(self, message: AssembledMessage) -> None:
        self._transition(TransactionState.RESPONSE_SET)
        self.response = message

    def mark_error(self, message: AssembledMessage) -> None:
        self._transition(TransactionState.ERROR)
        self.response = message

    def mark_keepalive(self, message: AssembledMessage) -> None:
        self._transition(TransactionState.KEEP_ALIVE)
        self.response = message

    def mark_cancel(self) -> None:
        self._transition(TransactionState.CANCEL)

    def reset(self) -> None:
        self._transition(TransactionState.EMPTY)
        self.request = None
        self.response = None


class KeepAliveTicker:
    """Emits keep-alive messages for one transaction at a fixed interval.

    Runs in its own timer thread; the layer's writer lock guarantees a
    tick can never land after the transaction's response.
    """

    def __init__(self, layer: "CtapHidLayer", cid: int, interval: float, deadline: float):
        self._layer = layer
        self.cid = cid
        self._interval = interval
        self._deadline = deadline
        self._status = KeepAliveStatus.PROCESSING
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.ticks = 0

    @property
    def stopped(self) -> bool:
        return self._stop.is_set()

    def start(self, status: KeepAliveStatus = KeepAliveStatus.PROCESSING) -> None:
        self._status = KeepAliveStatus(status)
        if self._thread is not None or self._stop.is_set():
            return
        self._thread = threading.Thread(target=self._run, name="vfido-keepalive", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()

    def _run(self) -> None:
        while not self._stop.wait(self._interval):
            if time.monotonic() >= self._deadline:
                break
            if not self._layer._emit_keepalive(self):
                break
            self.ticks += 1

    @property
    def status(self) -> KeepAliveStatus:
        return self._status


class CtapHidLayer:
    """Routes packets, enforces the single-transaction rule, writes responses."""

    def __init__(
        self,
        authenticator,
        writer,
        *,
        keepalive_interval: float = KEEPALIVE_INTERVAL,
        request_budget: float = REQUEST_BUDGET,
        inline_processing: bool = False,
        audit=None,
        ctap_log=None,
    ):
        self._authenticator = authenticator
        self._writer = writer
        self._keepalive_interval = keepalive_interval
        self._budget = request_budget
        self._inline = inline_processing
        self._log = ctap_log
        self._channels = ChannelAllocator()
        self._assemblers: dict[int, MessageAssembler] = {}
        self._active: Transaction | None = None
        self._lock = threading.RLock()
        self._in_lock = threading.Lock()
        self._out_lock = threading.Lock()
        self._counted = 0
        self._counted_peak = 0
        self._audit_hooks = [self._track_counted] + ([audit] if audit else [])
        self._jobs: queue.Queue = queue.Queue()
        self._worker: threading.Thread | None = None
        if not inline_processing:
            self._worker = threading.Thread(target=self._work_loop, name="vfido-worker", daemon=True)
            self._worker.start()

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        if self._worker is not None:
            self._jobs.put(None)
            self._worker.join(timeout=5)
            self._worker = None

    def wait_idle(self, timeout: float = 5.0) -> bool:
        """Block until no transaction is active; True on success."""
        end = time.monotonic() + timeout
        while time.monotonic() < end:
            with self._lock:
                if self._active is None and self._jobs.empty():
                    return True
            time.sleep(0.002)
        return False

    # -- invariants --------------------------------------------------------

    def _track_counted(self, transaction, old, new, legal) -> None:
        counted = (TransactionState.REQUEST_RECV, TransactionState.RESPONSE_SET)
        delta = (new in counted) - (old in counted)
        if delta:
            with self._lock:
                self._counted += delta
                self._counted_peak = max(self._counted_peak, self._counted)

    @property
    def active_transaction_count(self) -> int:
        with self._lock:
            return self._counted

    @property
    def active_transaction_peak(self) -> int:
        with self._lock:
            return self._counted_peak

    def allocated(self, cid: int) -> bool:
        return self._channels.is_allocated(cid)

    # -- logging -----------------------------------------------------------

    def _info(self, fmt, *args) -> None:
        if self._log is not None:
            self._log.info(fmt, *args)

    # -- outbound ----------------------------------------------------------

    def _write_message_locked(self, message: AssembledMessage) -> None:
        for packet in fragment(message.cid, message.cmd, message.payload):
            self._writer(packet.serialize())

    def _write_message(self, message: AssembledMessage) -> None:
        with self._out_lock:
            self._write_message_locked(message)

    def send_error(self, cid: int, code: HidError) -> None:
        """Emit a response-only ERROR transaction; allowed at any time."""
        message = AssembledMessage(cid, HidCommand.ERROR, bytes([code]))
        transaction = Transaction(cid, self._audit_hooks)
        transaction.mark_error(message)
        self._info("error 0x%02x on %08x", code, cid)
        self._write_message(message)
        transaction.reset()

    def _emit_keepalive(self, ticker: KeepAliveTicker) -> bool:
        with self._out_lock:
            if ticker.stopped:
                return False
            message = AssembledMessage(
                ticker.cid, HidCommand.KEEPALIVE, bytes([ticker.status])
            )
            transaction = Transaction(ticker.cid, self._audit_hooks)
            transaction.mark_keepalive(message)
            self._write_message_locked(message)
            transaction.reset()
        self._info("keepalive status %d on %08x", ticker.status, ticker.cid)
        return True

    # -- inbound -----------------------------------------------------------

    def handle_packet(self, report: bytes) -> None:
        """Feed one inbound 64-byte report through the layer.

        Callers may invoke this from any thread; routing is serialized so
        there is a single logical inbound-processing context.
        """
        with self._in_lock:
            self._handle_packet(report)

    def _handle_packet(self, report: bytes) -> None:
        try:
            packet = parse_packet(report)
        except PayloadTooLargeError:
            self.send_error(int.from_bytes(report[:4], "big"), HidError.INVALID_LENGTH)
            return
        cid = packet.cid
        is_init_cmd = isinstance(packet, InitializationPacket) and packet.cmd == HidCommand.INIT
        if cid == RESERVED_CID:
            self.send_error(cid, HidError.INVALID_CHANNEL)
            return
        if cid == BROADCAST_CID:
            if not is_init_cmd:
                self.send_error(cid, HidError.INVALID_CHANNEL)
                return
        elif not self._channels.is_allocated(cid):
            self.send_error(cid, HidError.INVALID_CHANNEL)
            return
        with self._lock:
            assembler = self._assemblers.setdefault(cid, MessageAssembler(cid))
        try:
            result = assembler.feed(packet)
        except UnexpectedContinuationError:
            self._info("dropping spurious continuation on %08x", cid)
            return
        except InvalidSequenceError:
            self.send_error(cid, HidError.INVALID_SEQUENCE)
            return
        if result.aborted and not is_init_cmd:
            # a fresh initialization packet clobbered an open message
            self.send_error(cid, HidError.CHANNEL_BUSY)
        if result.message is not None:
            self._dispatch(result.message)

    def _dispatch(self, message: AssembledMessage) -> None:
        self._info("message cmd 0x%02x (%d bytes) on %08x", message.cmd, len(message.payload), message.cid)
        if message.cmd == HidCommand.INIT:
            self._process_init(message)
            return
        if message.cmd == HidCommand.CANCEL:
            self._process_cancel(message)
            return
        with self._lock:
            if self._active is not None:
                self.send_error(message.cid, HidError.CHANNEL_BUSY)
                return
            transaction = Transaction(message.cid, self._audit_hooks, self._budget)
            transaction.receive_request(message)
            self._active = transaction
        if message.cmd == HidCommand.CBOR:
            if self._inline:
                self._run_cbor(transaction, message)
            else:
                self._jobs.put((transaction, message))
            return
        self._complete(transaction, self._immediate_response(message))

    def _immediate_response(self, message: AssembledMessage) -> AssembledMessage:
        if message.cmd == HidCommand.PING:
            return AssembledMessage(message.cid, HidCommand.PING, message.payload)
        if message.cmd == HidCommand.WINK:
            return AssembledMessage(message.cid, HidCommand.WINK, b"")
        # MSG carries CTAP1/U2F traffic, which this authenticator does not
        # implement; it and any unknown command get an invalid-command error.
        return AssembledMessage(message.cid, HidCommand.ERROR, bytes([HidError.INVALID_COMMAND]))

    def _process_init(self, message: AssembledMessage) -> None:
        if len(message.payload) != INIT_NONCE_SIZE:
            self.send_error(message.cid, HidError.INVALID_LENGTH)
            return
        if message.cid == BROADCAST_CID:
            new_cid = self._channels.allocate()
            self._info("allocated channel %08x", new_cid)
        else:
            new_cid = message.cid
            self._abort_channel(message.cid)
            self._info("re-initialized channel %08x", new_cid)
        payload = (
            message.payload
            + new_cid.to_bytes(4, "big")
            + bytes([PROTOCOL_VERSION, *DEVICE_VERSION, CAPABILITIES])
        )
        self._write_message(AssembledMessage(message.cid, HidCommand.INIT, payload))

    def _abort_channel(self, cid: int) -> None:
        """Reset a channel's transaction state (re-init semantics)."""
        with self._lock:
            transaction = self._active
            if transaction is not None and transaction.cid == cid:
                transaction.abandoned = True
                transaction.ctx.cancel.set()
                transaction.reset()
                self._active = None

    def _process_cancel(self, message: AssembledMessage) -> None:
        with self._lock:
            active = self._active
            pending = (
                active is not None
                and active.cid == message.cid
                and active.state == TransactionState.REQUEST_RECV
            )
            if pending:
                active.ctx.cancel.set()
        # the cancel itself is wrapped as a transaction with no response
        transaction = Transaction(message.cid, self._audit_hooks)
        transaction.mark_cancel()
        transaction.reset()
        self._info("cancel on %08x (%s)", message.cid, "signalled" if pending else "ignored")

    # -- request execution ---------------------------------------------------

    def _work_loop(self) -> None:
        while True:
            job = self._jobs.get()
            if job is None:
                return
            self._run_cbor(*job)

    def _run_cbor(self, transaction: Transaction, message: AssembledMessage) -> None:
        ticker = KeepAliveTicker(
            self, transaction.cid, self._keepalive_interval, transaction.ctx.deadline
        )
        try:
            try:
                transaction.ctx.check()
                payload = self._authenticator.process_cbor(message.payload, transaction.ctx, ticker)
                response = AssembledMessage(transaction.cid, HidCommand.CBOR, payload)
            except CtapError as exc:
                response = AssembledMessage(transaction.cid, HidCommand.CBOR, bytes([exc.status]))
            except RequestCancelled:
                response = AssembledMessage(
                    transaction.cid, HidCommand.CBOR, bytes([CtapStatus.KEEPALIVE_CANCEL])
                )
            except RequestTimeout:
                response = AssembledMessage(
                    transaction.cid, HidCommand.ERROR, bytes([HidError.TIMEOUT])
                )
            except Exception as exc:  # noqa: BLE001 - the protocol must answer no matter what
                self._info("unexpected processing failure: %r", exc)
                response = AssembledMessage(
                    transaction.cid, HidCommand.ERROR, bytes([HidError.OTHER])
                )
        finally:
            ticker.stop()
        self._complete(transaction, response)

    def _complete(self, transaction: Transaction, response: AssembledMessage) -> None:
        try:
            packets = fragment(response.cid, response.cmd, response.payload)
        except PayloadTooLargeError:
            response = AssembledMessage(response.cid, HidCommand.ERROR, bytes([HidError.OTHER]))
            packets = fragment(response.cid, response.cmd, response.payload)
        with self._out_lock:
            if not transaction.abandoned:
                transaction.set_response(response)
                for packet in packets:
                    self._writer(packet.serialize())
                transaction.reset()
        with self._lock:
            if self._active is transaction:
                self._active = None

    # -- keep-alive surface (per-channel control) ------------------------------

    def keepalive_start(self, cid: int, status: KeepAliveStatus, ticker: KeepAliveTicker) -> None:
        if ticker.cid != cid:
            raise VfidoError("ticker does not belong to this channel")
        ticker.start(status)

    def keepalive_stop(self, cid: int, ticker: KeepAliveTicker) -> None:
        if ticker.cid != cid:
            raise VfidoError("ticker does not belong to this channel")
        ticker.stop()
