"""Report transports: an in-process loopback pair and a local socket.

A transport moves whole 64-byte reports, never split and never coalesced,
in write order. The socket transport carries the raw reports on a local
stream socket with no extra framing, mirroring HID report semantics; the
server side behaves like a bus, broadcasting every outbound report to all
connected clients, which filter by channel ID.
"""

from __future__ import annotations

import os
import queue
import socket
import threading

from .constants import REPORT_SIZE
from .errors import VfidoError


class TransportClosed(VfidoError):
    pass


class _QueueEnd:
    """One end of a loopback pair."""

    _CLOSE = object()

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def read(self, timeout: float | None = None) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no report within timeout") from None
        if item is self._CLOSE:
            self._inbox.put(item)  # keep subsequent reads failing too
            raise TransportClosed("peer closed the loopback")
        return item

    def write(self, report: bytes) -> None:
        if self._closed:
            raise TransportClosed("this end is closed")
        if len(report) != REPORT_SIZE:
            raise ValueError(f"reports must be exactly {REPORT_SIZE} bytes")
        self._outbox.put(bytes(report))

    def close(self) -> None:
        self._closed = True
        self._outbox.put(self._CLOSE)


def loopback_pair() -> tuple[_QueueEnd, _QueueEnd]:
    """Two connected ends; what one writes, the other reads."""
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return _QueueEnd(b_to_a, a_to_b), _QueueEnd(a_to_b, b_to_a)


class SocketClientEnd:
    """Client side of the socket transport."""

    def __init__(self, path: str):
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.connect(path)
        self._write_lock = threading.Lock()

    def read(self, timeout: float | None = None) -> bytes:
        self._sock.settimeout(timeout)
        chunks = bytearray()
        while len(chunks) < REPORT_SIZE:
            try:
                chunk = self._sock.recv(REPORT_SIZE - len(chunks))
            except socket.timeout:
                raise TimeoutError("no report within timeout") from None
            if not chunk:
                raise TransportClosed("server closed the socket")
            chunks += chunk
        return bytes(chunks)

    def write(self, report: bytes) -> None:
        if len(report) != REPORT_SIZE:
            raise ValueError(f"reports must be exactly {REPORT_SIZE} bytes")
        with self._write_lock:
            self._sock.sendall(report)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class SocketHidServer:
    """Accepts local connections and pumps their reports into a handler.

    ``on_report`` is invoked on a per-connection reader thread for every
    complete inbound report; :meth:`broadcast` fans a report out to every
    live connection.
    """

    def __init__(self, path: str, on_report):
        self._path = path
        self._on_report = on_report
        if os.path.exists(path):
            os.unlink(path)
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.bind(path)
        self._sock.listen()
        self._conns: list[socket.socket] = []
        self._lock = threading.Lock()
        self._closing = False
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="vfido-accept", daemon=True
        )
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            with self._lock:
                if self._closing:
                    conn.close()
                    return
                self._conns.append(conn)
            threading.Thread(
                target=self._reader_loop, args=(conn,), name="vfido-sock-read", daemon=True
            ).start()

    def _reader_loop(self, conn: socket.socket) -> None:
        try:
            while True:
                chunks = bytearray()
                while len(chunks) < REPORT_SIZE:
                    chunk = conn.recv(REPORT_SIZE - len(chunks))
                    if not chunk:
                        return
                    chunks += chunk
                self._on_report(bytes(chunks))
        except OSError:
            return
        finally:
            with self._lock:
                if conn in self._conns:
                    self._conns.remove(conn)
            conn.close()

    def broadcast(self, report: bytes) -> None:
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.sendall(report)
            except OSError:
                with self._lock:
                    if conn in self._conns:
                        self._conns.remove(conn)

    def close(self) -> None:
        with self._lock:
            self._closing = True
            conns = list(self._conns)
            self._conns.clear()
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._sock.close()
        if os.path.exists(self._path):
            os.unlink(self._path)


class RecordingEnd:
    """Wraps a transport end, recording (direction, report) tuples."""

    def __init__(self, inner):
        self._inner = inner
        self.trace: list[tuple[str, bytes]] = []

    def read(self, timeout: float | None = None) -> bytes:
        report = self._inner.read(timeout)
        self.trace.append(("rx", report))
        return report

    def write(self, report: bytes) -> None:
        self.trace.append(("tx", report))
        self._inner.write(report)

    def close(self) -> None:
        self._inner.close()
