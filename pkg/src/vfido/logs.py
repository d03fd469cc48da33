"""Structured log sinks: debug, usbhid, ctap, auth.

Each sink writes to its own file under the log directory and mirrors into
the debug sink, which is the superset log and additionally streams to
standard output. Files from a previous run are archived by renaming them
with a timestamp suffix, so each file covers exactly one run. A sink that
cannot open its file degrades to standard error rather than failing the
protocol path.

The usbhid sink records one JSON object per report with the payload in
hex, which keeps the wire traffic machine-comparable.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import sys
import time

SINK_NAMES = ("debug", "usbhid", "ctap", "auth")

_instance_counter = itertools.count()


def _timestamp() -> str:
    return time.strftime("%Y%m%d_%H%M%S") + f"_{time.time_ns() % 1_000_000:06d}"


class LogSinks:
    def __init__(self, log_dir: str | os.PathLike, mirror_stdout: bool = True):
        self._dir = os.fspath(log_dir)
        os.makedirs(self._dir, exist_ok=True)
        self._archive_previous()
        instance = next(_instance_counter)
        formatter = logging.Formatter("%(asctime)s %(name)s %(message)s")
        self._handlers: list[logging.Handler] = []

        debug_handler = self._file_handler("debug", formatter)
        self.debug = self._make_logger(f"vfido.debug.{instance}", [debug_handler])
        if mirror_stdout:
            stream = logging.StreamHandler(sys.stdout)
            stream.setFormatter(formatter)
            self._handlers.append(stream)
            self.debug.addHandler(stream)

        for name in ("usbhid", "ctap", "auth"):
            handlers = [self._file_handler(name, formatter)] + list(self.debug.handlers)
            setattr(self, name, self._make_logger(f"vfido.{name}.{instance}", handlers))

    def _archive_previous(self) -> None:
        for name in SINK_NAMES:
            path = os.path.join(self._dir, name)
            if os.path.exists(path):
                os.replace(path, f"{path}_{_timestamp()}")

    def _file_handler(self, name: str, formatter: logging.Formatter) -> logging.Handler:
        try:
            handler: logging.Handler = logging.FileHandler(os.path.join(self._dir, name))
        except OSError:
            handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(formatter)
        self._handlers.append(handler)
        return handler

    @staticmethod
    def _make_logger(name: str, handlers) -> logging.Logger:
        logger = logging.Logger(name, level=logging.DEBUG)
        for handler in handlers:
            logger.addHandler(handler)
        return logger

    def log_report(self, direction: str, report: bytes) -> None:
        """Record one 64-byte report on the usbhid sink as JSON with hex payload."""
        record = {
            "dir": direction,
            "cid": report[:4].hex(),
            "payload": report.hex(),
        }
        self.usbhid.info(json.dumps(record))

    def close(self) -> None:
        for handler in self._handlers:
            try:
                handler.close()
            except OSError:
                pass
        self._handlers = []


class NullSinks:
    """Log-free stand-in with the same surface."""

    def __init__(self):
        logger = logging.Logger("vfido.null")
        logger.addHandler(logging.NullHandler())
        self.debug = self.usbhid = self.ctap = self.auth = logger

    def log_report(self, direction: str, report: bytes) -> None:
        pass

    def close(self) -> None:
        pass
