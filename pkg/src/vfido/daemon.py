"""Daemon wiring: storage, providers, authenticator, transaction layer,
transport, and log sinks assembled from a :class:`~vfido.config.Config`.

The daemon serves either an in-process loopback pair (handy for tests and
single-process demos) or a local socket that any number of clients can
connect to.
"""

from __future__ import annotations

import threading

from .authenticator import Authenticator
from .config import Config
from .crypto import Es256Provider, ProviderRegistry, Rng, SeededRng
from .ctaphid import CtapHidLayer
from .errors import VfidoError
from .logs import LogSinks, NullSinks
from .policy import AutoApprovePolicy, PresencePolicy
from .storage import KDF_ITERATIONS, open_or_init
from .tpm import TpmBackedEs256Provider, TpmDevice
from .transport import SocketHidServer, TransportClosed, loopback_pair


class DaemonError(VfidoError):
    pass


class AuthenticatorDaemon:
    def __init__(
        self,
        config: Config,
        policy: PresencePolicy | None = None,
        *,
        password: str | None = None,
        sinks=None,
        enable_logs: bool = True,
        mirror_stdout: bool = False,
        kdf_iterations: int = KDF_ITERATIONS,
        keepalive_interval: float | None = None,
        request_budget: float | None = None,
    ):
        config.validate()
        self.config = config
        self.policy = policy or AutoApprovePolicy()
        self._rng = SeededRng(config.seed) if config.seed is not None else Rng()
        if sinks is not None:
            self.sinks = sinks
        elif enable_logs:
            self.sinks = LogSinks(config.log_dir, mirror_stdout=mirror_stdout)
        else:
            self.sinks = NullSinks()

        if config.storage_backend == "encrypted" and not password:
            password = self.policy.password("storage password")
        self.store = open_or_init(
            config.storage_path,
            config.storage_backend,
            password,
            rng=self._rng,
            kdf_iterations=kdf_iterations,
        )

        try:
            registry = ProviderRegistry()
            if config.provider == "tpm":
                self.tpm = TpmDevice(self._rng)
                if self.tpm.setup(config.tpm_dir) != 0:
                    raise DaemonError(f"TPM setup failed: {self.tpm.get_last_error()}")
                registry.register(TpmBackedEs256Provider(self.tpm, config.tpm_dir, rng=self._rng))
            else:
                self.tpm = None
                registry.register(Es256Provider(self._rng))

            self.authenticator = Authenticator(
                self.store,
                registry,
                self.policy,
                aaguid=config.aaguid,
                resident_default=config.resident_default,
                rng=self._rng,
                log=self.sinks.auth,
            )
            layer_args = {}
            if keepalive_interval is not None:
                layer_args["keepalive_interval"] = keepalive_interval
            if request_budget is not None:
                layer_args["request_budget"] = request_budget
            self.layer = CtapHidLayer(
                self.authenticator,
                self._write_report,
                ctap_log=self.sinks.ctap,
                **layer_args,
            )
        except BaseException:
            self.store.close()
            raise

        self._writer = None
        self._server: SocketHidServer | None = None
        self._device_end = None
        self._pump: threading.Thread | None = None
        self._closed = False

    # -- outbound ---------------------------------------------------------

    def _write_report(self, report: bytes) -> None:
        self.sinks.log_report("tx", report)
        if self._writer is not None:
            self._writer(report)

    def _read_report(self, report: bytes) -> None:
        self.sinks.log_report("rx", report)
        self.layer.handle_packet(report)

    # -- serving ------------------------------------------------------------

    def start_loopback(self):
        """Serve an in-process pair; returns the client-side end."""
        if self._writer is not None:
            raise DaemonError("daemon is already serving a transport")
        device_end, client_end = loopback_pair()
        self._device_end = device_end
        self._writer = device_end.write
        self._pump = threading.Thread(target=self._pump_loop, name="vfido-pump", daemon=True)
        self._pump.start()
        self.sinks.debug.info("serving loopback transport")
        return client_end

    def _pump_loop(self) -> None:
        while True:
            try:
                report = self._device_end.read()
            except (TransportClosed, OSError):
                return
            self._read_report(report)

    def start_socket(self) -> str:
        """Serve the configured socket path; returns it."""
        if self._writer is not None:
            raise DaemonError("daemon is already serving a transport")
        self._server = SocketHidServer(self.config.socket_path, self._read_report)
        self._writer = self._server.broadcast
        self.sinks.debug.info("serving socket transport at %s", self.config.socket_path)
        return self.config.socket_path

    def start(self):
        if self.config.transport == "socket":
            return self.start_socket()
        return self.start_loopback()

    def run_until_shutdown(self) -> None:
        """Block until the policy's shutdown event fires."""
        self.policy.shutdown_event.wait()

    def shutdown(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.policy.request_shutdown()
        self.layer.close()
        if self._server is not None:
            self._server.close()
        if self._device_end is not None:
            self._device_end.close()
        if self._pump is not None:
            self._pump.join(timeout=5)
        self.store.close()
        self.sinks.debug.info("daemon shut down")
        self.sinks.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
