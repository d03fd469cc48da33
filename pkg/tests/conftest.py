import pytest

from vfido.authenticator import Authenticator
from vfido.config import Config
from vfido.crypto import Es256Provider, ProviderRegistry, Rng, SeededRng
from vfido.daemon import AuthenticatorDaemon
from vfido.policy import AutoApprovePolicy
from vfido.storage import JsonFileStore


@pytest.fixture
def store(tmp_path):
    with JsonFileStore(tmp_path / "store.json") as s:
        yield s


@pytest.fixture
def registry():
    return ProviderRegistry([Es256Provider()])


@pytest.fixture
def authenticator(store, registry):
    return Authenticator(store, registry, AutoApprovePolicy())


@pytest.fixture
def make_daemon(tmp_path):
    """Factory for daemons with per-test storage; shuts them all down."""
    daemons = []
    counter = [0]

    def factory(policy=None, **config_overrides):
        counter[0] += 1
        defaults = {
            "storage_path": str(tmp_path / f"store{counter[0]}.json"),
            "log_dir": str(tmp_path / f"logs{counter[0]}"),
            "tpm_dir": str(tmp_path / f"tpm{counter[0]}"),
            "socket_path": str(tmp_path / f"sock{counter[0]}"),
        }
        defaults.update(config_overrides)
        daemon_kwargs = {}
        for key in ("kdf_iterations", "keepalive_interval", "request_budget", "password", "sinks"):
            if key in defaults:
                daemon_kwargs[key] = defaults.pop(key)
        daemon = AuthenticatorDaemon(
            Config(**defaults), policy or AutoApprovePolicy(), enable_logs=False, **daemon_kwargs
        )
        daemons.append(daemon)
        return daemon

    yield factory
    for daemon in daemons:
        daemon.shutdown()
