"""Flat key=value configuration for the daemon and CLI.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Unknown keys are rejected so typos fail loudly instead of silently using
a default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .constants import ZERO_AAGUID
from .errors import VfidoError


class ConfigError(VfidoError):
    pass


@dataclass
class Config:
    storage_path: str = "authenticator.store"
    storage_backend: str = "plaintext"  # plaintext | encrypted
    resident_default: bool = False
    transport: str = "loopback"  # loopback | socket
    socket_path: str = "vfido.sock"
    log_dir: str = "logs"
    aaguid: bytes = ZERO_AAGUID
    provider: str = "es256"  # es256 | tpm
    tpm_dir: str = "tpm-data"
    seed: int | None = None

    def validate(self) -> None:
        if self.storage_backend not in ("plaintext", "encrypted"):
            raise ConfigError(f"storage_backend must be plaintext or encrypted, got {self.storage_backend!r}")
        if self.transport not in ("loopback", "socket"):
            raise ConfigError(f"transport must be loopback or socket, got {self.transport!r}")
        if self.provider not in ("es256", "tpm"):
            raise ConfigError(f"provider must be es256 or tpm, got {self.provider!r}")
        if len(self.aaguid) != 16:
            raise ConfigError("aaguid must be 16 bytes (32 hex characters)")


def _parse_bool(raw: str, key: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key} must be a boolean, got {raw!r}")


def _parse_aaguid(raw: str, key: str) -> bytes:
    try:
        value = bytes.fromhex(raw)
    except ValueError as exc:
        raise ConfigError(f"{key} must be hex: {exc}") from exc
    if len(value) != 16:
        raise ConfigError(f"{key} must be 32 hex characters")
    return value


def _parse_int(raw: str, key: str) -> int:
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{key} must be an integer, got {raw!r}") from exc


_PARSERS = {
    "storage_path": lambda raw, key: raw,
    "storage_backend": lambda raw, key: raw,
    "resident_default": _parse_bool,
    "transport": lambda raw, key: raw,
    "socket_path": lambda raw, key: raw,
    "log_dir": lambda raw, key: raw,
    "aaguid": _parse_aaguid,
    "provider": lambda raw, key: raw,
    "tpm_dir": lambda raw, key: raw,
    "seed": _parse_int,
}

assert set(_PARSERS) == {f.name for f in fields(Config)}


def load_config(path: str | os.PathLike) -> Config:
    config = Config()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in _PARSERS:
                raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}")
            setattr(config, key, _PARSERS[key](raw, key))
    config.validate()
    return config
