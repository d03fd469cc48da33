"""Command line interface.

``vfido daemon`` serves an authenticator; ``vfido client ...`` drives one.
Client commands talk to a running daemon over the socket transport, or,
with ``--transport loopback``, spin up a private in-process daemon from
the same configuration (useful for demos and smoke tests).

Exit status is 0 on success and 1 on failure, with the CTAP2 or CTAPHID
error code spelled out in the diagnostic message.
"""

from __future__ import annotations

import argparse
import contextlib
import signal
import sys

from .client import ClientError, ConformanceClient, HidClient
from .config import Config, ConfigError, load_config
from .daemon import AuthenticatorDaemon
from .errors import VfidoError
from .policy import AutoApprovePolicy, AutoDenyPolicy, InteractivePolicy
from .transport import SocketClientEnd

_POLICIES = {
    "auto-approve": AutoApprovePolicy,
    "auto-deny": AutoDenyPolicy,
    "interactive": InteractivePolicy,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfido", description="virtual FIDO2 authenticator")
    parser.add_argument("--config", help="path to a key=value configuration file")
    parser.add_argument("--storage", help="override the storage file path")
    parser.add_argument("--backend", choices=["plaintext", "encrypted"], help="storage backend")
    parser.add_argument("--transport", choices=["loopback", "socket"], help="transport to use")
    parser.add_argument("--socket", dest="socket_path", help="socket path for the socket transport")
    parser.add_argument("--log-dir", help="directory for the log sinks")
    parser.add_argument("--provider", choices=["es256", "tpm"], help="crypto provider")
    parser.add_argument("--seed", type=int, help="seed for a reproducible device (testing only)")
    parser.add_argument(
        "--policy",
        choices=sorted(_POLICIES),
        default="interactive",
        help="presence/verification policy (daemon and loopback client)",
    )
    parser.add_argument("--password", help="storage password for the encrypted backend")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("daemon", help="run the authenticator daemon")

    client = sub.add_parser("client", help="drive an authenticator")
    client.add_argument("--state", default="client-state.json", help="client credential record file")
    client_sub = client.add_subparsers(dest="client_command", required=True)

    register = client_sub.add_parser("register", help="create a credential")
    register.add_argument("--rp", required=True, help="relying party id")
    register.add_argument("--user", required=True, help="user name")
    register.add_argument("--rp-name", help="relying party display name")
    register.add_argument("--resident", action=argparse.BooleanOptionalAction, default=None)
    register.add_argument("--pin", help="PIN to authorize the operation")

    assert_cmd = client_sub.add_parser("assert", help="get an assertion")
    assert_cmd.add_argument("--rp", required=True, help="relying party id")
    assert_cmd.add_argument("--credential-id", help="hex credential id for the allow list")
    assert_cmd.add_argument("--pin", help="PIN to authorize the operation")

    pin = client_sub.add_parser("pin", help="client PIN operations")
    pin_sub = pin.add_subparsers(dest="pin_command", required=True)
    pin_set = pin_sub.add_parser("set")
    pin_set.add_argument("--pin", required=True)
    pin_change = pin_sub.add_parser("change")
    pin_change.add_argument("--old", required=True)
    pin_change.add_argument("--new", required=True)
    pin_token = pin_sub.add_parser("token")
    pin_token.add_argument("--pin", required=True)

    client_sub.add_parser("reset", help="factory-reset the authenticator")

    ping = client_sub.add_parser("ping", help="echo test")
    ping.add_argument("--length", type=int, default=64)

    return parser


def _config_from_args(args) -> Config:
    config = load_config(args.config) if args.config else Config()
    overrides = {
        "storage_path": args.storage,
        "storage_backend": args.backend,
        "transport": args.transport,
        "socket_path": args.socket_path,
        "log_dir": args.log_dir,
        "provider": args.provider,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    config.validate()
    return config


def _run_daemon(args) -> int:
    config = _config_from_args(args)
    policy = _POLICIES[args.policy]()
    daemon = AuthenticatorDaemon(config, policy, password=args.password, mirror_stdout=True)
    endpoint = daemon.start()
    print(f"vfido daemon serving {config.transport} transport"
          + (f" at {endpoint}" if isinstance(endpoint, str) else ""))

    def _stop(signum, frame):
        policy.request_shutdown()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    try:
        daemon.run_until_shutdown()
    finally:
        daemon.shutdown()
    print("vfido daemon stopped")
    return 0


@contextlib.contextmanager
def _connected_client(args):
    config = _config_from_args(args)
    daemon = None
    if config.transport == "socket":
        end = SocketClientEnd(config.socket_path)
    else:
        daemon = AuthenticatorDaemon(
            config, _POLICIES[args.policy](), password=args.password, mirror_stdout=False
        )
        end = daemon.start_loopback()
    hid = HidClient(end)
    hid.init()
    try:
        yield ConformanceClient(hid, state_path=args.state)
    finally:
        hid.close()
        if daemon is not None:
            daemon.shutdown()


def _run_client(args) -> int:
    with _connected_client(args) as client:
        command = args.client_command
        if command == "register":
            record = client.register(
                args.rp, args.user, rp_name=args.rp_name, resident=args.resident, pin=args.pin
            )
            print(f"registered credential {record.credential_id.hex()} for {args.rp}"
                  f" (signCount={record.sign_count})")
        elif command == "assert":
            allow = [bytes.fromhex(args.credential_id)] if args.credential_id else None
            reports = client.assert_credential(args.rp, allow_ids=allow, pin=args.pin)
            for report in reports:
                print(f"verified assertion by {report.credential_id.hex()}"
                      f" (signCount={report.sign_count})")
        elif command == "pin":
            if args.pin_command == "set":
                client.set_pin(args.pin)
                print("PIN set")
            elif args.pin_command == "change":
                client.change_pin(args.old, args.new)
                print("PIN changed")
            else:
                token = client.get_pin_token(args.pin)
                print(f"PIN token: {token.hex()}")
        elif command == "reset":
            client.reset()
            print("authenticator reset")
        elif command == "ping":
            import os as _os

            payload = _os.urandom(args.length)
            if client.hid.ping(payload) != payload:
                print("ping payload mismatch", file=sys.stderr)
                return 1
            print(f"ping ok ({args.length} bytes)")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "daemon":
            return _run_daemon(args)
        return _run_client(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (ClientError, VfidoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
