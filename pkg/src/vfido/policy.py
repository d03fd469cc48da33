"""Presence and verification policies.

A policy answers four needs: a user presence check, a user verification
check, password entry, and a shutdown request. The non-interactive
policies exist for scripting and testing; the interactive one renders the
request context (operation, RP, user) on the terminal and asks.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from .errors import VfidoError


class PolicyExhaustedError(VfidoError):
    """A scripted policy ran out of decisions."""


@dataclass(frozen=True)
class ApprovalRequest:
    operation: str
    rp_id: str | None = None
    user_name: str | None = None

    def describe(self) -> str:
        parts = [self.operation]
        if self.rp_id:
            parts.append(f"rp={self.rp_id}")
        if self.user_name:
            parts.append(f"user={self.user_name}")
        return " ".join(parts)


class PresencePolicy:
    """Base policy: deny everything, never block."""

    #: True when a presence prompt may take noticeable time, in which case
    #: the transaction layer keeps the channel alive while waiting.
    may_block = False

    def __init__(self):
        self.shutdown_event = threading.Event()

    def presence(self, request: ApprovalRequest, ctx) -> bool:
        return False

    def verification(self, request: ApprovalRequest, ctx) -> bool:
        return False

    def password(self, prompt: str) -> str:
        raise VfidoError("this policy cannot supply a password")

    def request_shutdown(self) -> None:
        self.shutdown_event.set()


class AutoApprovePolicy(PresencePolicy):
    def presence(self, request, ctx) -> bool:
        return True

    def verification(self, request, ctx) -> bool:
        return True


class AutoDenyPolicy(PresencePolicy):
    pass


class ScriptedPolicy(PresencePolicy):
    """Consumes an ordered list of decisions.

    Each decision is either a bool or a ``(bool, delay_seconds)`` tuple;
    the delay is spent in an interruptible wait so cancel and timeout
    behave as they would with a human. Running out of decisions is an
    error: a scripted session must know its length.
    """

    may_block = True

    def __init__(self, decisions, password_value: str | None = None):
        super().__init__()
        self._decisions = list(decisions)
        self._password = password_value

    def _next(self, ctx) -> bool:
        if not self._decisions:
            raise PolicyExhaustedError("scripted policy has no decisions left")
        decision = self._decisions.pop(0)
        if isinstance(decision, tuple):
            approved, delay = decision
            if delay:
                ctx.wait(delay)
            return bool(approved)
        return bool(decision)

    def presence(self, request, ctx) -> bool:
        return self._next(ctx)

    def verification(self, request, ctx) -> bool:
        return self._next(ctx)

    def password(self, prompt: str) -> str:
        if self._password is None:
            raise VfidoError("scripted policy was built without a password")
        return self._password


class InteractivePolicy(PresencePolicy):
    """Terminal prompts; used by the daemon CLI."""

    may_block = True

    def _ask(self, kind: str, request: ApprovalRequest) -> bool:
        answer = input(f"[vfido] {kind} for: {request.describe()} - approve? [y/N] ")
        return answer.strip().lower() in ("y", "yes")

    def presence(self, request, ctx) -> bool:
        return self._ask("presence check", request)

    def verification(self, request, ctx) -> bool:
        return self._ask("user verification", request)

    def password(self, prompt: str) -> str:
        import getpass

        return getpass.getpass(f"[vfido] {prompt}: ")
