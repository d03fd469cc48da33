"""The authenticator API: credential creation, assertions, info, PIN, reset.

Commands arrive as CBOR payloads from the transaction layer, one at a
time. Failures are raised as :class:`CtapError` and become the status
byte of the response. Attestation is packed self-attestation: the newly
created credential key signs its own attestation statement.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

from . import cbor
from .constants import (
    FLAG_AT,
    FLAG_UP,
    FLAG_UV,
    ITERATION_TIMEOUT,
    MAX_PAYLOAD,
    ZERO_AAGUID,
    CborCommand,
    CtapStatus,
    KeepAliveStatus,
)
from .credential import CredentialSource
from .crypto import AesCredentialWrapper, ProviderRegistry, Rng
from .errors import (
    CredentialDecodeError,
    CredentialUnwrapError,
    CtapError,
    KeyDecodeError,
)
from .messages import (
    PUBLIC_KEY_TYPE,
    CredentialDescriptor,
    CredentialParameter,
    GetAssertionParameters,
    GetAssertionResponse,
    GetInfoResponse,
    MakeCredentialParameters,
    MakeCredentialResponse,
    ResetResponse,
    decode_request,
    encode_response,
)
from .pin import PinProtocol
from .policy import ApprovalRequest, PresencePolicy
from .storage import JsonFileStore

RESIDENT_CREDENTIAL_ID_SIZE = 16


def build_auth_data(rp_id: str, flags: int, counter: int, attested: bytes = b"") -> bytes:
    """rpIdHash(32) | flags(1) | signCount(4, BE) | attested credential data."""
    return hashlib.sha256(rp_id.encode("utf-8")).digest() + bytes([flags]) + counter.to_bytes(4, "big") + attested


@dataclass
class _IterationState:
    remaining: list[tuple[CredentialSource, bool]]  # (source, resident)
    client_data_hash: bytes
    flags: int
    started_at: float = field(default_factory=time.monotonic)

    def expired(self, timeout: float) -> bool:
        return time.monotonic() - self.started_at > timeout


class Authenticator:
    def __init__(
        self,
        store: JsonFileStore,
        providers: ProviderRegistry,
        policy: PresencePolicy,
        *,
        aaguid: bytes = ZERO_AAGUID,
        resident_default: bool = False,
        uv_via_policy: bool = False,
        rng: Rng | None = None,
        log=None,
        iteration_timeout: float = ITERATION_TIMEOUT,
    ):
        if len(aaguid) != 16:
            raise ValueError("aaguid must be 16 bytes")
        self._store = store
        self._providers = providers
        self._policy = policy
        self._aaguid = aaguid
        self._resident_default = resident_default
        self._uv_via_policy = uv_via_policy
        self._rng = rng or Rng()
        self._log = log
        self._iteration_timeout = iteration_timeout
        self._pin = PinProtocol(store, self._rng)
        self._iteration: _IterationState | None = None

    # -- dispatch ----------------------------------------------------------

    def process_cbor(self, payload: bytes, ctx=None, keepalive=None) -> bytes:
        """Handle one CBOR request payload; returns status byte plus body."""
        try:
            command, params = decode_request(payload)
        except CtapError as exc:
            self._info("request rejected: %s", exc)
            raise
        if command != CborCommand.GET_NEXT_ASSERTION:
            # any other request invalidates a pending assertion iteration
            self._iteration = None
        handler = {
            CborCommand.MAKE_CREDENTIAL: self._make_credential,
            CborCommand.GET_ASSERTION: self._get_assertion,
            CborCommand.GET_NEXT_ASSERTION: self._get_next_assertion,
            CborCommand.GET_INFO: self._get_info,
            CborCommand.CLIENT_PIN: self._client_pin,
            CborCommand.RESET: self._reset,
        }[command]
        try:
            model = handler(params, ctx, keepalive)
        except CtapError as exc:
            self._info("%s failed: %s", command.name, exc)
            raise
        self._info("%s ok", command.name)
        return encode_response(CtapStatus.OK, model)

    def _info(self, fmt, *args) -> None:
        if self._log is not None:
            self._log.info(fmt, *args)

    # -- helpers -----------------------------------------------------------

    def _wrapper(self) -> AesCredentialWrapper:
        return AesCredentialWrapper(self._store.wrap_key)

    def _require_presence(self, ctx, keepalive, request: ApprovalRequest) -> None:
        started = False
        if keepalive is not None and self._policy.may_block:
            keepalive.start(KeepAliveStatus.UP_NEEDED)
            started = True
        try:
            approved = self._policy.presence(request, ctx)
        finally:
            if started:
                keepalive.stop()
        if not approved:
            raise CtapError(CtapStatus.OPERATION_DENIED, "user presence denied")

    def _check_pin_auth(self, pin_auth: bytes | None, pin_protocol: int | None, cdh: bytes) -> bool:
        """Gate an operation on the PIN token; returns the UV flag value."""
        if not self._pin.pin_is_set:
            return False
        if pin_auth is None or pin_protocol != 1:
            raise CtapError(CtapStatus.PIN_AUTH_INVALID, "PIN is set; a pinAuth proof is required")
        if not self._pin.verify_pin_auth(pin_auth, cdh):
            raise CtapError(CtapStatus.PIN_AUTH_INVALID)
        return True

    def _unwrap_credential_id(self, credential_id: bytes, rp_id: str) -> CredentialSource | None:
        """Recover a non-resident source from a credential id, or None."""
        try:
            source = CredentialSource.from_bytes(self._wrapper().unwrap(credential_id))
        except (CredentialUnwrapError, CredentialDecodeError):
            return None
        if source.rp_id != rp_id:
            return None
        return source.with_credential_id(credential_id)

    def _load_private(self, source: CredentialSource):
        if not self._providers.supports(source.alg):
            raise CtapError(CtapStatus.OTHER, f"no provider for stored alg {source.alg}")
        try:
            return self._providers.get(source.alg).load_private(source.key_handle)
        except KeyDecodeError as exc:
            raise CtapError(CtapStatus.OTHER, f"stored key handle unusable: {exc}") from exc

    # -- getInfo ------------------------------------------------------------

    def _get_info(self, params, ctx, keepalive) -> GetInfoResponse:
        options = {"rk": True, "up": True, "clientPin": self._pin.pin_is_set}
        if self._uv_via_policy:
            options["uv"] = True
        return GetInfoResponse(
            versions=("FIDO_2_0",),
            aaguid=self._aaguid,
            options=options,
            max_msg_size=MAX_PAYLOAD,
            pin_protocols=(1,),
            algorithms=tuple(
                CredentialParameter(PUBLIC_KEY_TYPE, alg) for alg in self._providers.algorithms()
            ),
        )

    # -- makeCredential -------------------------------------------------------

    def _select_algorithm(self, cred_params) -> int:
        for param in cred_params:
            if param.type == PUBLIC_KEY_TYPE and self._providers.supports(param.alg):
                return param.alg
        raise CtapError(CtapStatus.UNSUPPORTED_ALGORITHM, "no requested algorithm is available")

    def _check_exclude_list(self, params: MakeCredentialParameters) -> None:
        if not params.exclude_list:
            return
        stored_ids = {
            s.credential_id for s in self._store.get_credential_sources(params.rp.id)
        }
        for descriptor in params.exclude_list:
            if descriptor.id in stored_ids:
                raise CtapError(CtapStatus.CREDENTIAL_EXCLUDED)
            if self._unwrap_credential_id(descriptor.id, params.rp.id) is not None:
                raise CtapError(CtapStatus.CREDENTIAL_EXCLUDED)

    def _maybe_verify_user(self, options: dict, ctx, request: ApprovalRequest) -> int:
        """Handle an explicit uv option; returns the extra flag bits."""
        if not options.get("uv"):
            return 0
        if not self._uv_via_policy:
            raise CtapError(CtapStatus.INVALID_PARAMETER, "uv option is not supported")
        if not self._policy.verification(request, ctx):
            raise CtapError(CtapStatus.OPERATION_DENIED, "user verification denied")
        return FLAG_UV

    def _make_credential(self, params: MakeCredentialParameters, ctx, keepalive) -> MakeCredentialResponse:
        self._check_exclude_list(params)
        alg = self._select_algorithm(params.cred_params)
        uv = self._check_pin_auth(params.pin_auth, params.pin_protocol, params.client_data_hash)
        request = ApprovalRequest("makeCredential", params.rp.id, params.user.name)
        flags = FLAG_UP | FLAG_AT | (FLAG_UV if uv else 0)
        flags |= self._maybe_verify_user(params.options, ctx, request)
        self._require_presence(ctx, keepalive, request)

        provider = self._providers.get(alg)
        pair = provider.create_keypair()
        counter = self._store.increment_counter()
        resident = params.options.get("rk", self._resident_default)
        if resident:
            credential_id = self._rng.bytes(RESIDENT_CREDENTIAL_ID_SIZE)
            source = CredentialSource(
                credential_id=credential_id,
                key_handle=pair.private.get_encoded(),
                alg=alg,
                rp_id=params.rp.id,
                rp_name=params.rp.name,
                user=params.user,
                created=counter,
            )
            self._store.add_credential_source(params.rp.id, source)
        else:
            source = CredentialSource(
                credential_id=b"",
                key_handle=pair.private.get_encoded(),
                alg=alg,
                rp_id=params.rp.id,
                rp_name=params.rp.name,
                user=params.user,
                created=counter,
            )
            credential_id = self._wrapper().wrap(source.to_bytes())

        attested = (
            self._aaguid
            + len(credential_id).to_bytes(2, "big")
            + credential_id
            + cbor.encode(pair.public.cose())
        )
        auth_data = build_auth_data(params.rp.id, flags, counter, attested)
        signature = pair.private.sign(auth_data + params.client_data_hash)
        return MakeCredentialResponse("packed", auth_data, {"alg": alg, "sig": signature})

    # -- getAssertion -----------------------------------------------------------

    def _collect_candidates(self, params: GetAssertionParameters) -> list[tuple[CredentialSource, bool]]:
        allow_ids = [d.id for d in params.allow_list] if params.allow_list is not None else None
        resident = self._store.get_credential_sources(params.rp_id, allow_ids)
        candidates = [(source, True) for source in resident]
        if params.allow_list:
            for descriptor in params.allow_list:
                source = self._unwrap_credential_id(descriptor.id, params.rp_id)
                if source is not None:
                    candidates.append((source, False))
        candidates.sort(key=lambda item: item[0].created, reverse=True)
        return candidates

    def _sign_assertion(self, source: CredentialSource, resident: bool, flags: int,
                        client_data_hash: bytes, include_count: int | None) -> GetAssertionResponse:
        counter = self._store.increment_counter()
        auth_data = build_auth_data(source.rp_id, flags, counter)
        private = self._load_private(source)
        signature = private.sign(auth_data + client_data_hash)
        return GetAssertionResponse(
            credential=CredentialDescriptor(PUBLIC_KEY_TYPE, source.credential_id),
            auth_data=auth_data,
            signature=signature,
            user=source.user if resident else None,
            number_of_credentials=include_count,
        )

    def _get_assertion(self, params: GetAssertionParameters, ctx, keepalive) -> GetAssertionResponse:
        candidates = self._collect_candidates(params)
        if not candidates:
            raise CtapError(CtapStatus.NO_CREDENTIALS)
        uv = False
        if params.pin_auth is not None:
            uv = self._check_pin_auth(params.pin_auth, params.pin_protocol, params.client_data_hash)
        request = ApprovalRequest("getAssertion", params.rp_id)
        flags = FLAG_UV if uv else 0
        flags |= self._maybe_verify_user(params.options, ctx, request)
        if params.options.get("up", True):
            self._require_presence(ctx, keepalive, request)
            flags |= FLAG_UP

        source, resident = candidates[0]
        count = len(candidates)
        self._iteration = _IterationState(candidates[1:], params.client_data_hash, flags)
        return self._sign_assertion(
            source, resident, flags, params.client_data_hash, count if count > 1 else None
        )

    def _get_next_assertion(self, params, ctx, keepalive) -> GetAssertionResponse:
        state = self._iteration
        if state is None or not state.remaining or state.expired(self._iteration_timeout):
            self._iteration = None
            raise CtapError(CtapStatus.NOT_ALLOWED)
        source, resident = state.remaining.pop(0)
        return self._sign_assertion(source, resident, state.flags, state.client_data_hash, None)

    # -- clientPIN / reset --------------------------------------------------------

    def _client_pin(self, params, ctx, keepalive):
        return self._pin.handle(params)

    def _reset(self, params, ctx, keepalive) -> ResetResponse:
        self._require_presence(ctx, keepalive, ApprovalRequest("reset"))
        self._store.reset_document()
        self._pin.forget()
        self._iteration = None
        return ResetResponse()
