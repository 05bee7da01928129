"""LLM-provider front door.

Verifies presented tokens, enforces the constraints embedded in them,
blocks replays, streams mock completions, and reports each finished
request back to the issuing backend via its callback URL.

Besides the token-verifying mode this gateway also models the two baseline
credential schemes used for comparison runs:

  - "static": long-lived opaque bearer keys mapped to a model allowlist;
    no integrity protection, no expiry, no budget enforcement.
  - "zhipu": server-issued signed expiring tokens whose embedded
    model/max_tokens constraints are deliberately ignored (expiry and
    signature still checked, tokens reusable until expiry).
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional

from .engine import MockEngine, UnknownModel, count_prompt_tokens
from .httpio import ByteCounter, HttpService, JsonResponse, StreamResponse, TransportError, request_json
from .tokens import (
    Credential,
    DynasealClaims,
    TokenError,
    VerificationPolicy,
    parse_unverified,
    verify_token,
)

log = logging.getLogger("dynaseal.gateway")

CALLBACK_AUTH_HEADER = "X-Dynaseal-Callback-Auth"
CALLBACK_RETRY_DELAYS = (0.2, 0.4, 0.8)


class GatewayError(Exception):
    code = "gateway_error"
    http_status = 500

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class UnknownIssuer(GatewayError):
    code = "unknown_issuer"
    http_status = 401


class ReplayDetected(GatewayError):
    code = "replay_detected"
    http_status = 401


class ModelMismatch(GatewayError):
    code = "model_mismatch"
    http_status = 403


class TokenBudgetExceeded(GatewayError):
    code = "token_budget_exceeded"
    http_status = 403


class EngineFailure(GatewayError):
    code = "engine_failure"
    http_status = 502


class InvalidInvocation(GatewayError):
    code = "invalid_request"
    http_status = 400


# Token-core failures surface as 401s with the token error's own code.
_TOKEN_ERROR_STATUS = 401


class KeyRegistry:
    """user_id -> secret_key mapping provisioned from provider config.

    Lookups fail closed: an unknown user_id raises UnknownIssuer.
    """

    def __init__(self, credentials: Optional[dict[str, bytes]] = None):
        self._keys: dict[str, bytes] = dict(credentials or {})

    def add(self, credential: Credential) -> None:
        credential.validate()
        self._keys[credential.user_id] = bytes(credential.secret_key)

    def lookup(self, user_id: str) -> Credential:
        try:
            return Credential(user_id=user_id, secret_key=self._keys[user_id])
        except KeyError:
            raise UnknownIssuer(f"no key registered for issuer {user_id!r}") from None

    def __len__(self):
        return len(self._keys)


class ReplayCache:
    """Set of seen jtis with expiry horizons and atomic insert-if-absent.

    An entry lives until its horizon (token exp + leeway) passes; evicting
    it then can never enable a replay because the token itself is already
    unacceptably old.
    """

    def __init__(self):
        self._seen: dict[str, float] = {}
        self._lock = threading.Lock()

    def insert_if_absent(self, jti: str, horizon: float, now: float) -> bool:
        """True if jti was fresh and is now recorded; False if already present."""
        with self._lock:
            self._sweep_locked(now)
            if jti in self._seen:
                return False
            self._seen[jti] = horizon
            return True

    def sweep(self, now: float) -> int:
        with self._lock:
            return self._sweep_locked(now)

    def _sweep_locked(self, now: float) -> int:
        dead = [j for j, h in self._seen.items() if h < now]
        for j in dead:
            del self._seen[j]
        return len(dead)

    def __contains__(self, jti: str) -> bool:
        with self._lock:
            return jti in self._seen

    def __len__(self):
        with self._lock:
            return len(self._seen)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int

    def to_dict(self) -> dict:
        return {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens}


_ROLES = {"system", "user", "assistant"}


@dataclass
class InvocationRequest:
    """Chat request body: model, messages, optional cap, stream flag."""

    model: str
    messages: list
    max_tokens: Optional[int] = None
    stream: bool = False

    @classmethod
    def from_wire(cls, obj: Any) -> "InvocationRequest":
        if not isinstance(obj, dict):
            raise InvalidInvocation("request body must be a JSON object")
        model = obj.get("model")
        messages = obj.get("messages")
        if not isinstance(model, str) or not model:
            raise InvalidInvocation("model must be a non-empty string")
        if not isinstance(messages, list) or not messages:
            raise InvalidInvocation("messages must be a non-empty list")
        for m in messages:
            if not isinstance(m, dict) or m.get("role") not in _ROLES or not isinstance(m.get("content"), str):
                raise InvalidInvocation("each message needs role in {system,user,assistant} and string content")
        max_tokens = obj.get("max_tokens")
        if max_tokens is not None:
            if not isinstance(max_tokens, int) or isinstance(max_tokens, bool) or max_tokens < 1:
                raise InvalidInvocation("max_tokens must be a positive integer")
        stream = obj.get("stream", False)
        if not isinstance(stream, bool):
            raise InvalidInvocation("stream must be a boolean")
        return cls(model=model, messages=messages, max_tokens=max_tokens, stream=stream)


@dataclass(frozen=True)
class InvocationResponse:
    id: str
    model: str
    content: str
    usage: Usage
    finish_reason: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "model": self.model,
            "choices": [{"content": self.content}],
            "usage": self.usage.to_dict(),
            "finish_reason": self.finish_reason,
        }


@dataclass
class GatewayConfig:
    credentials: list  # list[Credential]
    served_models: tuple
    callback_auth_secret: str
    clock_leeway: float = 0.5
    mode: str = "dynaseal"  # dynaseal | static | zhipu
    static_keys: dict = field(default_factory=dict)  # opaque key -> list of allowed models
    engine_seed: int = 0
    natural_min: int = 4
    natural_max: int = 48
    response_delay: float = 0.0
    stream_chunk_delay: float = 0.0
    listen: str = "127.0.0.1:0"

    def __post_init__(self):
        if self.mode not in ("dynaseal", "static", "zhipu"):
            raise ValueError(f"unknown gateway mode {self.mode!r}")


def _error_body(code: str, message: str) -> dict:
    return {"error": {"code": code, "message": message}}


class GatewayService(HttpService):
    """The provider gateway behind POST /v1/chat/completions."""

    def __init__(
        self,
        config: GatewayConfig,
        clock: Callable[[], float] = time.time,
        front_counter: Optional[ByteCounter] = None,
        callback_counter: Optional[ByteCounter] = None,
        meta_counter: Optional[ByteCounter] = None,
    ):
        self.config = config
        self.clock = clock
        self.registry = KeyRegistry()
        for cred in config.credentials:
            self.registry.add(cred)
        self.replay = ReplayCache()
        self.engine = MockEngine(
            config.served_models,
            seed=config.engine_seed,
            natural_min=config.natural_min,
            natural_max=config.natural_max,
        )
        self.policy = VerificationPolicy(clock_leeway=config.clock_leeway, now=clock)
        self.response_delay = config.response_delay
        self._front_counter = front_counter
        self._callback_counter = callback_counter
        self._meta_counter = meta_counter
        self._stats_lock = threading.Lock()
        self.stats = {
            "authorize_ok": 0,
            "responses": 0,
            "callbacks_delivered": 0,
            "callbacks_abandoned": 0,
            "rejections": {},
        }
        self._callback_threads: list[threading.Thread] = []

    # -- accounting --------------------------------------------------------

    def counter_for(self, path: str) -> Optional[ByteCounter]:
        if path.startswith("/v1/chat"):
            return self._front_counter
        return self._meta_counter

    def _count_rejection(self, code: str) -> None:
        with self._stats_lock:
            self.stats["rejections"][code] = self.stats["rejections"].get(code, 0) + 1

    # -- authorization -----------------------------------------------------

    def authorize(self, compact_token: str, request: InvocationRequest, now: Optional[float] = None) -> DynasealClaims:
        """Full verification pipeline for one presented token.

        Order is fixed: parse, key lookup, signature/freshness, replay,
        model constraint, budget constraint. The replay insert happens
        only after the signature is known good, so forged jtis can never
        poison the cache.
        """
        now = self.clock() if now is None else now
        _header, unverified = parse_unverified(compact_token)
        credential = self.registry.lookup(unverified.api_key)
        policy = VerificationPolicy(clock_leeway=self.policy.clock_leeway, now=lambda: now)
        claims = verify_token(compact_token, credential, policy)
        horizon = claims.exp + policy.clock_leeway
        if not self.replay.insert_if_absent(claims.jti, horizon, now):
            raise ReplayDetected(f"jti {claims.jti} was already used")
        if request.model != claims.model:
            raise ModelMismatch(f"token authorizes {claims.model!r}, request asked for {request.model!r}")
        if request.max_tokens is not None and request.max_tokens > claims.max_tokens:
            raise TokenBudgetExceeded(f"request cap {request.max_tokens} exceeds token budget {claims.max_tokens}")
        with self._stats_lock:
            self.stats["authorize_ok"] += 1
        return claims

    # -- static / zhipu baseline authorization ------------------------------

    def _authorize_static(self, bearer: str, request: InvocationRequest) -> None:
        allowed = self.config.static_keys.get(bearer)
        if allowed is None:
            raise UnknownIssuer("unknown static key")
        if request.model not in allowed:
            raise ModelMismatch(f"key is not provisioned for model {request.model!r}")

    def _authorize_zhipu(self, compact_token: str) -> DynasealClaims:
        _header, unverified = parse_unverified(compact_token)
        credential = self.registry.lookup(unverified.api_key)
        # Signature and freshness only; embedded constraints are ignored
        # and the token stays valid for reuse until it expires.
        return verify_token(compact_token, credential, self.policy)

    # -- generation ---------------------------------------------------------

    def invoke(self, claims: Optional[DynasealClaims], request: InvocationRequest) -> InvocationResponse:
        """Run the engine under the effective cap and assemble the response."""
        parts: list[str] = []
        usage, finish = self._run_engine(claims, request, parts.append)
        return self._response(claims, request, "".join(parts), usage, finish)

    def _effective_max(self, claims: Optional[DynasealClaims], request: InvocationRequest) -> Optional[int]:
        caps = [c for c in (claims.max_tokens if claims else None, request.max_tokens) if c is not None]
        return min(caps) if caps else None

    def _run_engine(self, claims, request, emit: Callable[[str], None]) -> tuple[Usage, str]:
        cap = self._effective_max(claims, request)
        natural = self.engine.natural_length(request.model, request.messages)
        emitted = 0
        try:
            for chunk in self.engine.generate(request.model, request.messages, cap):
                emit(chunk)
                emitted += 1
        except UnknownModel:
            raise
        except Exception as e:
            raise EngineFailure(str(e)) from e
        finish = "length" if cap is not None and natural > cap else "stop"
        usage = Usage(prompt_tokens=count_prompt_tokens(request.messages), completion_tokens=emitted)
        if claims is not None and usage.completion_tokens > claims.max_tokens:
            raise EngineFailure("generated past the token budget")
        return usage, finish

    def _response(self, claims, request, content, usage, finish) -> InvocationResponse:
        with self._stats_lock:
            self.stats["responses"] += 1
        return InvocationResponse(
            id=claims.jti if claims else "static",
            model=request.model,
            content=content,
            usage=usage,
            finish_reason=finish,
        )

    # -- callback dispatch ---------------------------------------------------

    def dispatch_callback(self, claims: DynasealClaims, response: InvocationResponse) -> threading.Thread:
        """Fire the completion report toward the issuer, off the request path.

        Retries on connection failure or 5xx with 0.2/0.4/0.8s backoff
        (three retry attempts after the initial try). Delivery failure is
        logged and never affects the response already sent to the edge.
        """
        notification = {
            "jti": claims.jti,
            "model": response.model,
            "usage": response.usage.to_dict(),
            "finish_reason": response.finish_reason,
            "response_content": response.content,
            "completed_at": int(self.clock()),
        }
        t = threading.Thread(target=self._deliver, args=(claims.callback_url, notification), daemon=True)
        with self._stats_lock:
            self._callback_threads = [x for x in self._callback_threads if x.is_alive()]
            self._callback_threads.append(t)
        t.start()
        return t

    def _deliver(self, url: str, notification: dict) -> None:
        headers = {CALLBACK_AUTH_HEADER: self.config.callback_auth_secret}
        attempts = 1 + len(CALLBACK_RETRY_DELAYS)
        for attempt in range(attempts):
            if attempt:
                time.sleep(CALLBACK_RETRY_DELAYS[attempt - 1])
            try:
                reply = request_json(url, payload=notification, headers=headers,
                                     counter=self._callback_counter, timeout=5.0)
            except TransportError as e:
                log.warning("callback attempt %d to %s failed: %s", attempt + 1, url, e)
                continue
            if reply.status >= 500:
                log.warning("callback attempt %d to %s got %d", attempt + 1, url, reply.status)
                continue
            with self._stats_lock:
                self.stats["callbacks_delivered"] += 1
            log.info("callback for %s delivered (status %d)", notification["jti"], reply.status)
            return
        with self._stats_lock:
            self.stats["callbacks_abandoned"] += 1
        log.error("callback for %s abandoned after %d attempts", notification["jti"], attempts)

    def drain_callbacks(self, timeout: float = 10.0) -> None:
        """Wait for all callback deliveries started so far (used by harnesses)."""
        deadline = time.monotonic() + timeout
        with self._stats_lock:
            threads = list(self._callback_threads)
        for t in threads:
            t.join(timeout=max(0.0, deadline - time.monotonic()))

    # -- HTTP surface --------------------------------------------------------

    def handle(self, method: str, path: str, headers, body: bytes):
        if method == "GET" and path == "/healthz":
            return JsonResponse(200, {"status": "ok", "mode": self.config.mode})
        if method == "GET" and path == "/v1/stats":
            with self._stats_lock:
                stats = json.loads(json.dumps(self.stats))
            stats["engine_calls"] = self.engine.calls
            stats["replay_cache_size"] = len(self.replay)
            return JsonResponse(200, stats)
        if method == "POST" and path == "/v1/chat/completions":
            return self._handle_chat(headers, body)
        return JsonResponse(404, _error_body("not_found", f"no route for {method} {path}"))

    def _bearer(self, headers) -> Optional[str]:
        auth = headers.get("Authorization") or ""
        parts = auth.split(None, 1)
        if len(parts) == 2 and parts[0].lower() == "bearer" and parts[1].strip():
            return parts[1].strip()
        return None

    def _handle_chat(self, headers, body: bytes):
        try:
            request = InvocationRequest.from_wire(json.loads(body.decode() or "null"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            self._count_rejection("invalid_request")
            return JsonResponse(400, _error_body("invalid_request", "body is not valid JSON"))
        except InvalidInvocation as e:
            self._count_rejection(e.code)
            return JsonResponse(e.http_status, _error_body(e.code, str(e)))

        bearer = self._bearer(headers)
        if bearer is None:
            self._count_rejection("malformed")
            return JsonResponse(401, _error_body("malformed", "missing bearer credential"))

        claims: Optional[DynasealClaims] = None
        try:
            if self.config.mode == "dynaseal":
                claims = self.authorize(bearer, request)
            elif self.config.mode == "zhipu":
                self._authorize_zhipu(bearer)
            else:
                self._authorize_static(bearer, request)
        except UnknownIssuer as e:
            # Indistinguishable on the wire from a bad signature so that
            # probing tokens cannot enumerate which issuer ids exist; the
            # distinct code lives only in logs and stats.
            self._count_rejection(e.code)
            log.info("rejected token: unknown_issuer (%s)", e)
            return JsonResponse(401, _error_body("bad_signature", "MAC mismatch"))
        except TokenError as e:
            self._count_rejection(e.code)
            log.info("rejected token: %s (%s)", e.code, e)
            # This gateway's wire format fixes the header bit-exactly, so a
            # token declaring any other algorithm is malformed here; the
            # distinct alg_rejected code stays in logs and stats.
            wire_code = "malformed" if e.code == "alg_rejected" else e.code
            return JsonResponse(_TOKEN_ERROR_STATUS, _error_body(wire_code, str(e)))
        except GatewayError as e:
            self._count_rejection(e.code)
            log.info("rejected request: %s (%s)", e.code, e)
            return JsonResponse(e.http_status, _error_body(e.code, str(e)))

        try:
            if request.stream:
                return self._stream_chat(claims, request)
            response = self.invoke(claims, request)
        except UnknownModel as e:
            self._count_rejection(e.code)
            return JsonResponse(404, _error_body(e.code, str(e)))
        except EngineFailure as e:
            self._count_rejection(e.code)
            return JsonResponse(e.http_status, _error_body(e.code, str(e)))

        if claims is not None:
            self.dispatch_callback(claims, response)
        return JsonResponse(200, response.to_dict())

    def _stream_chat(self, claims: Optional[DynasealClaims], request: InvocationRequest) -> StreamResponse:
        cap = self._effective_max(claims, request)
        # Raises UnknownModel before any stream bytes go out.
        natural = self.engine.natural_length(request.model, request.messages)
        prompt_tokens = count_prompt_tokens(request.messages)
        state = {"emitted": 0, "parts": []}
        chunks = self.engine.generate(request.model, request.messages, cap)

        def lines() -> Iterator[str]:
            for chunk in chunks:
                state["parts"].append(chunk)
                state["emitted"] += 1
                yield json.dumps({"delta": chunk}, separators=(",", ":"))
            finish = "length" if cap is not None and natural > cap else "stop"
            usage = Usage(prompt_tokens, state["emitted"])
            tail = {"usage": usage.to_dict(), "finish_reason": finish, "id": claims.jti if claims else "static"}
            yield json.dumps(tail, separators=(",", ":"))

        def on_complete(aborted: bool) -> None:
            emitted = state["emitted"]
            finish = "length" if cap is not None and emitted == cap and natural > cap else "stop"
            usage = Usage(prompt_tokens, emitted)
            response = self._response(claims, request, "".join(state["parts"]), usage, finish)
            if aborted:
                log.info("client disconnected after %d chunks of %s", emitted, response.id)
            if claims is not None:
                self.dispatch_callback(claims, response)

        return StreamResponse(200, lines(), on_complete=on_complete, chunk_delay=self.config.stream_chunk_delay)
