"""Backend server: mints tokens for edge devices, receives provider
callbacks, and keeps a request-lifecycle ledger.

The backend holds the provider-issued credential. Devices never see it;
they authenticate to the backend with their own per-device secret and get
short-lived signed tokens scoped to one model and one token budget.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .gateway import CALLBACK_AUTH_HEADER, Usage
from .httpio import ByteCounter, HttpService, JsonResponse
from .tokens import DEFAULT_MAX_TTL, Credential, DynasealClaims, sign_token

log = logging.getLogger("dynaseal.backend")

ISSUED = "ISSUED"
COMPLETED = "COMPLETED"
EXPIRED = "EXPIRED"


class BackendError(Exception):
    code = "backend_error"
    http_status = 500

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class ModelNotAllowed(BackendError):
    code = "model_not_allowed"
    http_status = 403


class RateLimited(BackendError):
    code = "rate_limited"
    http_status = 429


class InvalidRequest(BackendError):
    code = "invalid_request"
    http_status = 400


class BadDeviceAuth(BackendError):
    code = "bad_device_auth"
    http_status = 401


class UnknownJti(BackendError):
    code = "unknown_jti"
    http_status = 404


class BadCallbackAuth(BackendError):
    code = "bad_callback_auth"
    http_status = 401


class StateConflict(BackendError):
    code = "state_conflict"
    http_status = 409


@dataclass
class IssuePolicy:
    """Business policy applied to every token issue.

    allowed_models maps a device class to the model names that class may
    request. token_ttl is the claim lifetime in whole seconds (the
    protocol wants ~1s in production; tests default to 5 via config).
    """

    allowed_models: dict  # device class -> set of model names
    max_tokens_ceiling: int = 128
    token_ttl: int = 1
    per_device_rate: int = 600  # issues per device per minute

    def __post_init__(self):
        if self.max_tokens_ceiling < 1:
            raise ValueError("max_tokens_ceiling must be >= 1")
        if self.token_ttl < 1:
            raise ValueError("token_ttl must be >= 1 second")
        if self.token_ttl > DEFAULT_MAX_TTL:
            raise ValueError(f"token_ttl must not exceed the token-format ceiling of {DEFAULT_MAX_TTL}s")

    @property
    def grace(self) -> int:
        # Callbacks may land after exp: generation outlives the token's
        # validity for invocation, not for fulfillment.
        return self.token_ttl


@dataclass
class DeviceAccount:
    device_id: str
    secret: str
    device_class: str = "default"


@dataclass
class LedgerEntry:
    jti: str
    device_id: str
    issued_at: int
    exp: int
    model: str
    max_tokens: int
    state: str = ISSUED
    usage: Optional[Usage] = None
    response_digest: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "jti": self.jti,
            "device_id": self.device_id,
            "issued_at": self.issued_at,
            "exp": self.exp,
            "model": self.model,
            "max_tokens": self.max_tokens,
            "state": self.state,
        }
        if self.usage is not None:
            d["usage"] = self.usage.to_dict()
        if self.response_digest is not None:
            d["response_digest"] = self.response_digest
        return d


class Ledger:
    """Request-lifecycle ledger: ISSUED -> COMPLETED | EXPIRED, nothing else.

    Backed by an append-only JSON-lines event file with an in-memory
    index; events replay on load. All transitions are atomic per jti.
    """

    def __init__(self, path: Optional[str] = None):
        self._entries: dict[str, LedgerEntry] = {}
        self._lock = threading.Lock()
        self._path = Path(path) if path else None
        self._fh = None
        if self._path is not None:
            if self._path.exists():
                self._replay()
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self._path.open("a", encoding="utf-8")

    def _replay(self) -> None:
        with self._path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                self._apply(json.loads(line))

    def _apply(self, event: dict) -> None:
        kind = event["event"]
        if kind == "issued":
            self._entries[event["jti"]] = LedgerEntry(
                jti=event["jti"],
                device_id=event["device_id"],
                issued_at=event["issued_at"],
                exp=event["exp"],
                model=event["model"],
                max_tokens=event["max_tokens"],
            )
        elif kind == "completed":
            e = self._entries[event["jti"]]
            e.state = COMPLETED
            e.usage = Usage(**event["usage"])
            e.response_digest = event["response_digest"]
        elif kind == "expired":
            self._entries[event["jti"]].state = EXPIRED

    def _append(self, event: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(event, separators=(",", ":")) + "\n")
            self._fh.flush()

    def record_issued(self, entry: LedgerEntry) -> None:
        with self._lock:
            if entry.jti in self._entries:
                raise StateConflict(f"jti {entry.jti} already issued")
            self._entries[entry.jti] = entry
            self._append({"event": "issued", **entry.to_dict()})

    def complete(self, jti: str, usage: Usage, response_digest: str) -> str:
        """Apply a completion. Returns "new" on transition, "duplicate" when
        the identical completion was already applied."""
        with self._lock:
            entry = self._entries.get(jti)
            if entry is None:
                raise UnknownJti(f"jti {jti} was never issued")
            if entry.state == COMPLETED:
                if entry.usage == usage:
                    return "duplicate"
                raise StateConflict("duplicate delivery with different usage")
            if entry.state == EXPIRED:
                raise StateConflict("entry already expired")
            if usage.completion_tokens > entry.max_tokens:
                raise InvalidRequest("completion_tokens exceeds the issued budget")
            entry.state = COMPLETED
            entry.usage = usage
            entry.response_digest = response_digest
            self._append({"event": "completed", "jti": jti, "usage": usage.to_dict(),
                          "response_digest": response_digest})
            return "new"

    def expire_due(self, now: float, grace: float) -> int:
        """ISSUED entries whose exp + grace has passed become EXPIRED."""
        count = 0
        with self._lock:
            for entry in self._entries.values():
                if entry.state == ISSUED and entry.exp + grace < now:
                    entry.state = EXPIRED
                    self._append({"event": "expired", "jti": entry.jti})
                    count += 1
        return count

    def get(self, jti: str) -> Optional[LedgerEntry]:
        with self._lock:
            return self._entries.get(jti)

    def entries(self) -> list:
        with self._lock:
            return [LedgerEntry(**{**e.__dict__}) for e in self._entries.values()]

    def counts(self) -> dict:
        with self._lock:
            out = {ISSUED: 0, COMPLETED: 0, EXPIRED: 0}
            for e in self._entries.values():
                out[e.state] += 1
            return out

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass(frozen=True)
class CallbackNotification:
    """Provider -> backend completion report for one token's request."""

    jti: str
    model: str
    usage: Usage
    finish_reason: str
    response_content: str
    completed_at: int

    @classmethod
    def from_wire(cls, obj) -> "CallbackNotification":
        if not isinstance(obj, dict):
            raise InvalidRequest("callback body must be a JSON object")
        try:
            usage_obj = obj["usage"]
            notification = cls(
                jti=obj["jti"],
                model=obj["model"],
                usage=Usage(prompt_tokens=usage_obj["prompt_tokens"],
                            completion_tokens=usage_obj["completion_tokens"]),
                finish_reason=obj["finish_reason"],
                response_content=obj["response_content"],
                completed_at=obj["completed_at"],
            )
        except (KeyError, TypeError) as e:
            raise InvalidRequest(f"callback body is missing fields: {e}") from None
        if notification.finish_reason not in ("stop", "length"):
            raise InvalidRequest("finish_reason must be stop or length")
        for n in (notification.usage.prompt_tokens, notification.usage.completion_tokens):
            if not isinstance(n, int) or isinstance(n, bool) or n < 0:
                raise InvalidRequest("usage counts must be non-negative integers")
        return notification


@dataclass
class BackendConfig:
    credential: Credential
    callback_auth_secret: str
    policy: IssuePolicy
    devices: dict  # device_id -> DeviceAccount
    callback_url: str = ""  # what gets embedded in tokens; set after bind when empty
    ledger_path: Optional[str] = None
    listen: str = "127.0.0.1:0"


class BackendService(HttpService):
    """Token issuance, callback intake, and the lifecycle ledger."""

    def __init__(
        self,
        config: BackendConfig,
        clock: Callable[[], float] = time.time,
        edge_counter: Optional[ByteCounter] = None,
        callback_counter: Optional[ByteCounter] = None,
        meta_counter: Optional[ByteCounter] = None,
    ):
        config.credential.validate()
        self.config = config
        self.clock = clock
        self.ledger = Ledger(config.ledger_path)
        self._edge_counter = edge_counter
        self._callback_counter = callback_counter
        self._meta_counter = meta_counter
        self._issue_lock = threading.Lock()
        self._issue_times: dict[str, deque] = {}

    # -- accounting ---------------------------------------------------------

    def counter_for(self, path: str) -> Optional[ByteCounter]:
        if path.startswith("/v1/callback"):
            return self._callback_counter
        if path.startswith("/v1/token"):
            return self._edge_counter
        return self._meta_counter

    # -- issuance -----------------------------------------------------------

    def _new_jti(self) -> str:
        return str(uuid.uuid4())

    def _check_rate(self, device_id: str, now: float) -> None:
        with self._issue_lock:
            times = self._issue_times.setdefault(device_id, deque())
            while times and times[0] <= now - 60.0:
                times.popleft()
            if len(times) >= self.config.policy.per_device_rate:
                raise RateLimited(f"device {device_id} exceeded {self.config.policy.per_device_rate}/min")
            times.append(now)

    def issue_token(self, device_id: str, requested_model: str, requested_max_tokens: int) -> tuple[str, int]:
        """Mint a token for an authenticated device. Returns (compact, exp)."""
        policy = self.config.policy
        device = self.config.devices.get(device_id)
        if device is None:
            raise BadDeviceAuth(f"unknown device {device_id!r}")
        if not isinstance(requested_max_tokens, int) or isinstance(requested_max_tokens, bool) \
                or requested_max_tokens < 1:
            raise InvalidRequest("max_tokens must be a positive integer")
        allowed = policy.allowed_models.get(device.device_class, set())
        if requested_model not in allowed:
            raise ModelNotAllowed(f"model {requested_model!r} is not allowed for class {device.device_class!r}")
        now = self.clock()
        self._check_rate(device_id, now)
        iat = int(now)
        claims = DynasealClaims(
            api_key=self.config.credential.user_id,
            model=requested_model,
            max_tokens=min(requested_max_tokens, policy.max_tokens_ceiling),
            iat=iat,
            exp=iat + policy.token_ttl,
            jti=self._new_jti(),
            callback_url=self.config.callback_url,
            device_id=device_id,
        )
        token = sign_token(claims, self.config.credential)
        self.ledger.record_issued(LedgerEntry(
            jti=claims.jti,
            device_id=device_id,
            issued_at=iat,
            exp=claims.exp,
            model=claims.model,
            max_tokens=claims.max_tokens,
        ))
        log.info("issued %s for device %s model %s cap %d", claims.jti, device_id, claims.model, claims.max_tokens)
        return token.compact_form, claims.exp

    # -- callbacks ------------------------------------------------------------

    def handle_callback(self, notification: CallbackNotification, auth: Optional[str]) -> dict:
        """Apply a completion report. Idempotent for identical redeliveries."""
        if not auth or not hmac.compare_digest(auth, self.config.callback_auth_secret):
            raise BadCallbackAuth("callback auth header missing or wrong")
        digest = hashlib.sha256(notification.response_content.encode()).hexdigest()
        outcome = self.ledger.complete(notification.jti, notification.usage, digest)
        log.info("callback for %s: %s", notification.jti, outcome)
        return {"status": "ok", "duplicate": outcome == "duplicate"}

    # -- expiry sweep -----------------------------------------------------------

    def sweep_expired(self, now: Optional[float] = None) -> int:
        now = self.clock() if now is None else now
        return self.ledger.expire_due(now, self.config.policy.grace)

    # -- HTTP surface -------------------------------------------------------------

    def handle(self, method: str, path: str, headers, body: bytes):
        if method == "GET" and path == "/healthz":
            return JsonResponse(200, {"status": "ok"})
        if method == "GET" and path == "/v1/ledger":
            return JsonResponse(200, {"entries": [e.to_dict() for e in self.ledger.entries()],
                                      "counts": self.ledger.counts()})
        if method == "GET" and path.startswith("/v1/ledger/"):
            entry = self.ledger.get(path.rsplit("/", 1)[1])
            if entry is None:
                return JsonResponse(404, {"error": "unknown_jti"})
            return JsonResponse(200, entry.to_dict())
        if method == "POST" and path == "/v1/sweep":
            return JsonResponse(200, {"expired": self.sweep_expired()})
        if method == "POST" and path == "/v1/token":
            return self._handle_issue(headers, body)
        if method == "POST" and path == "/v1/callback":
            return self._handle_callback(headers, body)
        return JsonResponse(404, {"error": "not_found"})

    def _device_auth_ok(self, device_id: str, headers) -> bool:
        device = self.config.devices.get(device_id)
        if device is None:
            return False
        auth = (headers.get("Authorization") or "").split(None, 1)
        return len(auth) == 2 and auth[0].lower() == "bearer" and hmac.compare_digest(auth[1], device.secret)

    def _handle_issue(self, headers, body: bytes):
        try:
            obj = json.loads(body.decode() or "null")
        except (json.JSONDecodeError, UnicodeDecodeError):
            return JsonResponse(400, {"error": "invalid_request"})
        if not isinstance(obj, dict) or not isinstance(obj.get("device_id"), str):
            return JsonResponse(400, {"error": "invalid_request"})
        device_id = obj["device_id"]
        if not self._device_auth_ok(device_id, headers):
            return JsonResponse(401, {"error": "bad_device_auth"})
        try:
            token, exp = self.issue_token(device_id, obj.get("model"), obj.get("max_tokens"))
        except BackendError as e:
            return JsonResponse(e.http_status, {"error": e.code})
        return JsonResponse(200, {"token": token, "expires_at": exp})

    def _handle_callback(self, headers, body: bytes):
        try:
            notification = CallbackNotification.from_wire(json.loads(body.decode() or "null"))
            result = self.handle_callback(notification, headers.get(CALLBACK_AUTH_HEADER))
        except (json.JSONDecodeError, UnicodeDecodeError):
            return JsonResponse(400, {"error": "invalid_request"})
        except BackendError as e:
            return JsonResponse(e.http_status, {"error": e.code})
        return JsonResponse(200, result)

    def close(self) -> None:
        self.ledger.close()
