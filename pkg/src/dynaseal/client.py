"""Edge-device client: fetch a token from the backend, spend it at the gateway.

The defining property of this client is what it does NOT hold: there is no
field anywhere in its configuration for the provider credential. The only
secret it knows is its own device secret for talking to the backend.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields
from typing import Optional
from urllib.parse import urlparse

from .gateway import InvocationResponse, Usage
from .httpio import ByteCounter, TransportError, request_json, request_stream

log = logging.getLogger("dynaseal.client")


class ClientError(Exception):
    pass


class BackendUnavailable(ClientError):
    pass


class IssueRefused(ClientError):
    def __init__(self, reason: str):
        super().__init__(f"backend refused to issue a token: {reason}")
        self.reason = reason


class GatewayRejected(ClientError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"gateway rejected request: {code} {message}".strip())
        self.code = code


# Gateway error codes where a single transparent re-issue makes sense: the
# token aged out between issue and use. Everything else is not retryable.
_RETRYABLE = {"expired"}


@dataclass(frozen=True)
class EdgeConfig:
    backend_url: str
    gateway_url: str
    device_id: str
    device_secret: str
    default_model: str
    request_timeout: float = 5.0

    def __post_init__(self):
        for name in ("backend_url", "gateway_url"):
            parsed = urlparse(getattr(self, name))
            if parsed.scheme not in ("http", "https") or not parsed.netloc:
                raise ValueError(f"{name} must be a well-formed URL")
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be positive")

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in fields(cls))


class EdgeClient:
    """One edge device. Single request at a time; safe to run many instances."""

    def __init__(self, config: EdgeConfig,
                 backend_counter: Optional[ByteCounter] = None,
                 gateway_counter: Optional[ByteCounter] = None):
        self.config = config
        self._backend_counter = backend_counter
        self._gateway_counter = gateway_counter
        self.tokens_acquired = 0

    # -- step 1+2: token acquisition --------------------------------------

    def acquire_token(self, model: Optional[str] = None, max_tokens: int = 64) -> tuple[str, int]:
        """Request a fresh token from the backend. Returns (compact, expires_at)."""
        body = {
            "device_id": self.config.device_id,
            "model": model or self.config.default_model,
            "max_tokens": max_tokens,
        }
        try:
            reply = request_json(
                f"{self.config.backend_url}/v1/token",
                payload=body,
                headers={"Authorization": f"Bearer {self.config.device_secret}"},
                timeout=self.config.request_timeout,
                counter=self._backend_counter,
            )
        except TransportError as e:
            raise BackendUnavailable(str(e)) from e
        if reply.status != 200:
            obj = reply.json() or {}
            raise IssueRefused(obj.get("error", f"http_{reply.status}"))
        obj = reply.json()
        self.tokens_acquired += 1
        return obj["token"], obj["expires_at"]

    # -- step 3+4: invocation ------------------------------------------------

    def chat(self, messages: list, model: Optional[str] = None, max_tokens: Optional[int] = None,
             stream: bool = False) -> InvocationResponse:
        """Acquire a token and invoke the gateway with it.

        If the gateway answers `expired` (the token aged out between issue
        and use), exactly one re-issue is attempted. Replay and constraint
        rejections are never retried.
        """
        model = model or self.config.default_model
        budget = max_tokens if max_tokens is not None else 64
        token, _exp = self.acquire_token(model, budget)
        try:
            return self._invoke(token, messages, model, max_tokens, stream)
        except GatewayRejected as e:
            if e.code not in _RETRYABLE:
                raise
            log.info("token expired before use; re-issuing once")
            token, _exp = self.acquire_token(model, budget)
            return self._invoke(token, messages, model, max_tokens, stream)

    def _invoke(self, token: str, messages: list, model: str, max_tokens: Optional[int],
                stream: bool) -> InvocationResponse:
        body: dict = {"model": model, "messages": messages, "stream": stream}
        if max_tokens is not None:
            body["max_tokens"] = max_tokens
        url = f"{self.config.gateway_url}/v1/chat/completions"
        headers = {"Authorization": f"Bearer {token}"}
        try:
            if stream:
                return self._read_stream(url, body, headers)
            reply = request_json(url, payload=body, headers=headers,
                                 timeout=self.config.request_timeout, counter=self._gateway_counter)
        except TransportError as e:
            raise GatewayRejected("gateway_unreachable", str(e)) from e
        if reply.status != 200:
            err = (reply.json() or {}).get("error", {})
            raise GatewayRejected(err.get("code", f"http_{reply.status}"), err.get("message", ""))
        obj = reply.json()
        return InvocationResponse(
            id=obj["id"],
            model=obj["model"],
            content=obj["choices"][0]["content"],
            usage=Usage(**obj["usage"]),
            finish_reason=obj["finish_reason"],
        )

    def _read_stream(self, url: str, body: dict, headers: dict) -> InvocationResponse:
        sr = request_stream(url, payload=body, headers=headers,
                            timeout=self.config.request_timeout, counter=self._gateway_counter)
        try:
            if sr.status != 200:
                data = sr.read_all()
                err = (json.loads(data.decode()) if data else {}).get("error", {})
                raise GatewayRejected(err.get("code", f"http_{sr.status}"), err.get("message", ""))
            parts: list[str] = []
            tail: Optional[dict] = None
            for line in sr.iter_lines():
                obj = json.loads(line.decode())
                if "delta" in obj:
                    parts.append(obj["delta"])
                else:
                    tail = obj
            if tail is None:
                raise GatewayRejected("truncated_stream", "stream ended without a usage record")
            return InvocationResponse(
                id=tail["id"],
                model=body["model"],
                content="".join(parts),
                usage=Usage(**tail["usage"]),
                finish_reason=tail["finish_reason"],
            )
        finally:
            sr.close()
