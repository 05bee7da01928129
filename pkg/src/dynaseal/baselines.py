"""The comparison architectures, behind drivers the harnesses share.

Four invocation methods are modeled against the same gateway machinery:

  dynaseal   three-party flow with signed short-lived constraint tokens
  embedded   pre-embedded provider key on the device (openai-like),
             scoped to a single model, no expiry, no budget control
  oneapi     redistributed static key valid for every served model
  zhipu      server-issued expiring signed tokens whose embedded
             constraints the gateway does not enforce

A relay proxy (backend forwarding every request/response while holding
the provider key) is also provided for the traffic comparison.
"""

from __future__ import annotations

import json
import secrets
from dataclasses import dataclass
from typing import Optional

from .gateway import InvocationResponse, Usage
from .httpio import (
    ByteCounter,
    HttpService,
    JsonResponse,
    Reply,
    RunningServer,
    StreamResponse,
    request_json,
    request_stream,
)
from .stack import FakeClock, Stack, build_stack

METHODS = ("dynaseal", "embedded", "oneapi", "zhipu")


@dataclass(frozen=True)
class EmbeddedEdgeConfig:
    """Edge config for the pre-embedded-key baseline.

    Unlike EdgeConfig this one DOES carry the provider key: that is the
    vulnerability the comparison is about.
    """

    gateway_url: str
    provider_key: str
    default_model: str
    request_timeout: float = 10.0


class StaticEdgeClient:
    """Edge device invoking the provider directly with a static bearer key."""

    def __init__(self, config: EmbeddedEdgeConfig, gateway_counter: Optional[ByteCounter] = None):
        self.config = config
        self._counter = gateway_counter

    def chat(self, messages: list, model: Optional[str] = None, max_tokens: Optional[int] = None,
             stream: bool = False):
        body: dict = {"model": model or self.config.default_model, "messages": messages, "stream": stream}
        if max_tokens is not None:
            body["max_tokens"] = max_tokens
        url = f"{self.config.gateway_url}/v1/chat/completions"
        headers = {"Authorization": f"Bearer {self.config.provider_key}"}
        if not stream:
            return request_json(url, payload=body, headers=headers,
                                timeout=self.config.request_timeout, counter=self._counter)
        return _collect_stream(url, body, headers, self.config.request_timeout, self._counter)


def _collect_stream(url, body, headers, timeout, counter) -> Reply:
    """Consume a streamed chat reply and normalize it to a Reply whose body
    is the assembled InvocationResponse JSON (error replies pass through)."""
    sr = request_stream(url, payload=body, headers=headers, timeout=timeout, counter=counter)
    try:
        if sr.status != 200:
            return Reply(status=sr.status, headers=sr.headers, body=sr.read_all())
        parts, tail = [], None
        for line in sr.iter_lines():
            obj = json.loads(line.decode())
            if "delta" in obj:
                parts.append(obj["delta"])
            else:
                tail = obj
        response = InvocationResponse(
            id=tail["id"],
            model=body["model"],
            content="".join(parts),
            usage=Usage(**tail["usage"]),
            finish_reason=tail["finish_reason"],
        )
        return Reply(status=200, headers=sr.headers, body=json.dumps(response.to_dict()).encode())
    finally:
        sr.close()


class RelayService(HttpService):
    """Server-relay baseline: the backend proxies every chat exchange,
    holding the provider key itself. Devices authenticate to the relay
    with their device secret and never see the provider key."""

    def __init__(self, upstream_url: str, provider_key: str, device_secret: str,
                 edge_counter: Optional[ByteCounter] = None,
                 upstream_counter: Optional[ByteCounter] = None,
                 meta_counter: Optional[ByteCounter] = None):
        self.upstream_url = upstream_url
        self.provider_key = provider_key
        self.device_secret = device_secret
        self._edge_counter = edge_counter
        self._upstream_counter = upstream_counter
        self._meta_counter = meta_counter

    def counter_for(self, path: str) -> Optional[ByteCounter]:
        if path.startswith("/v1/chat"):
            return self._edge_counter
        return self._meta_counter

    def handle(self, method: str, path: str, headers, body: bytes):
        if method == "GET" and path == "/healthz":
            return JsonResponse(200, {"status": "ok"})
        if not (method == "POST" and path == "/v1/chat/completions"):
            return JsonResponse(404, {"error": "not_found"})
        auth = (headers.get("Authorization") or "").split(None, 1)
        if len(auth) != 2 or auth[0].lower() != "bearer" or auth[1] != self.device_secret:
            return JsonResponse(401, {"error": {"code": "bad_device_auth", "message": "relay refused"}})

        url = f"{self.upstream_url}/v1/chat/completions"
        fwd_headers = {"Authorization": f"Bearer {self.provider_key}"}
        try:
            stream = bool(json.loads(body.decode() or "{}").get("stream"))
        except json.JSONDecodeError:
            stream = False
        if not stream:
            reply = request_json(url, method="POST", payload=json.loads(body.decode()),
                                 headers=fwd_headers, counter=self._upstream_counter)
            return JsonResponse(reply.status, reply.json())

        upstream = request_stream(url, method="POST", payload=json.loads(body.decode()),
                                  headers=fwd_headers, counter=self._upstream_counter)

        def lines():
            try:
                for line in upstream.iter_lines():
                    yield line.decode()
            finally:
                upstream.close()

        return StreamResponse(upstream.status, lines())


class RelayEdgeClient:
    """Edge device in relay mode: same chat surface, pointed at the relay."""

    def __init__(self, relay_url: str, device_secret: str, default_model: str,
                 relay_counter: Optional[ByteCounter] = None, timeout: float = 10.0):
        self._inner = StaticEdgeClient(
            EmbeddedEdgeConfig(
                gateway_url=relay_url,
                provider_key=device_secret,  # the relay wants the *device* secret
                default_model=default_model,
                request_timeout=timeout,
            ),
            gateway_counter=relay_counter,
        )

    def chat(self, messages, model=None, max_tokens=None, stream=False):
        return self._inner.chat(messages, model=model, max_tokens=max_tokens, stream=stream)


@dataclass
class MethodHandle:
    """One invocation method, running, with a uniform probe surface."""

    method: str
    stack: Stack
    clock: FakeClock
    static_key: Optional[str] = None

    @property
    def gateway_url(self) -> str:
        return self.stack.gateway_url

    def mint(self, model: str = "m-small", cap: int = 8) -> str:
        """The bearer credential an edge device would present, scoped (where
        the method supports scoping) to the given model and budget."""
        if self.method in ("dynaseal", "zhipu"):
            token, _exp = self.stack.backend.issue_token(self.stack.device_id, model, cap)
            return token
        return self.static_key

    def present(self, bearer: str, model: str, max_tokens: Optional[int] = None,
                stream: bool = False, text: str = "probe payload") -> Reply:
        body: dict = {"model": model, "messages": [{"role": "user", "content": text}], "stream": stream}
        if max_tokens is not None:
            body["max_tokens"] = max_tokens
        url = f"{self.gateway_url}/v1/chat/completions"
        headers = {"Authorization": f"Bearer {bearer}"}
        if stream:
            return _collect_stream(url, body, headers, 10.0, None)
        return request_json(url, payload=body, headers=headers)

    def close(self):
        self.stack.close()


def build_method(method: str, clock: Optional[FakeClock] = None, token_ttl: int = 5,
                 natural_min: int = 3, natural_max: int = 3, ceiling: int = 10_000,
                 with_counters: bool = False) -> MethodHandle:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    clock = clock or FakeClock()
    static_key = None
    if method == "dynaseal":
        stack = build_stack(
            mode="dynaseal", served_models=("m-small", "m-large"), clock=clock,
            token_ttl=token_ttl, natural_min=natural_min, natural_max=natural_max,
            max_tokens_ceiling=ceiling, with_counters=with_counters,
        )
    elif method == "embedded":
        static_key = "sk-embedded-" + secrets.token_hex(12)
        stack = build_stack(
            mode="static", served_models=("m-small", "m-large"), clock=clock,
            static_keys={static_key: ["m-small"]},
            natural_min=natural_min, natural_max=natural_max, with_counters=with_counters,
        )
    elif method == "oneapi":
        static_key = "sk-oneapi-" + secrets.token_hex(12)
        stack = build_stack(
            mode="static", served_models=("m-small", "m-large"), clock=clock,
            static_keys={static_key: ["m-small", "m-large"]},
            natural_min=natural_min, natural_max=natural_max, with_counters=with_counters,
        )
    else:  # zhipu: one served model ecosystem, constraints unenforced
        stack = build_stack(
            mode="zhipu", served_models=("m-small",), clock=clock,
            allowed_models={"default": {"m-small"}}, token_ttl=token_ttl,
            natural_min=natural_min, natural_max=natural_max,
            max_tokens_ceiling=ceiling, with_counters=with_counters,
        )
    return MethodHandle(method=method, stack=stack, clock=clock, static_key=static_key)
