"""Assemble complete in-process deployments on loopback.

Scenario suites, benches, and tests all need the same thing: a backend,
a gateway, and edge configs wired together on ephemeral ports, optionally
with a controllable clock and byte counters on every surface.
"""

from __future__ import annotations

import base64
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .backend import BackendConfig, BackendService, DeviceAccount, IssuePolicy
from .client import EdgeClient, EdgeConfig
from .gateway import GatewayConfig, GatewayService
from .httpio import ByteCounter, RunningServer
from .tokens import Credential

DEFAULT_MODELS = ("m-small", "m-large")


class FakeClock:
    """A settable clock shared by services under test."""

    def __init__(self, start: float = 1_700_000_000.0):
        self._t = float(start)
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self._t

    def set(self, t: float) -> None:
        with self._lock:
            self._t = float(t)

    def advance(self, dt: float) -> None:
        with self._lock:
            self._t += dt


def make_credential(user_id: Optional[str] = None) -> Credential:
    return Credential(
        user_id=user_id or secrets.token_hex(8),
        secret_key=secrets.token_bytes(32),
    )


def encode_secret(secret: bytes) -> str:
    return base64.b64encode(secret).decode("ascii")


def decode_secret(encoded: str) -> bytes:
    return base64.b64decode(encoded.encode("ascii"))


@dataclass
class Stack:
    """A running backend + gateway pair plus everything needed to drive it."""

    credential: Credential
    backend: BackendService
    gateway: GatewayService
    backend_server: RunningServer
    gateway_server: RunningServer
    device_id: str
    device_secret: str
    clock: object
    counters: dict = field(default_factory=dict)

    @property
    def backend_url(self) -> str:
        return self.backend_server.url

    @property
    def gateway_url(self) -> str:
        return self.gateway_server.url

    def edge_config(self, model: str = "m-small", timeout: float = 10.0) -> EdgeConfig:
        return EdgeConfig(
            backend_url=self.backend_url,
            gateway_url=self.gateway_url,
            device_id=self.device_id,
            device_secret=self.device_secret,
            default_model=model,
            request_timeout=timeout,
        )

    def edge_client(self, model: str = "m-small", counters: bool = False, timeout: float = 10.0) -> EdgeClient:
        return EdgeClient(
            self.edge_config(model, timeout),
            backend_counter=self.counters.get("edge_to_backend") if counters else None,
            gateway_counter=self.counters.get("edge_to_gateway") if counters else None,
        )

    def close(self) -> None:
        self.gateway.drain_callbacks(timeout=5.0)
        self.gateway_server.stop()
        self.backend_server.stop()
        self.backend.close()


def build_stack(
    mode: str = "dynaseal",
    served_models: tuple = DEFAULT_MODELS,
    allowed_models: Optional[dict] = None,
    token_ttl: int = 5,
    clock_leeway: float = 0.5,
    max_tokens_ceiling: int = 128,
    per_device_rate: int = 100_000,
    clock=None,
    engine_seed: int = 0,
    natural_min: int = 4,
    natural_max: int = 48,
    response_delay: float = 0.0,
    stream_chunk_delay: float = 0.0,
    static_keys: Optional[dict] = None,
    ledger_path: Optional[str] = None,
    callback_url: Optional[str] = None,
    with_counters: bool = False,
) -> Stack:
    """Start a full three-party deployment on loopback ephemeral ports.

    callback_url overrides where tokens point their completion reports
    (used by fault-injection tests); by default it targets the backend
    that issued them.
    """
    clock = clock or time.time
    credential = make_credential()
    callback_secret = secrets.token_hex(16)
    device_id = "dev-1"
    device_secret = secrets.token_hex(16)

    counters = {}
    if with_counters:
        counters = {
            "edge_to_backend": ByteCounter("edge->backend"),
            "edge_to_gateway": ByteCounter("edge->gateway"),
            "backend_edge_side": ByteCounter("backend:edge-facing"),
            "backend_callback_side": ByteCounter("backend:callback-facing"),
            "gateway_front": ByteCounter("gateway:front"),
            "gateway_callback_client": ByteCounter("gateway->backend callbacks"),
            "meta": ByteCounter("meta"),
        }

    policy = IssuePolicy(
        allowed_models=allowed_models or {"default": set(served_models)},
        max_tokens_ceiling=max_tokens_ceiling,
        token_ttl=token_ttl,
        per_device_rate=per_device_rate,
    )
    backend_config = BackendConfig(
        credential=credential,
        callback_auth_secret=callback_secret,
        policy=policy,
        devices={device_id: DeviceAccount(device_id=device_id, secret=device_secret)},
        ledger_path=ledger_path,
    )
    backend = BackendService(
        backend_config,
        clock=clock,
        edge_counter=counters.get("backend_edge_side"),
        callback_counter=counters.get("backend_callback_side"),
        meta_counter=counters.get("meta"),
    )
    backend_server = RunningServer(backend)
    backend_config.callback_url = callback_url or f"{backend_server.url}/v1/callback"

    gateway_config = GatewayConfig(
        credentials=[credential],
        served_models=tuple(served_models),
        callback_auth_secret=callback_secret,
        clock_leeway=clock_leeway,
        mode=mode,
        static_keys=static_keys or {},
        engine_seed=engine_seed,
        natural_min=natural_min,
        natural_max=natural_max,
        response_delay=response_delay,
        stream_chunk_delay=stream_chunk_delay,
    )
    gateway = GatewayService(
        gateway_config,
        clock=clock,
        front_counter=counters.get("gateway_front"),
        callback_counter=counters.get("gateway_callback_client"),
        meta_counter=counters.get("meta"),
    )
    gateway_server = RunningServer(gateway)

    return Stack(
        credential=credential,
        backend=backend,
        gateway=gateway,
        backend_server=backend_server,
        gateway_server=gateway_server,
        device_id=device_id,
        device_secret=device_secret,
        clock=clock,
        counters=counters,
    )
