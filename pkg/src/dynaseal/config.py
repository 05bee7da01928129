"""JSON config files for the three parties, validated at load time."""

from __future__ import annotations

import base64
import json
from pathlib import Path

from .backend import BackendConfig, DeviceAccount, IssuePolicy
from .client import EdgeConfig
from .gateway import GatewayConfig
from .tokens import Credential, InvalidCredential


class ConfigInvalid(Exception):
    pass


def _load_json(path: str) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigInvalid(f"cannot read config {path}: {e}") from None
    if not isinstance(obj, dict):
        raise ConfigInvalid(f"config {path} must be a JSON object")
    return obj


def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise ConfigInvalid(f"{where}: missing required key {key!r}")
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigInvalid(f"{where}: key {key!r} has the wrong type")
    return value


def _credential(obj: dict, where: str) -> Credential:
    user_id = _require(obj, "user_id", str, where)
    secret_b64 = _require(obj, "secret_key_b64", str, where)
    try:
        secret = base64.b64decode(secret_b64.encode("ascii"), validate=True)
    except Exception:
        raise ConfigInvalid(f"{where}: secret_key_b64 is not valid base64") from None
    credential = Credential(user_id=user_id, secret_key=secret)
    try:
        credential.validate()
    except InvalidCredential as e:
        raise ConfigInvalid(f"{where}: {e}") from None
    return credential


def parse_listen(value: str, where: str = "listen") -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host:
        raise ConfigInvalid(f"{where}: expected host:port, got {value!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigInvalid(f"{where}: port must be an integer") from None


def load_backend_config(path: str) -> BackendConfig:
    obj = _load_json(path)
    where = f"backend config {path}"
    listen = _require(obj, "listen", str, where)
    parse_listen(listen, where)
    credential = _credential(_require(obj, "credential", dict, where), where)
    callback_secret = _require(obj, "callback_auth_secret", str, where)

    policy_obj = _require(obj, "policy", dict, where)
    allowed_raw = _require(policy_obj, "allowed_models", dict, where)
    allowed = {}
    for klass, models in allowed_raw.items():
        if not isinstance(models, list) or not all(isinstance(m, str) for m in models):
            raise ConfigInvalid(f"{where}: allowed_models[{klass!r}] must be a list of model names")
        allowed[klass] = set(models)
    try:
        policy = IssuePolicy(
            allowed_models=allowed,
            max_tokens_ceiling=policy_obj.get("max_tokens_ceiling", 128),
            token_ttl=policy_obj.get("token_ttl", 1),
            per_device_rate=policy_obj.get("per_device_rate", 600),
        )
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(f"{where}: bad policy: {e}") from None

    devices_raw = _require(obj, "devices", dict, where)
    if not devices_raw:
        raise ConfigInvalid(f"{where}: at least one device account is required")
    devices = {}
    for device_id, spec in devices_raw.items():
        if not isinstance(spec, dict):
            raise ConfigInvalid(f"{where}: devices[{device_id!r}] must be an object")
        devices[device_id] = DeviceAccount(
            device_id=device_id,
            secret=_require(spec, "secret", str, f"{where} devices[{device_id!r}]"),
            device_class=spec.get("class", "default"),
        )

    return BackendConfig(
        credential=credential,
        callback_auth_secret=callback_secret,
        policy=policy,
        devices=devices,
        callback_url=obj.get("callback_url", ""),
        ledger_path=obj.get("ledger_path"),
        listen=listen,
    )


def load_gateway_config(path: str) -> GatewayConfig:
    obj = _load_json(path)
    where = f"gateway config {path}"
    listen = _require(obj, "listen", str, where)
    parse_listen(listen, where)
    mode = obj.get("mode", "dynaseal")
    if mode not in ("dynaseal", "static", "zhipu"):
        raise ConfigInvalid(f"{where}: mode must be dynaseal, static, or zhipu")

    keys_raw = obj.get("keys", [])
    if not isinstance(keys_raw, list):
        raise ConfigInvalid(f"{where}: keys must be a list")
    credentials = [_credential(k, f"{where} keys[{i}]") for i, k in enumerate(keys_raw)]
    if mode in ("dynaseal", "zhipu") and not credentials:
        raise ConfigInvalid(f"{where}: mode {mode!r} requires a non-empty key registry")

    served = _require(obj, "served_models", list, where)
    if not served or not all(isinstance(m, str) for m in served):
        raise ConfigInvalid(f"{where}: served_models must be a non-empty list of names")

    static_keys = obj.get("static_keys", {})
    if mode == "static" and not static_keys:
        raise ConfigInvalid(f"{where}: static mode requires static_keys")

    engine = obj.get("engine", {})
    try:
        return GatewayConfig(
            credentials=credentials,
            served_models=tuple(served),
            callback_auth_secret=_require(obj, "callback_auth_secret", str, where),
            clock_leeway=float(obj.get("clock_leeway", 0.5)),
            mode=mode,
            static_keys=static_keys,
            engine_seed=engine.get("seed", 0),
            natural_min=engine.get("natural_min", 4),
            natural_max=engine.get("natural_max", 48),
            response_delay=float(obj.get("response_delay", 0.0)),
            stream_chunk_delay=float(obj.get("stream_chunk_delay", 0.0)),
            listen=listen,
        )
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(f"{where}: {e}") from None


def load_edge_config(path: str) -> EdgeConfig:
    obj = _load_json(path)
    where = f"edge config {path}"
    try:
        return EdgeConfig(
            backend_url=_require(obj, "backend_url", str, where),
            gateway_url=_require(obj, "gateway_url", str, where),
            device_id=_require(obj, "device_id", str, where),
            device_secret=_require(obj, "device_secret", str, where),
            default_model=_require(obj, "default_model", str, where),
            request_timeout=float(obj.get("request_timeout", 5.0)),
        )
    except ValueError as e:
        raise ConfigInvalid(f"{where}: {e}") from None
