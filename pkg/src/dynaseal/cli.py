"""Operator entry points.

    dynaseal keygen          mint a provider kv-pair, emit config fragments
    dynaseal inspect         decode a compact token, optionally verify it
    dynaseal run-backend     serve the token issuer + callback intake
    dynaseal run-gateway     serve the provider gateway
    dynaseal chat            one edge-device chat call (example client)
    dynaseal run-scenarios   live security scenarios + feature matrix
    dynaseal bench-traffic   three-architecture traffic comparison

Exit codes: 0 ok, 1 failed assertion/operation, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import base64
import errno
import json
import logging
import os
import secrets
import sys
import tempfile
import threading
import time
from pathlib import Path

from . import bench, scenarios
from .backend import BackendService
from .client import ClientError, EdgeClient, EdgeConfig
from .config import ConfigInvalid, load_backend_config, load_edge_config, load_gateway_config, parse_listen
from .gateway import GatewayService
from .httpio import ServiceServer
from .tokens import (
    BadSignature,
    Credential,
    Malformed,
    TokenError,
    parse_unverified,
    verify_token,
    VerificationPolicy,
)

log = logging.getLogger("dynaseal.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _write_atomic(path: Path, payload: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(json.dumps(payload, indent=2) + "\n")
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def cmd_keygen(args) -> int:
    out_dir = Path(args.out_dir)
    user_id = secrets.token_hex(8)
    secret = secrets.token_bytes(32)
    secret_b64 = base64.b64encode(secret).decode("ascii")
    provider_fragment = {"keys": [{"user_id": user_id, "secret_key_b64": secret_b64}]}
    backend_fragment = {"credential": {"user_id": user_id, "secret_key_b64": secret_b64}}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_atomic(out_dir / "provider_keys.json", provider_fragment)
        _write_atomic(out_dir / "backend_credential.json", backend_fragment)
    except OSError as e:
        print(f"error: cannot write key fragments: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(f"user_id: {user_id}")
    print(f"wrote {out_dir / 'provider_keys.json'}")
    print(f"wrote {out_dir / 'backend_credential.json'}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        header, claims = parse_unverified(args.token)
    except Malformed as e:
        print(f"error: malformed token: {e}", file=sys.stderr)
        return EXIT_USAGE
    print("header:")
    print(json.dumps(header, indent=2))
    print("claims:")
    print(json.dumps(claims.to_wire_dict(), indent=2))
    now = time.time()
    lifetime = claims.exp - claims.iat
    if now >= claims.exp:
        status = f"expired {now - claims.exp:.1f}s ago"
    elif now < claims.iat:
        status = f"not valid yet (starts in {claims.iat - now:.1f}s)"
    else:
        status = f"live ({claims.exp - now:.1f}s of {lifetime}s left)"
    print(f"expiry: {status}")
    if args.key:
        try:
            secret = base64.b64decode(args.key.encode("ascii"), validate=True)
        except Exception:
            print("error: --key must be base64", file=sys.stderr)
            return EXIT_USAGE
        credential = Credential(user_id=claims.api_key, secret_key=secret)
        policy = VerificationPolicy(now=lambda: float(claims.iat))  # signature only
        try:
            verify_token(args.token, credential, policy)
            print("signature: VALID")
        except (BadSignature, Malformed):
            print("signature: INVALID")
        except TokenError as e:
            print(f"signature: INVALID ({e.code})")
    return EXIT_OK


def _serve(server: ServiceServer, label: str, on_tick=None) -> int:
    print(f"{label} listening on {server.url}")
    if on_tick is not None:
        def ticker():
            while True:
                time.sleep(1.0)
                try:
                    on_tick()
                except Exception:
                    log.exception("periodic task failed")
        threading.Thread(target=ticker, daemon=True).start()
    try:
        server.serve_forever(poll_interval=0.2)
    except KeyboardInterrupt:
        print(f"\n{label} shutting down")
    finally:
        server.server_close()
    return EXIT_OK


def _bind(service, listen: str) -> ServiceServer:
    host, port = parse_listen(listen)
    try:
        return ServiceServer(service, host, port)
    except OSError as e:
        if e.errno == errno.EADDRINUSE:
            raise ConfigInvalid(f"port busy: {listen}") from None
        raise ConfigInvalid(f"cannot bind {listen}: {e}") from None


def _config_path(args) -> str:
    path = getattr(args, "config", None) or args.config_global
    if not path:
        raise ConfigInvalid("a config file is required (--config)")
    return path


def cmd_run_backend(args) -> int:
    config = load_backend_config(_config_path(args))
    service = BackendService(config)
    server = _bind(service, config.listen)
    if not config.callback_url:
        config.callback_url = f"{server.url}/v1/callback"
    return _serve(server, "backend", on_tick=service.sweep_expired)


def cmd_run_gateway(args) -> int:
    config = load_gateway_config(_config_path(args))
    service = GatewayService(config)
    server = _bind(service, config.listen)
    clock = time.time
    return _serve(server, f"gateway[{config.mode}]", on_tick=lambda: service.replay.sweep(clock()))


def cmd_chat(args) -> int:
    edge_config_path = getattr(args, "config", None) or args.config_global
    if edge_config_path:
        config = load_edge_config(edge_config_path)
        if args.backend or args.gateway:
            config = EdgeConfig(
                backend_url=args.backend or config.backend_url,
                gateway_url=args.gateway or config.gateway_url,
                device_id=args.device_id or config.device_id,
                device_secret=args.device_secret or config.device_secret,
                default_model=args.model or config.default_model,
                request_timeout=config.request_timeout,
            )
    else:
        if not (args.backend and args.gateway and args.device_id and args.device_secret):
            print("error: need --config or all of --backend/--gateway/--device-id/--device-secret",
                  file=sys.stderr)
            return EXIT_USAGE
        config = EdgeConfig(
            backend_url=args.backend,
            gateway_url=args.gateway,
            device_id=args.device_id,
            device_secret=args.device_secret,
            default_model=args.model or "m-small",
        )
    client = EdgeClient(config)
    try:
        response = client.chat(
            [{"role": "user", "content": args.message}],
            model=args.model,
            max_tokens=args.max_tokens,
            stream=args.stream,
        )
    except ClientError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    print(response.content.strip())
    usage = response.usage
    print(f"[model={response.model} prompt_tokens={usage.prompt_tokens} "
          f"completion_tokens={usage.completion_tokens} finish_reason={response.finish_reason}]",
          file=sys.stderr)
    return EXIT_OK


def cmd_run_scenarios(args) -> int:
    run = scenarios.run_all(mutations=args.mutations)
    print(run.matrix.format_table())
    print()
    for probe in run.security:
        print(f"{probe.name}: {'PASS' if probe.value else 'FAIL'}")
    path = scenarios.write_artifacts(run, args.out)
    print(f"\nwrote {path}")
    if not run.matrix.matches_expected():
        print("feature matrix does not match the published rows", file=sys.stderr)
        return EXIT_FAILURE
    if not all(p.value for p in run.security):
        print("a security scenario failed", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_bench_traffic(args) -> int:
    params = dict(n_requests=args.requests, prompt_bytes=args.prompt_bytes,
                  expected_completion_tokens=args.completion_tokens,
                  parallelism=args.parallelism, stream=not args.no_stream)
    if args.workload:
        try:
            spec = json.loads(Path(args.workload).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigInvalid(f"cannot read workload {args.workload}: {e}") from None
        params.update({k: spec[k] for k in
                       ("n_requests", "prompt_bytes", "expected_completion_tokens",
                        "parallelism") if k in spec})
        if "stream" in spec:
            params["stream"] = spec["stream"]
    reports, checks = bench.run_comparison(**params)
    print(bench.format_table(reports))
    print()
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    path = bench.write_report(reports, checks, args.out)
    print(f"\nwrote {path}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynaseal", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    parser.add_argument("--config", dest="config_global", default=None,
                        help="default config file for subcommands that take one")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="mint a provider kv-pair and emit config fragments")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("inspect", help="decode a compact token; verify with --key")
    p.add_argument("token")
    p.add_argument("--key", help="base64 secret key for a signature verdict")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("run-backend", help="serve the issuer + callback intake")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_run_backend)

    p = sub.add_parser("run-gateway", help="serve the provider gateway")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_run_gateway)

    p = sub.add_parser("chat", help="one edge-device chat call")
    p.add_argument("--config", help="edge config JSON")
    p.add_argument("--backend")
    p.add_argument("--gateway")
    p.add_argument("--device-id")
    p.add_argument("--device-secret")
    p.add_argument("--model")
    p.add_argument("--max-tokens", type=int, default=None)
    p.add_argument("--message", required=True)
    p.add_argument("--stream", action="store_true")
    p.set_defaults(fn=cmd_chat)

    p = sub.add_parser("run-scenarios", help="live scenario suite + feature matrix")
    p.add_argument("--out", default="artifacts")
    p.add_argument("--mutations", type=int, default=150)
    p.set_defaults(fn=cmd_run_scenarios)

    p = sub.add_parser("bench-traffic", help="three-architecture traffic comparison")
    p.add_argument("--workload", help="workload spec JSON")
    p.add_argument("--out", default="artifacts")
    p.add_argument("--requests", type=int, default=10)
    p.add_argument("--prompt-bytes", type=int, default=128)
    p.add_argument("--completion-tokens", type=int, default=1150)
    p.add_argument("--parallelism", type=int, default=2)
    p.add_argument("--no-stream", action="store_true")
    p.set_defaults(fn=cmd_bench_traffic)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigInvalid as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
