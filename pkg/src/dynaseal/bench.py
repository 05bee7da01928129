"""Byte-level traffic comparison of the three architectures.

Each run drives an identical chat workload through one architecture and
reports exact application-layer byte counts per party (HTTP request line,
headers, and body, as transmitted). The provider columns cover the
chat-serving surface; token issuance and completion callbacks are backend
traffic (that is precisely the asymmetry the comparison is about).
"""

from __future__ import annotations

import itertools
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from .baselines import (
    EmbeddedEdgeConfig,
    RelayEdgeClient,
    RelayService,
    StaticEdgeClient,
)
from .client import EdgeConfig
from .httpio import ByteCounter, RunningServer
from .stack import build_stack

_FILLER_WORDS = ("lorem", "ipsum", "dolor", "sit", "amet", "sed", "quia", "magna")


@dataclass(frozen=True)
class Workload:
    """One bench workload: who calls, how often, with what payload shape."""

    method: str
    n_requests: int = 10
    parallelism: int = 2
    prompt_bytes: int = 128
    expected_completion_tokens: int = 1150
    stream: bool = True

    @classmethod
    def from_dict(cls, obj: dict) -> "Workload":
        return cls(**{k: obj[k] for k in
                      ("method", "n_requests", "parallelism", "prompt_bytes",
                       "expected_completion_tokens", "stream") if k in obj})


@dataclass
class TrafficReport:
    """Per-party byte accounting for one run, plus derived metadata."""

    method: str
    n_requests: int
    payload_bytes: int
    provider_in: int
    provider_out: int
    backend_in: int
    backend_out: int
    edge_in: int
    edge_out: int
    key_predeployment: str  # "required" | "not_required"
    extras: dict = field(default_factory=dict)

    @property
    def provider_total(self) -> int:
        return self.provider_in + self.provider_out

    @property
    def backend_total(self) -> int:
        return self.backend_in + self.backend_out

    @property
    def edge_total(self) -> int:
        return self.edge_in + self.edge_out

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n_requests": self.n_requests,
            "payload_bytes": self.payload_bytes,
            "provider_in": self.provider_in,
            "provider_out": self.provider_out,
            "provider_total": self.provider_total,
            "backend_in": self.backend_in,
            "backend_out": self.backend_out,
            "backend_total": self.backend_total,
            "edge_in": self.edge_in,
            "edge_out": self.edge_out,
            "edge_total": self.edge_total,
            "key_predeployment": self.key_predeployment,
            "extras": self.extras,
        }


def make_prompt(i: int, nbytes: int) -> str:
    """Deterministic prompt of exactly nbytes ASCII bytes."""
    words = [f"request {i:04d}"]
    filler = itertools.cycle(_FILLER_WORDS)
    while sum(len(w) + 1 for w in words) < nbytes + 1:
        words.append(next(filler))
    prompt = " ".join(words)[:nbytes]
    return prompt.ljust(nbytes, "x")


def _drive(chat_fn, workload: Workload) -> dict:
    """Run the workload through one chat callable, collecting latencies and
    per-response usage for the constraint-dominance assertion."""
    def one(i: int):
        messages = [{"role": "user", "content": make_prompt(i, workload.prompt_bytes)}]
        start = time.monotonic()
        reply = chat_fn(messages, workload.expected_completion_tokens, workload.stream)
        elapsed = time.monotonic() - start
        return reply, elapsed

    latencies = []
    usages = []
    failures = []
    with ThreadPoolExecutor(max_workers=max(1, workload.parallelism)) as pool:
        for reply, elapsed in pool.map(one, range(workload.n_requests)):
            latencies.append(elapsed)
            if hasattr(reply, "status"):  # Reply from the static/relay clients
                if reply.status == 200:
                    usages.append(reply.json()["usage"])
                else:
                    failures.append(reply.status)
            else:  # InvocationResponse from the dynaseal client
                usages.append(reply.usage.to_dict())
    return {
        "latency_mean_s": statistics.fmean(latencies),
        "latency_median_s": statistics.median(latencies),
        "usages": usages,
        "failures": failures,
    }


def _budget_violations(usages, cap: int) -> int:
    return sum(1 for u in usages if u["completion_tokens"] > cap)


def _conservation(pairs) -> dict:
    out = {}
    for name, a, b in pairs:
        out[name] = {"sent": a, "received": b, "exact": a == b}
    return out


# ---------------------------------------------------------------------------
# Mode runners
# ---------------------------------------------------------------------------

def _engine_kw(workload: Workload) -> dict:
    # Pin natural length above the requested budget so every response is
    # cap-determined and byte totals are identical across architectures.
    n = workload.expected_completion_tokens + 32
    return {"natural_min": n, "natural_max": n, "engine_seed": 0}


def run_embedded_mode(workload: Workload, hop_delay: float = 0.0) -> TrafficReport:
    """Pre-embedded key: the edge talks straight to the provider; no backend runs."""
    static_key = "sk-embedded-workload"
    stack = build_stack(mode="static", served_models=("m-small",),
                        static_keys={static_key: ["m-small"]},
                        response_delay=hop_delay, with_counters=True, **_engine_kw(workload))
    try:
        edge_counter = stack.counters["edge_to_gateway"]
        config = EmbeddedEdgeConfig(gateway_url=stack.gateway_url, provider_key=static_key,
                                    default_model="m-small", request_timeout=30.0)
        client = StaticEdgeClient(config, gateway_counter=edge_counter)

        def chat(messages, max_tokens, stream):
            return client.chat(messages, max_tokens=max_tokens, stream=stream)

        stats = _drive(chat, workload)
        stack.gateway_server.quiesce()
        front = stack.counters["gateway_front"].snapshot()
        edge = edge_counter.snapshot()
        deployed = config.provider_key in stack.gateway.config.static_keys
        return TrafficReport(
            method="embedded",
            n_requests=workload.n_requests,
            payload_bytes=workload.prompt_bytes,
            provider_in=front["in"], provider_out=front["out"],
            backend_in=0, backend_out=0,
            edge_in=edge["in"], edge_out=edge["out"],
            key_predeployment="required" if deployed else "not_required",
            extras={
                **stats,
                "budget_violations": _budget_violations(stats["usages"],
                                                        workload.expected_completion_tokens),
                "conservation": _conservation([
                    ("edge->provider", edge["out"], front["in"]),
                    ("provider->edge", front["out"], edge["in"]),
                ]),
            },
        )
    finally:
        stack.close()


def run_relay_mode(workload: Workload, hop_delay: float = 0.0) -> TrafficReport:
    """Server relay: every request and response transits the backend proxy."""
    provider_key = "sk-relay-upstream"
    device_secret = "relay-device-secret"
    stack = build_stack(mode="static", served_models=("m-small",),
                        static_keys={provider_key: ["m-small"]},
                        response_delay=hop_delay, with_counters=True, **_engine_kw(workload))
    relay_edge_side = ByteCounter("relay:edge-facing")
    relay_upstream = ByteCounter("relay->provider")
    relay = RelayService(upstream_url=stack.gateway_url, provider_key=provider_key,
                         device_secret=device_secret,
                         edge_counter=relay_edge_side, upstream_counter=relay_upstream,
                         meta_counter=ByteCounter("relay:meta"))
    relay.response_delay = hop_delay
    relay_server = RunningServer(relay)
    try:
        edge_counter = ByteCounter("edge->relay")
        client = RelayEdgeClient(relay_url=relay_server.url, device_secret=device_secret,
                                 default_model="m-small", relay_counter=edge_counter, timeout=30.0)

        def chat(messages, max_tokens, stream):
            return client.chat(messages, max_tokens=max_tokens, stream=stream)

        stats = _drive(chat, workload)
        relay_server.quiesce()
        stack.gateway_server.quiesce()
        front = stack.counters["gateway_front"].snapshot()
        edge = edge_counter.snapshot()
        r_edge = relay_edge_side.snapshot()
        r_up = relay_upstream.snapshot()
        return TrafficReport(
            method="relay",
            n_requests=workload.n_requests,
            payload_bytes=workload.prompt_bytes,
            provider_in=front["in"], provider_out=front["out"],
            backend_in=r_edge["in"] + r_up["in"], backend_out=r_edge["out"] + r_up["out"],
            edge_in=edge["in"], edge_out=edge["out"],
            key_predeployment="required" if device_secret in stack.gateway.config.static_keys
            else "not_required",
            extras={
                **stats,
                "budget_violations": _budget_violations(stats["usages"],
                                                        workload.expected_completion_tokens),
                "conservation": _conservation([
                    ("edge->relay", edge["out"], r_edge["in"]),
                    ("relay->edge", r_edge["out"], edge["in"]),
                    ("relay->provider", r_up["out"], front["in"]),
                    ("provider->relay", front["out"], r_up["in"]),
                ]),
            },
        )
    finally:
        relay_server.stop()
        stack.close()


def run_dynaseal_mode(workload: Workload, hop_delay: float = 0.0,
                      token_ttl: int = 5) -> TrafficReport:
    """Full three-party flow: issuance, direct invocation, completion callback."""
    stack = build_stack(mode="dynaseal", served_models=("m-small", "m-large"),
                        token_ttl=token_ttl, response_delay=hop_delay,
                        max_tokens_ceiling=max(128, workload.expected_completion_tokens),
                        with_counters=True, **_engine_kw(workload))
    try:
        client = stack.edge_client(counters=True, timeout=30.0)

        def chat(messages, max_tokens, stream):
            return client.chat(messages, max_tokens=max_tokens, stream=stream)

        stats = _drive(chat, workload)
        stack.gateway.drain_callbacks(timeout=15.0)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            if stack.backend.ledger.counts()["COMPLETED"] >= workload.n_requests:
                break
            time.sleep(0.02)
        stack.gateway_server.quiesce()
        stack.backend_server.quiesce()

        front = stack.counters["gateway_front"].snapshot()
        b_edge = stack.counters["backend_edge_side"].snapshot()
        b_cb = stack.counters["backend_callback_side"].snapshot()
        e_b = stack.counters["edge_to_backend"].snapshot()
        e_g = stack.counters["edge_to_gateway"].snapshot()
        g_cb = stack.counters["gateway_callback_client"].snapshot()
        edge_fields = EdgeConfig.field_names()
        holds_provider_key = any("provider" in f or "secret_key" in f or "api_key" in f
                                 for f in edge_fields)
        return TrafficReport(
            method="dynaseal",
            n_requests=workload.n_requests,
            payload_bytes=workload.prompt_bytes,
            provider_in=front["in"], provider_out=front["out"],
            backend_in=b_edge["in"] + b_cb["in"], backend_out=b_edge["out"] + b_cb["out"],
            edge_in=e_b["in"] + e_g["in"], edge_out=e_b["out"] + e_g["out"],
            key_predeployment="required" if holds_provider_key else "not_required",
            extras={
                **stats,
                "budget_violations": _budget_violations(stats["usages"],
                                                        workload.expected_completion_tokens),
                "ledger_counts": stack.backend.ledger.counts(),
                "issuance_bytes": b_edge["in"] + b_edge["out"],
                "callback_bytes": b_cb["in"] + b_cb["out"],
                "conservation": _conservation([
                    ("edge->backend", e_b["out"], b_edge["in"]),
                    ("backend->edge", b_edge["out"], e_b["in"]),
                    ("edge->provider", e_g["out"], front["in"]),
                    ("provider->edge", front["out"], e_g["in"]),
                    ("provider->backend callbacks", g_cb["out"], b_cb["in"]),
                    ("backend->provider acks", b_cb["out"], g_cb["in"]),
                ]),
            },
        )
    finally:
        stack.close()


_RUNNERS = {"embedded": run_embedded_mode, "relay": run_relay_mode, "dynaseal": run_dynaseal_mode}


def run_workload(workload: Workload, hop_delay: float = 0.0) -> TrafficReport:
    try:
        runner = _RUNNERS[workload.method]
    except KeyError:
        raise ValueError(f"unknown method {workload.method!r}") from None
    return runner(workload, hop_delay)


# ---------------------------------------------------------------------------
# Cross-run relations (the published table's claims, operationalized)
# ---------------------------------------------------------------------------

def check_relations(reports: dict) -> list:
    """Relative criteria across the three runs. Returns [(name, ok, detail)]."""
    embedded, relay, dynaseal = reports["embedded"], reports["relay"], reports["dynaseal"]
    checks = []

    ratio = relay.backend_total / relay.provider_total
    checks.append(("relay_backend_is_2x_provider", 1.9 <= ratio <= 2.1, {"ratio": round(ratio, 4)}))

    fraction = dynaseal.backend_total / relay.backend_total
    checks.append(("dynaseal_backend_at_most_quarter_of_relay", fraction <= 0.25,
                   {"fraction": round(fraction, 4)}))

    totals = [r.provider_total for r in (embedded, relay, dynaseal)]
    spread = (max(totals) - min(totals)) / min(totals)
    checks.append(("provider_traffic_uniform_within_5pct", spread <= 0.05,
                   {"totals": totals, "spread": round(spread, 4)}))

    checks.append(("embedded_backend_traffic_is_zero", embedded.backend_total == 0,
                   {"backend_total": embedded.backend_total}))

    flags = (embedded.key_predeployment, relay.key_predeployment, dynaseal.key_predeployment)
    checks.append(("key_predeployment_flags", flags == ("required", "not_required", "not_required"),
                   {"flags": flags}))

    violations = sum(r.extras.get("budget_violations", 0) for r in (embedded, relay, dynaseal))
    checks.append(("no_response_ever_exceeds_budget", violations == 0, {"violations": violations}))

    conservation_ok = all(pair["exact"]
                          for r in (embedded, relay, dynaseal)
                          for pair in r.extras["conservation"].values())
    checks.append(("loopback_byte_conservation_exact", conservation_ok, {}))
    return checks


def run_comparison(n_requests: int = 10, prompt_bytes: int = 128,
                   expected_completion_tokens: int = 1150, parallelism: int = 2,
                   stream: bool = True, hop_delay: float = 0.0) -> tuple:
    """The three runs plus their relation checks."""
    reports = {}
    for method in ("embedded", "relay", "dynaseal"):
        workload = Workload(method=method, n_requests=n_requests, parallelism=parallelism,
                            prompt_bytes=prompt_bytes,
                            expected_completion_tokens=expected_completion_tokens, stream=stream)
        reports[method] = run_workload(workload, hop_delay)
    return reports, check_relations(reports)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

_METHOD_LABELS = {"embedded": "Pre-embedded API Key", "relay": "Server Relay", "dynaseal": "Dynaseal"}


def format_table(reports: dict) -> str:
    relay_provider = reports["relay"].provider_total
    headers = ["Method", "LLM Provider Traffic", "Backend Server Traffic", "Client-side Key Pre-deployment"]
    rows = []
    for method in ("embedded", "relay", "dynaseal"):
        r = reports[method]
        backend_note = "none" if r.backend_total == 0 else f"{r.backend_total / relay_provider:.2f}x provider"
        rows.append([
            _METHOD_LABELS[method],
            f"{r.provider_total:,} B",
            f"{r.backend_total:,} B ({backend_note})",
            "Required" if r.key_predeployment == "required" else "Not Required",
        ])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]

    def fmt(row):
        return "  ".join(cell.ljust(w) for cell, w in zip(row, widths))

    return "\n".join([fmt(headers), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


def write_report(reports: dict, checks: list, out_dir: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "traffic_report.json"
    payload = {
        "reports": {m: r.to_dict() for m, r in reports.items()},
        "checks": [{"name": n, "ok": ok, "detail": d} for n, ok, d in checks],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path
