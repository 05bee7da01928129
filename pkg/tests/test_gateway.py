import json
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from dynaseal.gateway import (
    GatewayConfig,
    GatewayService,
    InvalidInvocation,
    InvocationRequest,
    ModelMismatch,
    ReplayDetected,
    TokenBudgetExceeded,
    UnknownIssuer,
)
from dynaseal.stack import FakeClock, build_stack, make_credential
from dynaseal.tokens import (
    BadSignature,
    Expired,
    b64url_encode,
    parse_unverified,
    sign_token,
    DynasealClaims,
)
from dynaseal.httpio import request_json, request_stream

from helpers import run_sink

CRED = make_credential("issuer01")


def make_gateway(clock=None, natural_min=4, natural_max=48, leeway=0.5, **kw) -> GatewayService:
    config = GatewayConfig(
        credentials=[CRED],
        served_models=("m-small", "m-large"),
        callback_auth_secret="cb-secret",
        clock_leeway=leeway,
        natural_min=natural_min,
        natural_max=natural_max,
        **kw,
    )
    return GatewayService(config, clock=clock or FakeClock())


def mint(model="m-small", max_tokens=64, iat=1_700_000_000, ttl=5, jti="J-1",
         callback_url="http://127.0.0.1:1/v1/callback", credential=CRED):
    claims = DynasealClaims(
        api_key=credential.user_id,
        model=model,
        max_tokens=max_tokens,
        iat=iat,
        exp=iat + ttl,
        jti=jti,
        callback_url=callback_url,
    )
    return sign_token(claims, credential).compact_form, claims


def chat_request(model="m-small", text="a b c", max_tokens=None, stream=False):
    return InvocationRequest(model=model, messages=[{"role": "user", "content": text}],
                             max_tokens=max_tokens, stream=stream)


# ---------------------------------------------------------------------------
# authorize pipeline
# ---------------------------------------------------------------------------

def test_authorize_accepts_then_replays():
    gw = make_gateway(clock=FakeClock(1_700_000_001))
    token, claims = mint()
    assert gw.authorize(token, chat_request()) == claims
    with pytest.raises(ReplayDetected):
        gw.authorize(token, chat_request())


def test_authorize_model_mismatch():
    gw = make_gateway(clock=FakeClock(1_700_000_001))
    token, _ = mint(model="m-small")
    with pytest.raises(ModelMismatch):
        gw.authorize(token, chat_request(model="m-large"))


def test_authorize_budget_exceeded():
    gw = make_gateway(clock=FakeClock(1_700_000_001))
    token, _ = mint(max_tokens=64)
    with pytest.raises(TokenBudgetExceeded):
        gw.authorize(token, chat_request(max_tokens=65))


def test_request_may_lower_budget():
    gw = make_gateway(clock=FakeClock(1_700_000_001))
    token, claims = mint(max_tokens=64)
    assert gw.authorize(token, chat_request(max_tokens=5)) == claims


def test_edited_payload_keeps_stale_signature():
    gw = make_gateway(clock=FakeClock(1_700_000_001))
    token, _ = mint(max_tokens=64)
    h, c, s = token.split(".")
    payload = json.loads(__import__("base64").urlsafe_b64decode(c + "=="))
    payload["max_tokens"] = 6400
    edited = b64url_encode(json.dumps(payload, separators=(",", ":")).encode())
    with pytest.raises(BadSignature):
        gw.authorize(f"{h}.{edited}.{s}", chat_request(max_tokens=6400))


def test_unknown_issuer_fails_closed():
    gw = make_gateway(clock=FakeClock(1_700_000_001))
    stranger = make_credential("stranger1")
    token, _ = mint(credential=stranger)
    with pytest.raises(UnknownIssuer):
        gw.authorize(token, chat_request())


def test_expired_token_rejected_even_if_unused():
    clock = FakeClock(1_700_000_000)
    gw = make_gateway(clock=clock)
    token, claims = mint(iat=1_700_000_000, ttl=5)
    clock.set(claims.exp + 0.5 + 1)
    with pytest.raises(Expired):
        gw.authorize(token, chat_request())


def test_forged_tokens_cannot_poison_replay_cache():
    gw = make_gateway(clock=FakeClock(1_700_000_001))
    stranger = make_credential(CRED.user_id)  # right issuer id, wrong key
    forged, _ = mint(credential=stranger, jti="shared-jti")
    with pytest.raises(BadSignature):
        gw.authorize(forged, chat_request())
    genuine, claims = mint(jti="shared-jti")
    assert gw.authorize(genuine, chat_request()) == claims


def test_replay_cache_eviction_only_after_horizon():
    clock = FakeClock(1_700_000_001)
    gw = make_gateway(clock=clock)
    token, claims = mint(ttl=5)
    gw.authorize(token, chat_request())
    assert claims.jti in gw.replay
    # before the horizon passes the jti stays pinned
    clock.set(claims.exp + 0.4)
    gw.replay.sweep(clock())
    assert claims.jti in gw.replay
    clock.set(claims.exp + 0.6)
    gw.replay.sweep(clock())
    assert claims.jti not in gw.replay


def test_concurrent_presentations_single_success():
    gw = make_gateway(clock=FakeClock(1_700_000_001))
    token, _ = mint()
    outcomes = []

    def attempt():
        try:
            gw.authorize(token, chat_request())
            return "ok"
        except ReplayDetected:
            return "replay"

    with ThreadPoolExecutor(max_workers=64) as pool:
        outcomes = list(pool.map(lambda _: attempt(), range(64)))
    assert outcomes.count("ok") == 1
    assert outcomes.count("replay") == 63


# ---------------------------------------------------------------------------
# invoke semantics
# ---------------------------------------------------------------------------

def test_cap_binds_and_reports_length():
    gw = make_gateway(clock=FakeClock(1_700_000_001), natural_min=20, natural_max=20)
    token, claims = mint(max_tokens=8)
    request = chat_request()
    gw.authorize(token, request)
    response = gw.invoke(claims, request)
    assert response.usage.completion_tokens == 8
    assert response.finish_reason == "length"
    assert response.id == claims.jti
    # oracle: the engine standalone emits the same count under the same cap
    standalone = list(gw.engine.generate("m-small", request.messages, 8))
    assert len(standalone) == 8
    assert response.content == "".join(standalone)


def test_natural_stop_under_cap():
    gw = make_gateway(clock=FakeClock(1_700_000_001), natural_min=3, natural_max=3)
    token, claims = mint(max_tokens=8)
    request = chat_request()
    gw.authorize(token, request)
    response = gw.invoke(claims, request)
    assert response.usage.completion_tokens == 3
    assert response.finish_reason == "stop"


def test_request_cap_lowers_effective_budget():
    gw = make_gateway(clock=FakeClock(1_700_000_001), natural_min=20, natural_max=20)
    token, claims = mint(max_tokens=8)
    request = chat_request(max_tokens=5)
    gw.authorize(token, request)
    assert gw.invoke(claims, request).usage.completion_tokens == 5


def test_empty_messages_rejected_upstream():
    with pytest.raises(InvalidInvocation):
        InvocationRequest.from_wire({"model": "m-small", "messages": []})
    with pytest.raises(InvalidInvocation):
        InvocationRequest.from_wire({"model": "m-small",
                                     "messages": [{"role": "robot", "content": "x"}]})


def test_prompt_tokens_counted():
    gw = make_gateway(clock=FakeClock(1_700_000_001), natural_min=3, natural_max=3)
    token, claims = mint()
    request = chat_request(text="one two three four")
    gw.authorize(token, request)
    assert gw.invoke(claims, request).usage.prompt_tokens == 4


# ---------------------------------------------------------------------------
# fail-closed ordering: rejected requests never reach the engine
# ---------------------------------------------------------------------------

def test_no_generation_for_rejected_requests():
    clock = FakeClock(1_700_000_000)
    gw = make_gateway(clock=clock)
    body = {"model": "m-small", "messages": [{"role": "user", "content": "x"}]}

    def post(token, payload=None):
        return gw.handle("POST", "/v1/chat/completions",
                         {"Authorization": f"Bearer {token}"},
                         json.dumps(payload or body).encode())

    assert post("garbage").status == 401
    stranger = make_credential("ghost")
    assert post(mint(credential=stranger, jti="J-a")[0]).status == 401
    expired, _ = mint(iat=int(clock()) - 100, ttl=5, jti="J-b")
    assert post(expired).status == 401
    mismatched, _ = mint(model="m-large", jti="J-c")
    assert post(mismatched, {**body, "model": "m-small"}).status == 403
    over, _ = mint(max_tokens=4, jti="J-d")
    assert post(over, {**body, "max_tokens": 400}).status == 403
    assert gw.engine.calls == 0
    assert gw.stats["rejections"]["malformed"] == 1
    assert gw.stats["rejections"]["unknown_issuer"] == 1
    assert gw.stats["rejections"]["expired"] == 1
    assert gw.stats["rejections"]["model_mismatch"] == 1
    assert gw.stats["rejections"]["token_budget_exceeded"] == 1


# ---------------------------------------------------------------------------
# callback dispatch
# ---------------------------------------------------------------------------

def wait_until(predicate, timeout=5.0, step=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(step)
    return False


def test_callback_delivered_once_on_happy_path():
    sink, server = run_sink()
    try:
        gw = make_gateway(clock=FakeClock(1_700_000_001), natural_min=3, natural_max=3)
        token, claims = mint(callback_url=f"{server.url}/v1/callback")
        request = chat_request()
        gw.authorize(token, request)
        response = gw.invoke(claims, request)
        gw.dispatch_callback(claims, response)
        gw.drain_callbacks()
        assert len(sink.received) == 1
        note = sink.received[0]
        assert note["jti"] == claims.jti
        assert note["usage"] == {"prompt_tokens": 3, "completion_tokens": 3}
        assert note["finish_reason"] == "stop"
        assert note["response_content"] == response.content
        assert gw.stats["callbacks_delivered"] == 1
    finally:
        server.stop()


def test_callback_retries_after_5xx():
    sink, server = run_sink(script=[503])
    try:
        gw = make_gateway(clock=FakeClock(1_700_000_001), natural_min=3, natural_max=3)
        token, claims = mint(callback_url=f"{server.url}/v1/callback")
        request = chat_request()
        gw.authorize(token, request)
        gw.dispatch_callback(claims, gw.invoke(claims, request))
        gw.drain_callbacks()
        assert sink.requests == 2
        assert len(sink.received) == 1
        assert gw.stats["callbacks_delivered"] == 1
    finally:
        server.stop()


def test_callback_retries_after_connection_failure():
    # Reserve a port, keep it closed during the first attempt, then start
    # the sink on it so the retry lands.
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()

    gw = make_gateway(clock=FakeClock(1_700_000_001), natural_min=3, natural_max=3)
    token, claims = mint(callback_url=f"http://127.0.0.1:{port}/v1/callback")
    request = chat_request()
    gw.authorize(token, request)

    from dynaseal.httpio import ServiceServer
    from helpers import CallbackSink
    sink = CallbackSink()
    started = {}

    def start_late():
        time.sleep(0.1)  # after the first attempt fails
        server = ServiceServer(sink, port=port)
        started["server"] = server
        threading.Thread(target=server.serve_forever, daemon=True).start()

    threading.Thread(target=start_late, daemon=True).start()
    gw.dispatch_callback(claims, gw.invoke(claims, request))
    gw.drain_callbacks()
    assert len(sink.received) == 1
    started["server"].shutdown()


def test_callback_abandoned_after_all_attempts():
    gw = make_gateway(clock=FakeClock(1_700_000_001), natural_min=3, natural_max=3)
    token, claims = mint(callback_url="http://127.0.0.1:1/v1/callback")
    request = chat_request()
    gw.authorize(token, request)
    response = gw.invoke(claims, request)  # the edge already has its response
    gw.dispatch_callback(claims, response)
    gw.drain_callbacks(timeout=10)
    assert gw.stats["callbacks_abandoned"] == 1
    assert response.usage.completion_tokens == 3


# ---------------------------------------------------------------------------
# HTTP surface, streaming, and disconnect handling
# ---------------------------------------------------------------------------

def test_http_stream_roundtrip():
    stack = build_stack(natural_min=6, natural_max=6)
    try:
        client = stack.edge_client()
        response = client.chat([{"role": "user", "content": "hi there"}], max_tokens=50, stream=True)
        assert response.usage.completion_tokens == 6
        assert response.finish_reason == "stop"
        assert len(response.content.split()) == 6
        assert wait_until(lambda: stack.backend.ledger.counts()["COMPLETED"] == 1)
    finally:
        stack.close()


def test_stream_grammar_on_the_wire():
    stack = build_stack(natural_min=4, natural_max=4)
    try:
        token, _ = stack.backend.issue_token("dev-1", "m-small", 32)
        reply = request_stream(
            f"{stack.gateway_url}/v1/chat/completions",
            payload={"model": "m-small", "messages": [{"role": "user", "content": "x"}], "stream": True},
            headers={"Authorization": f"Bearer {token}"},
        )
        lines = [json.loads(l) for l in reply.iter_lines()]
        reply.close()
        assert reply.status == 200
        assert [set(l) for l in lines[:-1]] == [{"delta"}] * 4
        tail = lines[-1]
        assert set(tail) == {"usage", "finish_reason", "id"}
        _h, claims = parse_unverified(token)
        assert tail["id"] == claims.jti
    finally:
        stack.close()


def test_client_disconnect_aborts_generation_and_still_reports():
    stack = build_stack(natural_min=60, natural_max=60, stream_chunk_delay=0.003)
    try:
        token, _ = stack.backend.issue_token("dev-1", "m-small", 100)
        reply = request_stream(
            f"{stack.gateway_url}/v1/chat/completions",
            payload={"model": "m-small", "messages": [{"role": "user", "content": "x"}], "stream": True},
            headers={"Authorization": f"Bearer {token}"},
        )
        it = reply.iter_lines()
        next(it)
        next(it)
        reply.close()  # hang up mid-stream
        assert wait_until(lambda: stack.backend.ledger.counts()["COMPLETED"] == 1, timeout=10)
        entry = [e for e in stack.backend.ledger.entries() if e.state == "COMPLETED"][0]
        assert 1 <= entry.usage.completion_tokens < 60
    finally:
        stack.close()


def test_error_envelope_codes_on_the_wire():
    stack = build_stack()
    try:
        url = f"{stack.gateway_url}/v1/chat/completions"
        body = {"model": "m-small", "messages": [{"role": "user", "content": "x"}]}
        reply = request_json(url, payload=body, headers={"Authorization": "Bearer junk"})
        assert reply.status == 401
        assert reply.json()["error"]["code"] == "malformed"

        token, _ = stack.backend.issue_token("dev-1", "m-small", 8)
        reply = request_json(url, payload={**body, "model": "m-large"},
                             headers={"Authorization": f"Bearer {token}"})
        assert reply.status == 403
        assert reply.json()["error"]["code"] == "model_mismatch"

        token2, _ = stack.backend.issue_token("dev-1", "m-small", 8)
        reply = request_json(url, payload=body, headers={"Authorization": f"Bearer {token2}"})
        assert reply.status == 200
        replayed = request_json(url, payload=body, headers={"Authorization": f"Bearer {token2}"})
        assert replayed.status == 401
        assert replayed.json()["error"]["code"] == "replay_detected"
    finally:
        stack.close()


def test_unknown_issuer_indistinguishable_from_bad_signature_on_wire():
    stack = build_stack()
    try:
        url = f"{stack.gateway_url}/v1/chat/completions"
        body = {"model": "m-small", "messages": [{"role": "user", "content": "x"}]}
        stranger = make_credential("nobody01")
        foreign, _ = mint(credential=stranger)
        wrong_key = mint(credential=make_credential(stack.credential.user_id))[0]

        replies = [request_json(url, payload=body, headers={"Authorization": f"Bearer {t}"})
                   for t in (foreign, wrong_key)]
        assert [r.status for r in replies] == [401, 401]
        # byte-identical bodies: probing cannot reveal which issuer ids exist
        assert replies[0].body == replies[1].body
        assert replies[0].json()["error"]["code"] == "bad_signature"
        stats = request_json(f"{stack.gateway_url}/v1/stats", method="GET").json()
        assert stats["rejections"]["unknown_issuer"] == 1  # distinct only here and in logs
        assert stats["rejections"]["bad_signature"] == 1
    finally:
        stack.close()


def test_stats_endpoint():
    stack = build_stack(natural_min=3, natural_max=3)
    try:
        client = stack.edge_client()
        client.chat([{"role": "user", "content": "x"}], max_tokens=8)
        reply = request_json(f"{stack.gateway_url}/v1/stats", method="GET")
        stats = reply.json()
        assert stats["engine_calls"] == 1
        assert stats["authorize_ok"] == 1
    finally:
        stack.close()


def test_unserved_model_is_unknown_model():
    stack = build_stack(served_models=("m-small",),
                        allowed_models={"default": {"m-small", "m-ghost"}})
    try:
        token, _ = stack.backend.issue_token("dev-1", "m-ghost", 8)
        reply = request_json(
            f"{stack.gateway_url}/v1/chat/completions",
            payload={"model": "m-ghost", "messages": [{"role": "user", "content": "x"}]},
            headers={"Authorization": f"Bearer {token}"},
        )
        assert reply.status == 404
        assert reply.json()["error"]["code"] == "unknown_model"
    finally:
        stack.close()
