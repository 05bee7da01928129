import random
import uuid

import pytest

from dynaseal.backend import (
    BackendConfig,
    BackendService,
    BadCallbackAuth,
    BadDeviceAuth,
    CallbackNotification,
    DeviceAccount,
    InvalidRequest,
    IssuePolicy,
    Ledger,
    LedgerEntry,
    ModelNotAllowed,
    RateLimited,
    StateConflict,
    UnknownJti,
    COMPLETED,
    EXPIRED,
    ISSUED,
)
from dynaseal.gateway import Usage
from dynaseal.stack import FakeClock, make_credential
from dynaseal.tokens import parse_unverified


def make_backend(ttl=5, ceiling=128, rate=100_000, ledger_path=None, clock=None,
                 allowed=None) -> BackendService:
    config = BackendConfig(
        credential=make_credential("issuer01"),
        callback_auth_secret="cb-secret",
        policy=IssuePolicy(
            allowed_models=allowed or {"default": {"m-small", "m-large"}},
            max_tokens_ceiling=ceiling,
            token_ttl=ttl,
            per_device_rate=rate,
        ),
        devices={"dev1": DeviceAccount("dev1", "dev1-secret")},
        callback_url="http://127.0.0.1:1/v1/callback",
        ledger_path=ledger_path,
    )
    return BackendService(config, clock=clock or FakeClock())


def issued_notification(jti, completion=3, content="alpha beta gamma"):
    return CallbackNotification(
        jti=jti,
        model="m-small",
        usage=Usage(prompt_tokens=2, completion_tokens=completion),
        finish_reason="stop",
        response_content=content,
        completed_at=1_700_000_010,
    )


# ---------------------------------------------------------------------------
# Issuance
# ---------------------------------------------------------------------------

def test_issue_passes_requested_cap_through_under_ceiling():
    backend = make_backend()
    token, exp = backend.issue_token("dev1", "m-small", 64)
    _h, claims = parse_unverified(token)
    assert claims.max_tokens == 64
    assert claims.model == "m-small"
    assert claims.device_id == "dev1"
    assert exp == claims.exp == claims.iat + 5
    entry = backend.ledger.get(claims.jti)
    assert entry is not None and entry.state == ISSUED


def test_issue_clamps_to_ceiling():
    backend = make_backend(ceiling=128)
    token, _ = backend.issue_token("dev1", "m-small", 10_000)
    _h, claims = parse_unverified(token)
    assert claims.max_tokens == 128


def test_issue_forbidden_model():
    backend = make_backend()
    with pytest.raises(ModelNotAllowed):
        backend.issue_token("dev1", "m-forbidden", 64)


def test_issue_rejects_nonpositive_budget():
    backend = make_backend()
    with pytest.raises(InvalidRequest):
        backend.issue_token("dev1", "m-small", 0)
    with pytest.raises(InvalidRequest):
        backend.issue_token("dev1", "m-small", True)


def test_issue_unknown_device():
    backend = make_backend()
    with pytest.raises(BadDeviceAuth):
        backend.issue_token("ghost", "m-small", 8)


def test_rate_limit():
    clock = FakeClock()
    backend = make_backend(rate=3, clock=clock)
    for _ in range(3):
        backend.issue_token("dev1", "m-small", 8)
    with pytest.raises(RateLimited):
        backend.issue_token("dev1", "m-small", 8)
    clock.advance(61)
    backend.issue_token("dev1", "m-small", 8)


def test_issued_cap_never_exceeds_ceiling_property():
    backend = make_backend(ceiling=77)
    rng = random.Random(5)
    for _ in range(200):
        token, _ = backend.issue_token("dev1", "m-small", rng.randrange(1, 10_000))
        _h, claims = parse_unverified(token)
        assert 1 <= claims.max_tokens <= 77


def test_jti_unique_at_generator_scale():
    backend = make_backend()
    n = 1_000_000
    seen = {backend._new_jti() for _ in range(n)}
    assert len(seen) == n


def test_jti_unique_over_full_issue_path():
    backend = make_backend()
    jtis = set()
    for _ in range(2000):
        token, _ = backend.issue_token("dev1", "m-small", 8)
        _h, claims = parse_unverified(token)
        assert claims.jti not in jtis
        uuid.UUID(claims.jti)  # UUID format
        jtis.add(claims.jti)


# ---------------------------------------------------------------------------
# Callbacks
# ---------------------------------------------------------------------------

def issue_one(backend) -> str:
    token, _ = backend.issue_token("dev1", "m-small", 64)
    _h, claims = parse_unverified(token)
    return claims.jti


def test_callback_completes_entry():
    backend = make_backend()
    jti = issue_one(backend)
    result = backend.handle_callback(issued_notification(jti), "cb-secret")
    assert result == {"status": "ok", "duplicate": False}
    entry = backend.ledger.get(jti)
    assert entry.state == COMPLETED
    assert entry.usage == Usage(2, 3)
    assert entry.response_digest and len(entry.response_digest) == 64


def test_callback_is_idempotent():
    backend = make_backend()
    jti = issue_one(backend)
    backend.handle_callback(issued_notification(jti), "cb-secret")
    result = backend.handle_callback(issued_notification(jti), "cb-secret")
    assert result["duplicate"] is True
    assert backend.ledger.counts()[COMPLETED] == 1


def test_duplicate_with_different_usage_conflicts():
    backend = make_backend()
    jti = issue_one(backend)
    backend.handle_callback(issued_notification(jti, completion=3), "cb-secret")
    with pytest.raises(StateConflict):
        backend.handle_callback(issued_notification(jti, completion=9), "cb-secret")


def test_callback_for_unknown_jti():
    backend = make_backend()
    with pytest.raises(UnknownJti):
        backend.handle_callback(issued_notification(str(uuid.uuid4())), "cb-secret")


def test_callback_auth_required():
    backend = make_backend()
    jti = issue_one(backend)
    with pytest.raises(BadCallbackAuth):
        backend.handle_callback(issued_notification(jti), "wrong")
    with pytest.raises(BadCallbackAuth):
        backend.handle_callback(issued_notification(jti), None)


def test_callback_rejects_overrun_usage():
    backend = make_backend()
    jti = issue_one(backend)
    with pytest.raises(InvalidRequest):
        backend.handle_callback(issued_notification(jti, completion=65), "cb-secret")


# ---------------------------------------------------------------------------
# Expiry sweep and state machine
# ---------------------------------------------------------------------------

def test_sweep_empty_ledger():
    backend = make_backend()
    assert backend.sweep_expired() == 0


def test_sweep_expires_overdue_issued_entries():
    clock = FakeClock(1_700_000_000)
    backend = make_backend(ttl=5, clock=clock)
    jti = issue_one(backend)
    # grace equals ttl; not yet due
    clock.advance(5 + 5)
    assert backend.sweep_expired() == 0
    clock.advance(1)
    assert backend.sweep_expired() == 1
    assert backend.ledger.get(jti).state == EXPIRED


def test_sweep_leaves_completed_entries_alone():
    clock = FakeClock(1_700_000_000)
    backend = make_backend(ttl=5, clock=clock)
    jti = issue_one(backend)
    backend.handle_callback(issued_notification(jti), "cb-secret")
    clock.advance(1000)
    assert backend.sweep_expired() == 0
    assert backend.ledger.get(jti).state == COMPLETED


def test_no_completion_after_expiry():
    clock = FakeClock(1_700_000_000)
    backend = make_backend(ttl=5, clock=clock)
    jti = issue_one(backend)
    clock.advance(1000)
    backend.sweep_expired()
    with pytest.raises(StateConflict):
        backend.handle_callback(issued_notification(jti), "cb-secret")
    assert backend.ledger.get(jti).state == EXPIRED


def test_terminal_states_are_exclusive_under_races():
    # Drive the two transitions in both orders; the loser must always fail.
    for first in ("complete", "expire"):
        clock = FakeClock(1_700_000_000)
        backend = make_backend(ttl=5, clock=clock)
        jti = issue_one(backend)
        clock.advance(1000)
        if first == "complete":
            backend.handle_callback(issued_notification(jti), "cb-secret")
            assert backend.sweep_expired() == 0
            assert backend.ledger.get(jti).state == COMPLETED
        else:
            backend.sweep_expired()
            with pytest.raises(StateConflict):
                backend.handle_callback(issued_notification(jti), "cb-secret")
            assert backend.ledger.get(jti).state == EXPIRED


# ---------------------------------------------------------------------------
# Ledger persistence
# ---------------------------------------------------------------------------

def test_ledger_persists_and_reloads(tmp_path):
    path = tmp_path / "ledger.jsonl"
    ledger = Ledger(str(path))
    ledger.record_issued(LedgerEntry(jti="a", device_id="dev1", issued_at=10, exp=15,
                                     model="m-small", max_tokens=64))
    ledger.record_issued(LedgerEntry(jti="b", device_id="dev1", issued_at=10, exp=15,
                                     model="m-small", max_tokens=64))
    ledger.complete("a", Usage(2, 3), "d" * 64)
    ledger.expire_due(now=100, grace=5)
    ledger.close()

    reloaded = Ledger(str(path))
    assert reloaded.get("a").state == COMPLETED
    assert reloaded.get("a").usage == Usage(2, 3)
    assert reloaded.get("b").state == EXPIRED
    reloaded.close()


def test_ledger_rejects_duplicate_issue():
    ledger = Ledger(None)
    entry = LedgerEntry(jti="a", device_id="d", issued_at=1, exp=2, model="m", max_tokens=4)
    ledger.record_issued(entry)
    with pytest.raises(StateConflict):
        ledger.record_issued(entry)
