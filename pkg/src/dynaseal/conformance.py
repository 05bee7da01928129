"""Shared conformance fixtures for cross-language clients.

Deterministic JSON files (committed under fixtures/) that every client
implementation must interpret identically: token vectors with expected
verification outcomes, and constraint scenarios to run against a live
stack. The checked-in files are regenerated by tests and byte-compared,
so they can never drift from the implementation.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

from .tokens import Credential, DynasealClaims, b64url_encode, hmac_sha256, sign_token

FIXTURE_LEEWAY = 0.5

# Deterministic kv-pair, for fixtures only.
FIXTURE_CREDENTIAL = Credential(
    user_id="fixture-issuer-01",
    secret_key=hashlib.sha256(b"dynaseal-conformance-fixture-key").digest(),
)
FIXTURE_WRONG_CREDENTIAL = Credential(
    user_id="fixture-issuer-01",
    secret_key=hashlib.sha256(b"some-other-key-entirely").digest(),
)

_IAT = 1_700_000_000
_TTL = 5

_BASE_CLAIMS = DynasealClaims(
    api_key=FIXTURE_CREDENTIAL.user_id,
    model="m-small",
    max_tokens=64,
    iat=_IAT,
    exp=_IAT + _TTL,
    jti="11111111-2222-3333-4444-555555555555",
    callback_url="http://backend.example/v1/callback",
)

_DEVICE_CLAIMS = DynasealClaims(
    api_key=FIXTURE_CREDENTIAL.user_id,
    model="m-large",
    max_tokens=8,
    iat=_IAT,
    exp=_IAT + 1,
    jti="aaaaaaaa-bbbb-cccc-dddd-eeeeeeeeeeee",
    callback_url="http://backend.example/v1/callback",
    device_id="edge-device-7",
)


def _signed_segments(header_json: bytes, payload_json: bytes, credential: Credential) -> str:
    """Assemble a compact token over arbitrary (possibly invalid) payload bytes."""
    h = b64url_encode(header_json)
    c = b64url_encode(payload_json)
    sig = hmac_sha256(credential.secret_key, f"{h}.{c}".encode("ascii"))
    return f"{h}.{c}.{b64url_encode(sig)}"


def _valid_case(name: str, claims: DynasealClaims, now: float) -> dict:
    compact = sign_token(claims, FIXTURE_CREDENTIAL).compact_form
    return {
        "name": name,
        "compact": compact,
        "now": now,
        "expect": "valid",
        "claims": claims.to_wire_dict(),
        "claims_canonical_json": claims.canonical_json().decode("ascii"),
    }


def _error_case(name: str, compact: str, now: float, *codes: str) -> dict:
    return {"name": name, "compact": compact, "now": now, "expect": list(codes)}


def build_token_cases() -> list:
    base = sign_token(_BASE_CLAIMS, FIXTURE_CREDENTIAL).compact_form
    h, c, s = base.split(".")

    # A middle-of-signature character swap always changes the decoded MAC.
    mid = len(s) // 2
    bad_sig = f"{h}.{c}." + s[:mid] + ("A" if s[mid] != "A" else "B") + s[mid + 1:]

    wrong_key = sign_token(_BASE_CLAIMS, FIXTURE_WRONG_CREDENTIAL).compact_form

    unknown_key_payload = dict(_BASE_CLAIMS.to_wire_dict(), admin=True)
    nonint_payload = dict(_BASE_CLAIMS.to_wire_dict(), max_tokens="64")

    header = b'{"alg":"HS256","typ":"JWT"}'
    cases = [
        _valid_case("valid_basic", _BASE_CLAIMS, now=_IAT),
        _valid_case("valid_with_device_id_near_expiry", _DEVICE_CLAIMS, now=_DEVICE_CLAIMS.exp - 0.25),
        _error_case("expired_past_leeway", base, _BASE_CLAIMS.exp + FIXTURE_LEEWAY + 1, "expired"),
        _error_case("not_yet_valid", base, _IAT - 2, "not_yet_valid"),
        _error_case("signature_flipped", bad_sig, _IAT, "bad_signature"),
        _error_case("signed_with_wrong_key", wrong_key, _IAT, "bad_signature"),
        _error_case(
            "alg_none",
            _signed_segments(b'{"alg":"none","typ":"JWT"}', _BASE_CLAIMS.canonical_json(),
                             FIXTURE_CREDENTIAL).rsplit(".", 1)[0] + ".",
            _IAT, "alg_rejected"),
        _error_case(
            "alg_hs384",
            _signed_segments(b'{"alg":"HS384","typ":"JWT"}', _BASE_CLAIMS.canonical_json(),
                             FIXTURE_CREDENTIAL),
            _IAT, "alg_rejected"),
        _error_case("no_separators", "AAAA", _IAT, "malformed"),
        _error_case("padded_signature", f"{h}.{c}.{s}==", _IAT, "malformed"),
        _error_case(
            "payload_not_json",
            _signed_segments(header, b"{not json at all", FIXTURE_CREDENTIAL),
            _IAT, "malformed"),
        _error_case(
            "unknown_claim_key",
            _signed_segments(header,
                             json.dumps(unknown_key_payload, separators=(",", ":")).encode(),
                             FIXTURE_CREDENTIAL),
            _IAT, "malformed"),
        _error_case(
            "string_max_tokens",
            _signed_segments(header,
                             json.dumps(nonint_payload, separators=(",", ":")).encode(),
                             FIXTURE_CREDENTIAL),
            _IAT, "malformed"),
    ]
    return cases


def build_request_cases() -> list:
    """Constraint scenarios every client must observe against a live stack."""
    return [
        {"name": "within_budget", "issue": {"model": "m-small", "max_tokens": 16},
         "request": {"model": "m-small", "max_tokens": 8}, "expect": "ok"},
        {"name": "no_request_cap", "issue": {"model": "m-small", "max_tokens": 16},
         "request": {"model": "m-small"}, "expect": "ok"},
        {"name": "model_mismatch", "issue": {"model": "m-small", "max_tokens": 16},
         "request": {"model": "m-large", "max_tokens": 8}, "expect": ["model_mismatch"]},
        {"name": "budget_exceeded", "issue": {"model": "m-small", "max_tokens": 16},
         "request": {"model": "m-small", "max_tokens": 64}, "expect": ["token_budget_exceeded"]},
        {"name": "replayed_token", "issue": {"model": "m-small", "max_tokens": 16},
         "request": {"model": "m-small", "max_tokens": 8}, "action": "present_twice",
         "expect": ["replay_detected"]},
        {"name": "tampered_token", "issue": {"model": "m-small", "max_tokens": 16},
         "request": {"model": "m-small", "max_tokens": 8}, "action": "tamper",
         "expect": ["bad_signature", "malformed"]},
    ]


def fixture_payloads() -> dict:
    """filename -> JSON-serializable payload for every fixture file."""
    return {
        "credential.json": {
            "user_id": FIXTURE_CREDENTIAL.user_id,
            "secret_key_b64": base64.b64encode(FIXTURE_CREDENTIAL.secret_key).decode("ascii"),
        },
        "tokens.json": {"leeway": FIXTURE_LEEWAY, "cases": build_token_cases()},
        "requests.json": {"cases": build_request_cases()},
    }


def write_fixtures(directory: str) -> list:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for filename, payload in fixture_payloads().items():
        path = out / filename
        path.write_text(json.dumps(payload, indent=2) + "\n")
        written.append(path)
    return written
