"""Dynaseal token format: claims, canonical serialization, HMAC signing, verification.

A Dynaseal token is a compact JWT (HS256 only) whose payload embeds the
invocation constraints the issuing backend wants enforced downstream:
the model name and the generated-token budget, plus lifecycle plumbing
(jti for single-use tracking, callback_url for completion reports).

Everything here is a pure function of its inputs; the clock is injected
through VerificationPolicy, so issuer, gateway, and tests can all share
this module without hidden state.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional
from urllib.parse import urlparse

# Longest claim lifetime sign_token will mint, in seconds. The protocol
# wants lifetimes around one second; five gives tests room.
DEFAULT_MAX_TTL = 5.0

# Exact header bytes for every token this module produces.
HEADER_JSON = b'{"alg":"HS256","typ":"JWT"}'

MIN_SECRET_LEN = 32

_B64URL_RE = re.compile(r"^[A-Za-z0-9_-]+$")

# Wire-level claim keys, in canonical serialization order.
CLAIM_KEYS = ("api_key", "model", "max_tokens", "iat", "exp", "jti", "callback_url", "device_id")


class TokenError(Exception):
    """Base class for token failures; `code` is stable and machine-readable."""

    code = "token_error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class InvalidClaims(TokenError):
    code = "invalid_claims"


class InvalidCredential(TokenError):
    code = "invalid_credential"


class WeakKey(InvalidCredential):
    code = "weak_key"


class Malformed(TokenError):
    code = "malformed"


class AlgRejected(TokenError):
    code = "alg_rejected"


class BadSignature(TokenError):
    code = "bad_signature"


class Expired(TokenError):
    code = "expired"


class NotYetValid(TokenError):
    code = "not_yet_valid"


@dataclass(frozen=True)
class Credential:
    """The (user_id, secret_key) kv-pair shared by a backend and the provider.

    The provider hands this out once; the backend signs tokens with
    secret_key and the provider locates it again via the api_key claim.
    """

    user_id: str
    secret_key: bytes

    def validate(self) -> None:
        if not self.user_id:
            raise InvalidCredential("user_id must be non-empty")
        if any(c.isspace() for c in self.user_id) or "." in self.user_id:
            raise InvalidCredential("user_id must not contain whitespace or '.'")
        if not isinstance(self.secret_key, (bytes, bytearray)):
            raise InvalidCredential("secret_key must be bytes")
        if len(self.secret_key) < MIN_SECRET_LEN:
            raise WeakKey(f"secret_key must be at least {MIN_SECRET_LEN} bytes, got {len(self.secret_key)}")


@dataclass(frozen=True)
class DynasealClaims:
    """Payload of a Dynaseal token.

    api_key identifies the issuing backend to the provider (it is the
    credential's user_id). model and max_tokens are the invocation
    constraints the gateway enforces. iat/exp bound the lifetime, jti
    makes the token single-use, callback_url routes the completion
    report back to the issuer.
    """

    api_key: str
    model: str
    max_tokens: int
    iat: int
    exp: int
    jti: str
    callback_url: str
    device_id: Optional[str] = None

    def validate(self, max_ttl: float = DEFAULT_MAX_TTL) -> None:
        """Raise InvalidClaims unless every payload invariant holds."""
        if not self.api_key or any(c.isspace() for c in self.api_key) or "." in self.api_key:
            raise InvalidClaims("api_key must be a non-empty identifier")
        if not self.model:
            raise InvalidClaims("model must be non-empty")
        if not isinstance(self.max_tokens, int) or isinstance(self.max_tokens, bool) or self.max_tokens < 1:
            raise InvalidClaims("max_tokens must be an integer >= 1")
        for name in ("iat", "exp"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise InvalidClaims(f"{name} must be an integer (Unix seconds)")
        if self.exp <= self.iat:
            raise InvalidClaims("exp must be strictly after iat")
        if self.exp - self.iat > max_ttl:
            raise InvalidClaims(f"lifetime {self.exp - self.iat}s exceeds max ttl {max_ttl}s")
        if not self.jti:
            raise InvalidClaims("jti must be non-empty")
        parsed = urlparse(self.callback_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise InvalidClaims("callback_url must be an http(s) URL")
        if self.device_id is not None and not isinstance(self.device_id, str):
            raise InvalidClaims("device_id must be a string when present")

    def to_wire_dict(self) -> dict:
        """Claims as the exact wire mapping (device_id omitted when absent)."""
        d: dict[str, Any] = {
            "api_key": self.api_key,
            "model": self.model,
            "max_tokens": self.max_tokens,
            "iat": self.iat,
            "exp": self.exp,
            "jti": self.jti,
            "callback_url": self.callback_url,
        }
        if self.device_id is not None:
            d["device_id"] = self.device_id
        return d

    def canonical_json(self) -> bytes:
        """Canonical serialization: fixed key order, no insignificant whitespace.

        Signing this fixed byte form makes sign_token deterministic and
        lets independent implementations reproduce the payload bit-exactly.
        """
        return json.dumps(self.to_wire_dict(), separators=(",", ":"), ensure_ascii=True).encode("ascii")

    @classmethod
    def from_wire_dict(cls, d: Any) -> "DynasealClaims":
        """Decode a parsed claims mapping, strictly.

        Unknown keys, missing keys, or wrongly-typed values raise
        Malformed: the wire claim set is closed.
        """
        if not isinstance(d, dict):
            raise Malformed("claims must be a JSON object")
        unknown = set(d) - set(CLAIM_KEYS)
        if unknown:
            raise Malformed(f"unknown claim keys: {sorted(unknown)}")
        try:
            api_key, model, jti, callback_url = d["api_key"], d["model"], d["jti"], d["callback_url"]
            max_tokens, iat, exp = d["max_tokens"], d["iat"], d["exp"]
        except KeyError as e:
            raise Malformed(f"missing claim key: {e.args[0]}") from None
        for name, v in (("api_key", api_key), ("model", model), ("jti", jti), ("callback_url", callback_url)):
            if not isinstance(v, str):
                raise Malformed(f"claim {name} must be a string")
        for name, v in (("max_tokens", max_tokens), ("iat", iat), ("exp", exp)):
            if not isinstance(v, int) or isinstance(v, bool):
                raise Malformed(f"claim {name} must be an integer")
        device_id = d.get("device_id")
        if device_id is not None and not isinstance(device_id, str):
            raise Malformed("claim device_id must be a string")
        return cls(
            api_key=api_key,
            model=model,
            max_tokens=max_tokens,
            iat=iat,
            exp=exp,
            jti=jti,
            callback_url=callback_url,
            device_id=device_id,
        )


@dataclass(frozen=True)
class SignedToken:
    """A signed token plus its compact wire form `b64url(h).b64url(c).b64url(mac)`."""

    header: dict
    claims: DynasealClaims
    signature: bytes
    compact_form: str


@dataclass(frozen=True)
class VerificationPolicy:
    """How to judge token freshness.

    clock_leeway absorbs clock skew between issuer and verifier; `now`
    is the injectable clock so tests and harnesses control time.
    expected_audience is accepted for API completeness but inert: the
    wire claim set defines no audience key to compare it against.
    """

    clock_leeway: float = 0.5
    now: Callable[[], float] = field(default=time.time)
    expected_audience: Optional[str] = None

    def __post_init__(self):
        if not (0 <= self.clock_leeway <= 2):
            raise ValueError("clock_leeway must be between 0 and 2 seconds")


def b64url_encode(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def b64url_decode(seg: str) -> bytes:
    """Strict unpadded base64url decode.

    Rejects padding characters, non-alphabet characters, impossible
    lengths, and non-canonical trailing bits (two different strings must
    never decode to the same bytes, or single-character tampering of a
    signature segment could go unnoticed).
    """
    if not seg or not _B64URL_RE.fullmatch(seg):
        raise Malformed("segment is not unpadded base64url")
    pad = -len(seg) % 4
    if pad == 3:
        raise Malformed("segment length is not a valid base64url length")
    raw = base64.urlsafe_b64decode(seg + "=" * pad)
    if base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii") != seg:
        raise Malformed("segment is not canonical base64url")
    return raw


def hmac_sha256(key: bytes, data: bytes) -> bytes:
    """The MAC primitive used for all token signatures."""
    return hmac.new(key, data, hashlib.sha256).digest()


def _split_compact(compact: str) -> tuple[str, str, str]:
    if not isinstance(compact, str):
        raise Malformed("token must be a string")
    parts = compact.split(".")
    if len(parts) != 3:
        raise Malformed(f"expected 3 dot-separated segments, got {len(parts)}")
    return parts[0], parts[1], parts[2]


def _decode_json(raw: bytes, what: str) -> Any:
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise Malformed(f"{what} is not valid JSON: {e}") from None


def sign_token(claims: DynasealClaims, credential: Credential, max_ttl: float = DEFAULT_MAX_TTL) -> SignedToken:
    """Sign claims with the credential's secret key.

    Deterministic: identical inputs produce a byte-identical compact form.

    Raises:
        InvalidClaims: a payload invariant is violated (e.g. exp <= iat).
        WeakKey: secret_key is shorter than 32 bytes.
        InvalidCredential: user_id is structurally invalid.
    """
    credential.validate()
    claims.validate(max_ttl=max_ttl)
    header_b64 = b64url_encode(HEADER_JSON)
    claims_b64 = b64url_encode(claims.canonical_json())
    signing_input = f"{header_b64}.{claims_b64}".encode("ascii")
    signature = hmac_sha256(credential.secret_key, signing_input)
    compact = f"{header_b64}.{claims_b64}.{b64url_encode(signature)}"
    return SignedToken(
        header={"alg": "HS256", "typ": "JWT"},
        claims=claims,
        signature=signature,
        compact_form=compact,
    )


def verify_token(compact: str, credential: Credential, policy: VerificationPolicy) -> DynasealClaims:
    """Verify a compact token and return its claims.

    Accepts arbitrary strings. Check order is fixed: structure, then
    algorithm, then MAC (constant time), and only then are the claims
    interpreted and the freshness window applied.

    Raises:
        Malformed: bad structure, base64, JSON, or claim schema.
        AlgRejected: header algorithm is anything but exactly "HS256".
        BadSignature: MAC mismatch under this credential.
        Expired: now >= exp + leeway.
        NotYetValid: now < iat - leeway.
    """
    header_b64, claims_b64, sig_b64 = _split_compact(compact)
    header = _decode_json(b64url_decode(header_b64), "header")
    if not isinstance(header, dict):
        raise Malformed("header is not a JSON object")
    if header.get("alg") != "HS256":
        raise AlgRejected(f"algorithm {header.get('alg')!r} is not accepted")
    signature = b64url_decode(sig_b64)
    try:
        signing_input = f"{header_b64}.{claims_b64}".encode("ascii")
    except UnicodeEncodeError:
        raise Malformed("token is not ASCII") from None
    expected = hmac_sha256(credential.secret_key, signing_input)
    if not hmac.compare_digest(expected, signature):
        raise BadSignature("MAC mismatch")
    claims = DynasealClaims.from_wire_dict(_decode_json(b64url_decode(claims_b64), "claims"))
    now = policy.now()
    if now >= claims.exp + policy.clock_leeway:
        raise Expired(f"token expired at {claims.exp}")
    if now < claims.iat - policy.clock_leeway:
        raise NotYetValid(f"token not valid before {claims.iat}")
    return claims


def parse_unverified(compact: str) -> tuple[dict, DynasealClaims]:
    """Decode header and claims without any authenticity check.

    The gateway uses this to learn which key to verify under; callers
    must re-verify before trusting anything returned here.

    Raises:
        Malformed: structurally invalid token.
    """
    header_b64, claims_b64, _sig_b64 = _split_compact(compact)
    header = _decode_json(b64url_decode(header_b64), "header")
    if not isinstance(header, dict):
        raise Malformed("header is not a JSON object")
    claims = DynasealClaims.from_wire_dict(_decode_json(b64url_decode(claims_b64), "claims"))
    return header, claims
