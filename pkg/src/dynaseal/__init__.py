"""Dynaseal: backend-issued, short-lived, signed tokens that let edge
devices call an LLM gateway directly while the backend keeps control of
model choice, token budget, and request lifecycle."""

from .tokens import (
    AlgRejected,
    BadSignature,
    Credential,
    DynasealClaims,
    Expired,
    InvalidClaims,
    InvalidCredential,
    Malformed,
    NotYetValid,
    SignedToken,
    TokenError,
    VerificationPolicy,
    WeakKey,
    parse_unverified,
    sign_token,
    verify_token,
)

__all__ = [
    "AlgRejected",
    "BadSignature",
    "Credential",
    "DynasealClaims",
    "Expired",
    "InvalidClaims",
    "InvalidCredential",
    "Malformed",
    "NotYetValid",
    "SignedToken",
    "TokenError",
    "VerificationPolicy",
    "WeakKey",
    "parse_unverified",
    "sign_token",
    "verify_token",
]

__version__ = "0.1.0"
