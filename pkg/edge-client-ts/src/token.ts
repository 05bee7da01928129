// Compact-token decoding and local verification for inspection and tests.
// Signing stays server-side: an edge device never holds the provider secret,
// so this module can only check tokens against a key handed to a test.

import { createHmac, timingSafeEqual } from 'node:crypto';

export interface DynasealClaims {
  api_key: string;
  model: string;
  max_tokens: number;
  iat: number;
  exp: number;
  jti: string;
  callback_url: string;
  device_id?: string;
}

export type TokenErrorCode =
  | 'malformed'
  | 'alg_rejected'
  | 'bad_signature'
  | 'expired'
  | 'not_yet_valid';

export class TokenError extends Error {
  constructor(public readonly code: TokenErrorCode, message?: string) {
    super(message ?? code);
    this.name = 'TokenError';
  }
}

const B64URL = /^[A-Za-z0-9_-]+$/;

const CLAIM_KEYS = ['api_key', 'model', 'max_tokens', 'iat', 'exp', 'jti', 'callback_url', 'device_id'] as const;

/** Strict unpadded base64url: canonical form only, so two distinct strings
 * can never decode to the same bytes. */
export function b64urlDecode(segment: string): Buffer {
  if (!segment || !B64URL.test(segment) || segment.length % 4 === 1) {
    throw new TokenError('malformed', 'segment is not unpadded base64url');
  }
  const raw = Buffer.from(segment, 'base64url');
  if (raw.toString('base64url') !== segment) {
    throw new TokenError('malformed', 'segment is not canonical base64url');
  }
  return raw;
}

function parseJson(raw: Buffer, what: string): unknown {
  try {
    return JSON.parse(raw.toString('utf8'));
  } catch {
    throw new TokenError('malformed', `${what} is not valid JSON`);
  }
}

function isInt(v: unknown): v is number {
  return typeof v === 'number' && Number.isInteger(v);
}

function claimsFromWire(obj: unknown): DynasealClaims {
  if (typeof obj !== 'object' || obj === null || Array.isArray(obj)) {
    throw new TokenError('malformed', 'claims must be a JSON object');
  }
  const record = obj as Record<string, unknown>;
  for (const key of Object.keys(record)) {
    if (!(CLAIM_KEYS as readonly string[]).includes(key)) {
      throw new TokenError('malformed', `unknown claim key: ${key}`);
    }
  }
  const { api_key, model, jti, callback_url, max_tokens, iat, exp, device_id } = record;
  for (const [name, value] of Object.entries({ api_key, model, jti, callback_url })) {
    if (typeof value !== 'string') throw new TokenError('malformed', `claim ${name} must be a string`);
  }
  for (const [name, value] of Object.entries({ max_tokens, iat, exp })) {
    if (!isInt(value)) throw new TokenError('malformed', `claim ${name} must be an integer`);
  }
  if (device_id !== undefined && typeof device_id !== 'string') {
    throw new TokenError('malformed', 'claim device_id must be a string');
  }
  const claims: DynasealClaims = {
    api_key: api_key as string,
    model: model as string,
    max_tokens: max_tokens as number,
    iat: iat as number,
    exp: exp as number,
    jti: jti as string,
    callback_url: callback_url as string,
  };
  if (device_id !== undefined) claims.device_id = device_id as string;
  return claims;
}

function split(compact: string): [string, string, string] {
  const parts = compact.split('.');
  if (parts.length !== 3) {
    throw new TokenError('malformed', `expected 3 dot-separated segments, got ${parts.length}`);
  }
  return parts as [string, string, string];
}

/** Decode header and claims with no authenticity guarantee. */
export function decodeCompact(compact: string): { header: Record<string, unknown>; claims: DynasealClaims } {
  const [h, c] = split(compact);
  const header = parseJson(b64urlDecode(h), 'header');
  if (typeof header !== 'object' || header === null || Array.isArray(header)) {
    throw new TokenError('malformed', 'header is not a JSON object');
  }
  return { header: header as Record<string, unknown>, claims: claimsFromWire(parseJson(b64urlDecode(c), 'claims')) };
}

export interface VerifyOptions {
  now: number; // Unix seconds
  leeway?: number;
}

/** Verify structure, algorithm, MAC, and freshness, in that order. */
export function verifyCompact(compact: string, secretKey: Buffer, options: VerifyOptions): DynasealClaims {
  const leeway = options.leeway ?? 0.5;
  const [h, c, s] = split(compact);
  const header = parseJson(b64urlDecode(h), 'header');
  if (typeof header !== 'object' || header === null || Array.isArray(header)) {
    throw new TokenError('malformed', 'header is not a JSON object');
  }
  if ((header as Record<string, unknown>).alg !== 'HS256') {
    throw new TokenError('alg_rejected', `algorithm ${String((header as Record<string, unknown>).alg)} is not accepted`);
  }
  const signature = b64urlDecode(s);
  const expected = createHmac('sha256', secretKey).update(`${h}.${c}`, 'ascii').digest();
  if (signature.length !== expected.length || !timingSafeEqual(signature, expected)) {
    throw new TokenError('bad_signature', 'MAC mismatch');
  }
  const claims = claimsFromWire(parseJson(b64urlDecode(c), 'claims'));
  if (options.now >= claims.exp + leeway) throw new TokenError('expired', `token expired at ${claims.exp}`);
  if (options.now < claims.iat - leeway) throw new TokenError('not_yet_valid', `token not valid before ${claims.iat}`);
  return claims;
}

/** Canonical claims serialization: fixed key order, no insignificant
 * whitespace. Byte-identical to the issuer's signing serialization. */
export function canonicalClaimsJson(claims: DynasealClaims): string {
  const ordered: Record<string, unknown> = {
    api_key: claims.api_key,
    model: claims.model,
    max_tokens: claims.max_tokens,
    iat: claims.iat,
    exp: claims.exp,
    jti: claims.jti,
    callback_url: claims.callback_url,
  };
  if (claims.device_id !== undefined) ordered.device_id = claims.device_id;
  return JSON.stringify(ordered);
}
