export {
  BackendUnavailable,
  EdgeClient,
  GatewayRejected,
  IssueRefused,
} from './client.js';
export type { ChatMessage, EdgeConfig, InvocationResponse, Usage } from './client.js';
export { TokenError, b64urlDecode, canonicalClaimsJson, decodeCompact, verifyCompact } from './token.js';
export type { DynasealClaims, TokenErrorCode, VerifyOptions } from './token.js';
