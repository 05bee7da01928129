#!/usr/bin/env node
// Example edge-device binary: one chat call through the token flow.
//
//   dynaseal-edge --backend http://127.0.0.1:8081 --gateway http://127.0.0.1:8082 \
//     --device-id dev-1 --device-secret ... --model m-small --max-tokens 32 \
//     --message "hello" [--stream]

import { parseArgs } from 'node:util';
import { EdgeClient } from './client.js';

const { values } = parseArgs({
  options: {
    backend: { type: 'string' },
    gateway: { type: 'string' },
    'device-id': { type: 'string' },
    'device-secret': { type: 'string' },
    model: { type: 'string', default: 'm-small' },
    'max-tokens': { type: 'string', default: '64' },
    message: { type: 'string' },
    stream: { type: 'boolean', default: false },
  },
});

function usageError(missing: string): never {
  console.error(`error: --${missing} is required`);
  process.exit(2);
}

const backend = values.backend ?? usageError('backend');
const gateway = values.gateway ?? usageError('gateway');
const deviceId = values['device-id'] ?? usageError('device-id');
const deviceSecret = values['device-secret'] ?? usageError('device-secret');
const message = values.message ?? usageError('message');
const maxTokens = Number.parseInt(values['max-tokens'] ?? '64', 10);
if (!Number.isInteger(maxTokens) || maxTokens < 1) usageError('max-tokens');

const client = new EdgeClient({
  backendUrl: backend,
  gatewayUrl: gateway,
  deviceId,
  deviceSecret,
  defaultModel: values.model ?? 'm-small',
});

try {
  const response = await client.chat([{ role: 'user', content: message }], {
    model: values.model,
    maxTokens,
    stream: values.stream,
  });
  console.log(response.content.trim());
  console.error(
    `[model=${response.model} prompt_tokens=${response.usage.prompt_tokens} ` +
      `completion_tokens=${response.usage.completion_tokens} finish_reason=${response.finish_reason}]`,
  );
} catch (err) {
  console.error(`error: ${err instanceof Error ? err.message : String(err)}`);
  process.exit(1);
}
