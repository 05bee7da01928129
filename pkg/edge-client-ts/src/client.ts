// Edge-device client: request a token from the backend (steps 1-2), spend
// it at the gateway (steps 3-4). The provider credential never exists here;
// the device secret is the only secret this side knows.

export interface EdgeConfig {
  backendUrl: string;
  gatewayUrl: string;
  deviceId: string;
  deviceSecret: string;
  defaultModel: string;
  requestTimeoutMs?: number;
}

export interface ChatMessage {
  role: 'system' | 'user' | 'assistant';
  content: string;
}

export interface Usage {
  prompt_tokens: number;
  completion_tokens: number;
}

export interface InvocationResponse {
  id: string;
  model: string;
  content: string;
  usage: Usage;
  finish_reason: 'stop' | 'length';
}

export class BackendUnavailable extends Error {}

export class IssueRefused extends Error {
  constructor(public readonly reason: string) {
    super(`backend refused to issue a token: ${reason}`);
  }
}

export class GatewayRejected extends Error {
  constructor(public readonly code: string, message = '') {
    super(`gateway rejected request: ${code} ${message}`.trim());
  }
}

// Only a token that aged out between issue and use earns one re-issue.
const RETRYABLE = new Set(['expired']);

interface ChatOptions {
  model?: string;
  maxTokens?: number;
  stream?: boolean;
}

export class EdgeClient {
  tokensAcquired = 0;

  constructor(private readonly config: EdgeConfig) {}

  private timeout(): AbortSignal {
    return AbortSignal.timeout(this.config.requestTimeoutMs ?? 10_000);
  }

  async acquireToken(model?: string, maxTokens = 64): Promise<{ token: string; expiresAt: number }> {
    let res: Response;
    try {
      res = await fetch(`${this.config.backendUrl}/v1/token`, {
        method: 'POST',
        headers: {
          'Content-Type': 'application/json',
          Authorization: `Bearer ${this.config.deviceSecret}`,
        },
        body: JSON.stringify({
          device_id: this.config.deviceId,
          model: model ?? this.config.defaultModel,
          max_tokens: maxTokens,
        }),
        signal: this.timeout(),
      });
    } catch (err) {
      throw new BackendUnavailable(String(err));
    }
    const body = (await res.json()) as Record<string, unknown>;
    if (res.status !== 200) {
      throw new IssueRefused(typeof body.error === 'string' ? body.error : `http_${res.status}`);
    }
    this.tokensAcquired += 1;
    return { token: body.token as string, expiresAt: body.expires_at as number };
  }

  async chat(messages: ChatMessage[], options: ChatOptions = {}): Promise<InvocationResponse> {
    const model = options.model ?? this.config.defaultModel;
    const budget = options.maxTokens ?? 64;
    const { token } = await this.acquireToken(model, budget);
    try {
      return await this.invoke(token, messages, model, options);
    } catch (err) {
      if (!(err instanceof GatewayRejected) || !RETRYABLE.has(err.code)) throw err;
      const reissued = await this.acquireToken(model, budget);
      return this.invoke(reissued.token, messages, model, options);
    }
  }

  async invoke(
    token: string,
    messages: ChatMessage[],
    model: string,
    options: ChatOptions = {},
  ): Promise<InvocationResponse> {
    const body: Record<string, unknown> = { model, messages, stream: options.stream ?? false };
    if (options.maxTokens !== undefined) body.max_tokens = options.maxTokens;
    let res: Response;
    try {
      res = await fetch(`${this.config.gatewayUrl}/v1/chat/completions`, {
        method: 'POST',
        headers: { 'Content-Type': 'application/json', Authorization: `Bearer ${token}` },
        body: JSON.stringify(body),
        signal: this.timeout(),
      });
    } catch (err) {
      throw new GatewayRejected('gateway_unreachable', String(err));
    }
    if (res.status !== 200) {
      const payload = (await res.json()) as { error?: { code?: string; message?: string } };
      throw new GatewayRejected(payload.error?.code ?? `http_${res.status}`, payload.error?.message ?? '');
    }
    if (options.stream) return readStream(res, model);
    const payload = (await res.json()) as {
      id: string;
      model: string;
      choices: { content: string }[];
      usage: Usage;
      finish_reason: 'stop' | 'length';
    };
    return {
      id: payload.id,
      model: payload.model,
      content: payload.choices[0]?.content ?? '',
      usage: payload.usage,
      finish_reason: payload.finish_reason,
    };
  }
}

/** Assemble a line-delimited JSON stream: delta lines then a usage record. */
async function readStream(res: Response, model: string): Promise<InvocationResponse> {
  if (!res.body) throw new GatewayRejected('truncated_stream', 'response had no body');
  const reader = res.body.getReader();
  const decoder = new TextDecoder();
  let buffered = '';
  const parts: string[] = [];
  let tail: { usage: Usage; finish_reason: 'stop' | 'length'; id: string } | undefined;

  const handleLine = (line: string) => {
    if (!line) return;
    const obj = JSON.parse(line) as Record<string, unknown>;
    if (typeof obj.delta === 'string') {
      parts.push(obj.delta);
    } else {
      tail = obj as unknown as { usage: Usage; finish_reason: 'stop' | 'length'; id: string };
    }
  };

  for (;;) {
    const { done, value } = await reader.read();
    if (done) break;
    buffered += decoder.decode(value, { stream: true });
    for (let idx = buffered.indexOf('\n'); idx >= 0; idx = buffered.indexOf('\n')) {
      handleLine(buffered.slice(0, idx));
      buffered = buffered.slice(idx + 1);
    }
  }
  handleLine(buffered.trim());
  if (!tail) throw new GatewayRejected('truncated_stream', 'stream ended without a usage record');
  return { id: tail.id, model, content: parts.join(''), usage: tail.usage, finish_reason: tail.finish_reason };
}
