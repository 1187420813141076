import { Box } from './geometry.js';
import { RleMask } from './rle.js';
import { CropRect } from './overlay.js';

export interface FrameInfo {
  frameId: number;
  width: number;
  height: number;
}

export interface ModelInfo {
  params: number;
  macs: number;
  sizeBytes: number;
  quantized: boolean;
}

export type SegmentReply =
  | { kind: 'ok'; mask: RleMask; rect: CropRect; latencyMs: number; model: string }
  | { kind: 'rate_limited'; retryAfterMs: number };

export class GatewayError extends Error {
  constructor(
    readonly status: number,
    readonly errorClass: string,
    message: string,
  ) {
    super(message);
    this.name = 'GatewayError';
  }
}

/** The slice of fetch the client needs; injectable for tests. */
export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: BodyInit },
) => Promise<{ status: number; json(): Promise<unknown> }>;

interface WireError {
  error?: { class?: string; message?: string; retry_after_ms?: number };
}

export class GatewayClient {
  constructor(
    private readonly base: string = '',
    private readonly session: string = 'default',
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init as RequestInit),
  ) {}

  private async throwWireError(status: number, body: unknown): Promise<never> {
    const err = (body as WireError)?.error;
    throw new GatewayError(status, err?.class ?? 'http', err?.message ?? `status ${status}`);
  }

  async putFrame(bytes: Uint8Array | ArrayBuffer): Promise<FrameInfo> {
    const resp = await this.fetchFn(this.base + '/frames', {
      method: 'POST',
      headers: {
        'Content-Type': 'application/octet-stream',
        'X-Session': this.session,
      },
      body: bytes instanceof Uint8Array ? (bytes as unknown as BodyInit) : bytes,
    });
    const body = await resp.json();
    if (resp.status !== 200) await this.throwWireError(resp.status, body);
    const j = body as { frame_id: number; width: number; height: number };
    return { frameId: j.frame_id, width: j.width, height: j.height };
  }

  async segment(frameId: number, box: Box): Promise<SegmentReply> {
    const resp = await this.fetchFn(this.base + '/segment', {
      method: 'POST',
      headers: {
        'Content-Type': 'application/json',
        'X-Session': this.session,
      },
      body: JSON.stringify({ frame_id: frameId, bbox: [box.x, box.y, box.w, box.h] }),
    });
    const body = await resp.json();
    if (resp.status === 429) {
      const err = (body as WireError).error;
      return { kind: 'rate_limited', retryAfterMs: err?.retry_after_ms ?? 150 };
    }
    if (resp.status !== 200) await this.throwWireError(resp.status, body);
    const j = body as {
      mask: RleMask;
      rect: CropRect;
      latency_ms: number;
      model: string;
    };
    return {
      kind: 'ok',
      mask: j.mask,
      rect: j.rect,
      latencyMs: j.latency_ms,
      model: j.model,
    };
  }

  async modelInfo(): Promise<ModelInfo> {
    const resp = await this.fetchFn(this.base + '/model', {
      headers: { 'X-Session': this.session },
    });
    const body = await resp.json();
    if (resp.status !== 200) await this.throwWireError(resp.status, body);
    const j = body as { params: number; macs: number; size_bytes: number; quantized: boolean };
    return { params: j.params, macs: j.macs, sizeBytes: j.size_bytes, quantized: j.quantized };
  }
}
