import {
  Box,
  DISPLAY_H,
  DISPLAY_W,
  ViewTransform,
  clampToFrame,
  displayToFrame,
  fitFrame,
  normalizeDrag,
  tooSmall,
} from './geometry.js';
import { GatewayClient, SegmentReply } from './client.js';
import { OverlayPatch, maskToPatch } from './overlay.js';

export interface AppElements {
  display: HTMLCanvasElement; // fixed 640x480, shows frame + drag rectangle
  overlay: HTMLCanvasElement; // frame-resolution backing store, CSS-scaled on top
  file: HTMLInputElement;
  latency: HTMLElement;
  model: HTMLElement;
  countdown: HTMLElement;
  status: HTMLElement;
}

interface Drag {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

const COUNTDOWN_TICK_MS = 50;

/**
 * Page controller: one loaded frame, drag-to-box prompting, mask overlay.
 *
 * The overlay canvas keeps its backing store at frame resolution and is
 * positioned over the letterboxed frame with CSS, so mask pixels land 1:1
 * and the painted set stays exactly the decoded foreground set.
 */
export class StudioApp {
  private frameId: number | null = null;
  private frameW = 0;
  private frameH = 0;
  private view: ViewTransform | null = null;
  private bitmap: ImageBitmap | null = null;
  private drag: Drag | null = null;
  private inFlight = false;
  private blockedUntil = 0;
  private countdownTimer: ReturnType<typeof setInterval> | null = null;

  /** Last overlay patch that was painted; kept for scripted checks. */
  lastPatch: OverlayPatch | null = null;

  constructor(
    private readonly el: AppElements,
    private readonly client: GatewayClient,
    private readonly now: () => number = () => Date.now(),
  ) {}

  bind(): void {
    this.el.display.width = DISPLAY_W;
    this.el.display.height = DISPLAY_H;
    this.el.display.addEventListener('pointerdown', (ev) =>
      this.onPointerDown(ev as PointerEvent));
    this.el.display.addEventListener('pointermove', (ev) =>
      this.onPointerMove(ev as PointerEvent));
    this.el.display.addEventListener('pointerup', (ev) => this.onPointerUp(ev as PointerEvent));
    this.el.file.addEventListener('change', () => this.onFileChange());
    this.el.status.textContent = 'load a frame to begin';
    void this.refreshModelTag();
  }

  async refreshModelTag(): Promise<void> {
    try {
      const info = await this.client.modelInfo();
      const tag = info.quantized ? 'int8' : 'fp32';
      this.el.model.textContent = `${tag} ${(info.params / 1e6).toFixed(2)}M params`;
    } catch {
      this.el.model.textContent = 'model unavailable';
    }
  }

  async onFileChange(): Promise<void> {
    const file = this.el.file.files?.[0];
    if (!file) return;
    const bytes = await file.arrayBuffer();
    await this.loadFrameBytes(bytes, file);
  }

  async loadFrameBytes(bytes: ArrayBuffer, blob?: Blob): Promise<void> {
    try {
      const info = await this.client.putFrame(bytes);
      this.frameId = info.frameId;
      this.frameW = info.width;
      this.frameH = info.height;
      this.view = fitFrame(info.width, info.height);
      this.placeOverlay();
      this.clearOverlay();
      this.bitmap = null;
      if (blob && typeof createImageBitmap === 'function') {
        this.bitmap = await createImageBitmap(blob);
      }
      this.drawScene();
      this.el.status.textContent =
        `frame ${info.frameId}: ${info.width}x${info.height}, drag a box`;
    } catch (err) {
      this.el.status.textContent = `upload failed: ${(err as Error).message}`;
    }
  }

  onPointerDown(ev: { offsetX: number; offsetY: number }): void {
    if (this.frameId === null) return;
    this.drag = { x0: ev.offsetX, y0: ev.offsetY, x1: ev.offsetX, y1: ev.offsetY };
    this.drawScene();
  }

  onPointerMove(ev: { offsetX: number; offsetY: number }): void {
    if (!this.drag) return;
    this.drag.x1 = ev.offsetX;
    this.drag.y1 = ev.offsetY;
    this.drawScene();
  }

  async onPointerUp(ev: { offsetX: number; offsetY: number }): Promise<void> {
    if (!this.drag) return;
    const { x0, y0 } = this.drag;
    this.drag = null;
    this.drawScene();
    const box = normalizeDrag(x0, y0, ev.offsetX, ev.offsetY);
    if (tooSmall(box)) {
      this.el.status.textContent = 'box too small, drag at least 4x4 pixels';
      return;
    }
    await this.submit(box);
  }

  /** Send one prompt; drops it while another is in flight or we are blocked. */
  async submit(displayBox: Box): Promise<void> {
    if (this.frameId === null || !this.view) return;
    if (this.inFlight) return;
    if (this.now() < this.blockedUntil) return;
    const frameBox = clampToFrame(
      displayToFrame(displayBox, this.view), this.frameW, this.frameH);
    if (!frameBox) {
      this.el.status.textContent = 'box is outside the frame';
      return;
    }
    this.inFlight = true;
    this.el.status.textContent = 'segmenting...';
    try {
      const reply = await this.client.segment(this.frameId, frameBox);
      this.handleReply(reply);
    } catch (err) {
      this.el.status.textContent = `segment failed: ${(err as Error).message}`;
    } finally {
      this.inFlight = false;
    }
  }

  private handleReply(reply: SegmentReply): void {
    if (reply.kind === 'rate_limited') {
      this.beginCountdown(reply.retryAfterMs);
      return;
    }
    const patch = maskToPatch(reply.mask, reply.rect);
    this.lastPatch = patch;
    const ctx = this.overlayCtx();
    ctx.clearRect(0, 0, this.frameW, this.frameH);
    const img = ctx.createImageData(patch.width, patch.height);
    img.data.set(patch.data);
    ctx.putImageData(img, patch.x, patch.y);
    this.el.latency.textContent = `${reply.latencyMs.toFixed(1)} ms`;
    this.el.status.textContent = `mask from ${reply.model} path`;
  }

  private beginCountdown(retryAfterMs: number): void {
    this.blockedUntil = this.now() + retryAfterMs;
    this.el.countdown.hidden = false;
    this.renderCountdown();
    if (this.countdownTimer !== null) clearInterval(this.countdownTimer);
    this.countdownTimer = setInterval(() => this.renderCountdown(), COUNTDOWN_TICK_MS);
  }

  private renderCountdown(): void {
    const remaining = this.blockedUntil - this.now();
    if (remaining <= 0) {
      if (this.countdownTimer !== null) {
        clearInterval(this.countdownTimer);
        this.countdownTimer = null;
      }
      this.el.countdown.hidden = true;
      this.el.countdown.textContent = '';
      this.el.status.textContent = 'ready';
      return;
    }
    this.el.countdown.textContent = `rate limited, retry in ${Math.ceil(remaining)} ms`;
  }

  /** Pin the overlay canvas over the letterboxed frame area. */
  private placeOverlay(): void {
    if (!this.view) return;
    this.el.overlay.width = this.frameW;
    this.el.overlay.height = this.frameH;
    const style = this.el.overlay.style;
    style.left = `${this.view.offX}px`;
    style.top = `${this.view.offY}px`;
    style.width = `${this.frameW * this.view.scale}px`;
    style.height = `${this.frameH * this.view.scale}px`;
  }

  private clearOverlay(): void {
    this.overlayCtx().clearRect(0, 0, this.el.overlay.width, this.el.overlay.height);
    this.lastPatch = null;
  }

  private overlayCtx(): CanvasRenderingContext2D {
    const ctx = this.el.overlay.getContext('2d');
    if (!ctx) throw new Error('overlay canvas has no 2d context');
    return ctx;
  }

  private drawScene(): void {
    const ctx = this.el.display.getContext('2d');
    if (!ctx) return;
    ctx.clearRect(0, 0, DISPLAY_W, DISPLAY_H);
    ctx.fillStyle = '#14171c';
    ctx.fillRect(0, 0, DISPLAY_W, DISPLAY_H);
    if (this.bitmap && this.view) {
      ctx.drawImage(
        this.bitmap,
        this.view.offX,
        this.view.offY,
        this.frameW * this.view.scale,
        this.frameH * this.view.scale,
      );
    }
    if (this.drag) {
      const box = normalizeDrag(this.drag.x0, this.drag.y0, this.drag.x1, this.drag.y1);
      ctx.strokeStyle = '#ffd166';
      ctx.lineWidth = 2;
      ctx.strokeRect(box.x, box.y, box.w, box.h);
    }
  }
}
