import { decodeRle, RleMask } from './rle.js';

/** Crop window echoed by the gateway: float bounds in frame pixels. */
export interface CropRect {
  x1: number;
  y1: number;
  x2: number;
  y2: number;
  src_w: number;
  src_h: number;
}

export interface OverlayPatch {
  x: number; // left edge in frame pixels
  y: number;
  width: number;
  height: number;
  data: Uint8ClampedArray; // RGBA, transparent wherever the mask is background
}

export const OVERLAY_RGBA: readonly [number, number, number, number] = [64, 200, 255, 150];

/** Integer raster bounds of a crop: floor the near corner, ceil the far one. */
export function pixelBounds(rect: CropRect): [number, number, number, number] {
  return [
    Math.floor(rect.x1),
    Math.floor(rect.y1),
    Math.ceil(rect.x2),
    Math.ceil(rect.y2),
  ];
}

/**
 * Paint a decoded mask into an RGBA patch positioned by its rect.
 *
 * Exactly the foreground pixels get the overlay color; no thresholding or
 * smoothing happens here, so the painted set equals the mask's foreground set.
 */
export function maskToPatch(
  mask: RleMask,
  rect: CropRect,
  rgba: readonly [number, number, number, number] = OVERLAY_RGBA,
): OverlayPatch {
  const [ix1, iy1, ix2, iy2] = pixelBounds(rect);
  const [h, w] = mask.size;
  if (h !== iy2 - iy1 || w !== ix2 - ix1) {
    throw new Error(`mask ${h}x${w} does not match rect raster ${iy2 - iy1}x${ix2 - ix1}`);
  }
  const bits = decodeRle(mask);
  const data = new Uint8ClampedArray(w * h * 4);
  for (let i = 0; i < bits.length; i++) {
    if (!bits[i]) continue;
    data[i * 4] = rgba[0];
    data[i * 4 + 1] = rgba[1];
    data[i * 4 + 2] = rgba[2];
    data[i * 4 + 3] = rgba[3];
  }
  return { x: ix1, y: iy1, width: w, height: h, data };
}

/** Number of visible (alpha > 0) pixels in a patch. */
export function paintedCount(patch: OverlayPatch): number {
  let n = 0;
  for (let i = 3; i < patch.data.length; i += 4) {
    if (patch.data[i] > 0) n++;
  }
  return n;
}
