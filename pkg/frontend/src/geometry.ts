/** Axis-aligned box: top-left corner plus width/height, like the wire format. */
export interface Box {
  x: number;
  y: number;
  w: number;
  h: number;
}

/** Letterbox placement of a frame inside the fixed display canvas. */
export interface ViewTransform {
  scale: number;
  offX: number;
  offY: number;
}

export const DISPLAY_W = 640;
export const DISPLAY_H = 480;

// Full-resolution sensor plane the display space stands in for.
export const SENSOR_W = 4056;
export const SENSOR_H = 3040;

/** Down-move-up corners to a box; either drag direction gives the same result. */
export function normalizeDrag(x0: number, y0: number, x1: number, y1: number): Box {
  return {
    x: Math.min(x0, x1),
    y: Math.min(y0, y1),
    w: Math.abs(x1 - x0),
    h: Math.abs(y1 - y0),
  };
}

/** Boxes under 4x4 display pixels are treated as accidental clicks. */
export function tooSmall(box: Box): boolean {
  return box.w < 4 || box.h < 4;
}

/** Center a frame in the display at uniform scale (letterboxed). */
export function fitFrame(frameW: number, frameH: number): ViewTransform {
  if (frameW <= 0 || frameH <= 0) throw new Error(`bad frame ${frameW}x${frameH}`);
  const scale = Math.min(DISPLAY_W / frameW, DISPLAY_H / frameH);
  return {
    scale,
    offX: (DISPLAY_W - frameW * scale) / 2,
    offY: (DISPLAY_H - frameH * scale) / 2,
  };
}

/** Display-space box to frame pixel coordinates. */
export function displayToFrame(box: Box, view: ViewTransform): Box {
  return {
    x: (box.x - view.offX) / view.scale,
    y: (box.y - view.offY) / view.scale,
    w: box.w / view.scale,
    h: box.h / view.scale,
  };
}

/** Clip a box to the frame extent; null when nothing usable remains. */
export function clampToFrame(box: Box, frameW: number, frameH: number): Box | null {
  const x1 = Math.max(0, box.x);
  const y1 = Math.max(0, box.y);
  const x2 = Math.min(frameW, box.x + box.w);
  const y2 = Math.min(frameH, box.y + box.h);
  if (x2 - x1 <= 0 || y2 - y1 <= 0) return null;
  return { x: x1, y: y1, w: x2 - x1, h: y2 - y1 };
}

/** Display coordinates to the full sensor plane (640x480 -> 4056x3040). */
export function displayToSensor(box: Box): Box {
  const sx = SENSOR_W / DISPLAY_W;
  const sy = SENSOR_H / DISPLAY_H;
  return { x: box.x * sx, y: box.y * sy, w: box.w * sx, h: box.h * sy };
}
