import { describe, expect, it } from 'vitest';
import {
  clampToFrame,
  displayToFrame,
  displayToSensor,
  fitFrame,
  normalizeDrag,
  tooSmall,
} from '../src/geometry.js';

describe('normalizeDrag', () => {
  it('turns a forward drag into x/y/w/h', () => {
    expect(normalizeDrag(10, 10, 110, 60)).toEqual({ x: 10, y: 10, w: 100, h: 50 });
  });

  it('gives the same box for the reverse drag', () => {
    expect(normalizeDrag(110, 60, 10, 10)).toEqual({ x: 10, y: 10, w: 100, h: 50 });
  });

  it('handles mixed corner order', () => {
    expect(normalizeDrag(110, 10, 10, 60)).toEqual({ x: 10, y: 10, w: 100, h: 50 });
  });
});

describe('tooSmall', () => {
  it('rejects anything under 4x4', () => {
    expect(tooSmall({ x: 0, y: 0, w: 2, h: 2 })).toBe(true);
    expect(tooSmall({ x: 0, y: 0, w: 10, h: 3.5 })).toBe(true);
  });

  it('accepts 4x4 and larger', () => {
    expect(tooSmall({ x: 0, y: 0, w: 4, h: 4 })).toBe(false);
    expect(tooSmall({ x: 5, y: 5, w: 100, h: 50 })).toBe(false);
  });
});

describe('fitFrame', () => {
  it('maps a 640x480 frame 1:1', () => {
    expect(fitFrame(640, 480)).toEqual({ scale: 1, offX: 0, offY: 0 });
  });

  it('letterboxes a wide frame vertically', () => {
    const view = fitFrame(1280, 480);
    expect(view.scale).toBeCloseTo(0.5, 12);
    expect(view.offX).toBe(0);
    expect(view.offY).toBeCloseTo((480 - 240) / 2, 12);
  });

  it('letterboxes a tall frame horizontally', () => {
    const view = fitFrame(240, 480);
    expect(view.scale).toBe(1);
    expect(view.offX).toBe(200);
    expect(view.offY).toBe(0);
  });

  it('rejects degenerate frames', () => {
    expect(() => fitFrame(0, 480)).toThrow();
  });
});

describe('displayToFrame', () => {
  it('inverts the letterbox placement', () => {
    const view = fitFrame(320, 240); // scale 2, centered exactly
    const box = displayToFrame({ x: 100, y: 60, w: 160, h: 80 }, view);
    expect(box).toEqual({ x: 50, y: 30, w: 80, h: 40 });
  });
});

describe('clampToFrame', () => {
  it('passes interior boxes through', () => {
    expect(clampToFrame({ x: 5, y: 5, w: 10, h: 10 }, 100, 100))
      .toEqual({ x: 5, y: 5, w: 10, h: 10 });
  });

  it('clips boxes reaching past the frame edge', () => {
    expect(clampToFrame({ x: -10, y: 90, w: 30, h: 30 }, 100, 100))
      .toEqual({ x: 0, y: 90, w: 20, h: 10 });
  });

  it('returns null when the box lies fully outside', () => {
    expect(clampToFrame({ x: 200, y: 0, w: 10, h: 10 }, 100, 100)).toBeNull();
  });
});

describe('displayToSensor', () => {
  it('maps the full display to the full sensor', () => {
    const box = displayToSensor({ x: 0, y: 0, w: 640, h: 480 });
    expect(box.x).toBe(0);
    expect(box.y).toBe(0);
    expect(box.w).toBeCloseTo(4056, 9);
    expect(box.h).toBeCloseTo(3040, 9);
  });

  it('scales an interior box by the per-axis ratios', () => {
    const box = displayToSensor({ x: 64, y: 48, w: 64, h: 48 });
    expect(box.x).toBeCloseTo(405.6, 9);
    expect(box.y).toBeCloseTo(304, 9);
    expect(box.w).toBeCloseTo(405.6, 9);
    expect(box.h).toBeCloseTo(304, 9);
  });
});
