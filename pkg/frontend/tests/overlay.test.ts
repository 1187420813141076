import { describe, expect, it } from 'vitest';
import { foregroundCount } from '../src/rle.js';
import { CropRect, maskToPatch, paintedCount, pixelBounds } from '../src/overlay.js';

const rect = (x1: number, y1: number, x2: number, y2: number): CropRect => ({
  x1, y1, x2, y2, src_w: 64, src_h: 48,
});

describe('pixelBounds', () => {
  it('floors the near corner and ceils the far one', () => {
    expect(pixelBounds(rect(3.2, 1.9, 9.1, 7.0))).toEqual([3, 1, 10, 7]);
  });

  it('keeps integer rects unchanged', () => {
    expect(pixelBounds(rect(4, 2, 10, 8))).toEqual([4, 2, 10, 8]);
  });
});

describe('maskToPatch', () => {
  it('paints exactly the foreground pixels at the rect offset', () => {
    // 2x2 mask [[0,1],[1,0]] placed at (4,2)
    const mask = { size: [2, 2] as [number, number], counts: [1, 2, 1] };
    const patch = maskToPatch(mask, rect(4, 2, 6, 4));
    expect(patch.x).toBe(4);
    expect(patch.y).toBe(2);
    expect(patch.width).toBe(2);
    expect(patch.height).toBe(2);
    expect(paintedCount(patch)).toBe(foregroundCount(mask));
    // row-major alpha pattern mirrors the decoded mask
    const alphas = [3, 7, 11, 15].map((i) => patch.data[i] > 0);
    expect(alphas).toEqual([false, true, true, false]);
  });

  it('paints nothing for an all-zero mask', () => {
    const mask = { size: [3, 3] as [number, number], counts: [9] };
    const patch = maskToPatch(mask, rect(0, 0, 3, 3));
    expect(paintedCount(patch)).toBe(0);
    expect(patch.data.every((v) => v === 0)).toBe(true);
  });

  it('uses the requested color on foreground pixels', () => {
    const mask = { size: [1, 1] as [number, number], counts: [0, 1] };
    const patch = maskToPatch(mask, rect(0, 0, 1, 1), [10, 20, 30, 40]);
    expect(Array.from(patch.data)).toEqual([10, 20, 30, 40]);
  });

  it('rejects a mask that does not cover the rect raster', () => {
    const mask = { size: [2, 2] as [number, number], counts: [4] };
    expect(() => maskToPatch(mask, rect(0, 0, 3, 2))).toThrow(/match/);
  });

  it('covers fractional rects through their integer raster', () => {
    // raster of (3.5, 1.2)-(6.0, 4.9) is (3,1)-(6,5): 4 rows, 3 cols
    const mask = { size: [4, 3] as [number, number], counts: [2, 8, 2] };
    const patch = maskToPatch(mask, rect(3.5, 1.2, 6.0, 4.9));
    expect(patch.x).toBe(3);
    expect(patch.y).toBe(1);
    expect(patch.width).toBe(3);
    expect(patch.height).toBe(4);
    expect(paintedCount(patch)).toBe(8);
  });
});
