/** Uncompressed run-length mask: column-major runs, the first run counts zeros. */
export interface RleMask {
  size: [number, number]; // [height, width]
  counts: number[];
}

/** Decode to a row-major 0/1 buffer of h*w bytes. */
export function decodeRle(mask: RleMask): Uint8Array {
  const [h, w] = mask.size;
  if (h < 1 || w < 1) throw new Error(`bad mask size ${h}x${w}`);
  const total = h * w;
  const out = new Uint8Array(total);
  let pos = 0;
  let value = 0;
  for (const run of mask.counts) {
    if (!Number.isInteger(run) || run < 0) throw new Error(`bad run length ${run}`);
    if (pos + run > total) throw new Error('runs overflow the mask size');
    if (value) {
      for (let i = 0; i < run; i++) {
        // runs walk down columns; the buffer is row-major
        const col = Math.floor((pos + i) / h);
        const row = (pos + i) % h;
        out[row * w + col] = 1;
      }
    }
    pos += run;
    value = 1 - value;
  }
  if (pos !== total) throw new Error(`runs cover ${pos} of ${total} pixels`);
  return out;
}

/** Foreground pixel count straight from the runs (odd-indexed runs are ones). */
export function foregroundCount(mask: RleMask): number {
  let n = 0;
  for (let i = 1; i < mask.counts.length; i += 2) n += mask.counts[i];
  return n;
}
