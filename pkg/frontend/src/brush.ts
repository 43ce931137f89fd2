/** Region-mask model for Step-3 feedback: a binary mask at native image
 * resolution, painted with a square brush snapped to pixels, serialized in
 * the packed-bits layout the service expects (row-major, MSB first). */

import { bytesToBase64 } from "./netpbm.js";

export class RegionBrush {
  readonly mask: Uint8Array;

  constructor(public readonly height: number, public readonly width: number) {
    this.mask = new Uint8Array(height * width);
  }

  paint(row: number, col: number, radius = 2, value: 1 | 0 = 1): void {
    const r0 = Math.max(0, Math.round(row) - radius);
    const r1 = Math.min(this.height - 1, Math.round(row) + radius);
    const c0 = Math.max(0, Math.round(col) - radius);
    const c1 = Math.min(this.width - 1, Math.round(col) + radius);
    for (let r = r0; r <= r1; r++) {
      for (let c = c0; c <= c1; c++) {
        this.mask[r * this.width + c] = value;
      }
    }
  }

  paintAll(value: 1 | 0 = 1): void {
    this.mask.fill(value);
  }

  count(): number {
    let n = 0;
    for (const v of this.mask) n += v;
    return n;
  }

  /** numpy.packbits-compatible: bit i of the flattened mask lands in byte
   * i>>3 at position 7-(i&7). */
  toPackedBase64(): { shape: [number, number]; bits: string } {
    const bytes = new Uint8Array(Math.ceil(this.mask.length / 8));
    for (let i = 0; i < this.mask.length; i++) {
      if (this.mask[i]) bytes[i >> 3] |= 0x80 >> (i & 7);
    }
    return { shape: [this.height, this.width], bits: bytesToBase64(bytes) };
  }
}
