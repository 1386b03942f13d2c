/** Brush-paintable binary mask layer backed by a flat byte buffer. */
import { decodeGrayPng, encodeGrayPng } from "./png.js";

export class MaskLayer {
  readonly width: number;
  readonly height: number;
  readonly data: Uint8Array; // 0 or 1 per pixel

  constructor(width: number, height: number, data?: Uint8Array) {
    if (width <= 0 || height <= 0) throw new Error("mask layer needs positive dimensions");
    this.width = width;
    this.height = height;
    this.data = data ?? new Uint8Array(width * height);
    if (this.data.length !== width * height) throw new Error("mask buffer length mismatch");
  }

  clone(): MaskLayer {
    return new MaskLayer(this.width, this.height, this.data.slice());
  }

  clear(): void {
    this.data.fill(0);
  }

  isEmpty(): boolean {
    return !this.data.some((v) => v !== 0);
  }

  equals(other: MaskLayer): boolean {
    if (other.width !== this.width || other.height !== this.height) return false;
    return this.data.every((v, i) => v === other.data[i]);
  }

  /** Stamp a filled disk; erase=true clears instead of sets. */
  paint(cx: number, cy: number, radius: number, erase = false): void {
    const value = erase ? 0 : 1;
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) this.data[y * this.width + x] = value;
      }
    }
  }

  /** Stamp the brush along a segment so fast drags leave no gaps. */
  strokeLine(x0: number, y0: number, x1: number, y1: number, radius: number, erase = false): void {
    const dist = Math.hypot(x1 - x0, y1 - y0);
    const steps = Math.max(1, Math.ceil(dist / Math.max(1, radius / 2)));
    for (let i = 0; i <= steps; i++) {
      const t = i / steps;
      this.paint(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, radius, erase);
    }
  }

  /** Union another binary buffer into this layer (assist-mask merge). */
  mergeFrom(other: Uint8Array): void {
    if (other.length !== this.data.length) throw new Error("merge buffer length mismatch");
    for (let i = 0; i < other.length; i++) {
      if (other[i]) this.data[i] = 1;
    }
  }

  /** Export as the server's mask wire format: 8-bit grayscale PNG, 0/255. */
  toPng(): Uint8Array {
    const bytes = new Uint8Array(this.data.length);
    for (let i = 0; i < this.data.length; i++) bytes[i] = this.data[i] ? 255 : 0;
    return encodeGrayPng({ width: this.width, height: this.height, data: bytes });
  }

  /** Decode a mask PNG; any value >= 128 reads as set. */
  static fromPng(bytes: Uint8Array): MaskLayer {
    const img = decodeGrayPng(bytes);
    const data = new Uint8Array(img.data.length);
    for (let i = 0; i < img.data.length; i++) data[i] = img.data[i] >= 128 ? 1 : 0;
    return new MaskLayer(img.width, img.height, data);
  }
}
