import type { RgbImage } from "./ppm.js";

export const MIN_ZOOM = 4;
export const MAX_ZOOM = 12;

/** Largest integer factor in [4, 12] keeping the image within the viewport. */
export function chooseZoom(imageWidth: number, imageHeight: number, viewport = 768): number {
  const fit = Math.floor(viewport / Math.max(imageWidth, imageHeight));
  return Math.min(MAX_ZOOM, Math.max(MIN_ZOOM, fit));
}

/**
 * Nearest-neighbor magnification by an integer factor. Every source pixel
 * becomes an exact factor x factor block; no interpolation ever mixes colors,
 * so the annotator sees the learner's pixels verbatim.
 */
export function scaleNearest(src: RgbImage, factor: number): RgbImage {
  if (!Number.isInteger(factor) || factor < 1) throw new Error(`factor must be a positive integer, got ${factor}`);
  const w = src.width * factor;
  const h = src.height * factor;
  const out = new Uint8ClampedArray(4 * w * h);
  for (let y = 0; y < h; y++) {
    const sy = Math.floor(y / factor);
    for (let x = 0; x < w; x++) {
      const sx = Math.floor(x / factor);
      const s = 4 * (sy * src.width + sx);
      const d = 4 * (y * w + x);
      out[d] = src.data[s]!;
      out[d + 1] = src.data[s + 1]!;
      out[d + 2] = src.data[s + 2]!;
      out[d + 3] = 255;
    }
  }
  return { width: w, height: h, data: out };
}

/** Center of the magnified block for a source pixel, in canvas coordinates. */
export function crosshairCenter(x: number, y: number, factor: number): { cx: number; cy: number } {
  return { cx: x * factor + factor / 2, cy: y * factor + factor / 2 };
}
