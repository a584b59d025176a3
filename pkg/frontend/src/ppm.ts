/** Decoders for the lossless netpbm formats the service and dataset use. */

export interface RgbImage {
  width: number;
  height: number;
  /** RGBA, row-major, alpha forced to 255. */
  data: Uint8ClampedArray;
}

export interface GrayImage {
  width: number;
  height: number;
  /** One byte per pixel, row-major. */
  data: Uint8Array;
}

/** Header fields are whitespace-separated tokens; '#' starts a comment. */
function parseHeader(bytes: Uint8Array, magic: string): { width: number; height: number; offset: number } {
  const fields: number[] = [];
  let i = 0;
  const token = (): string => {
    while (i < bytes.length) {
      const c = bytes[i]!;
      if (c === 0x23) {
        // comment until newline
        while (i < bytes.length && bytes[i] !== 0x0a) i++;
      } else if (c === 0x20 || c === 0x09 || c === 0x0a || c === 0x0d) {
        i++;
      } else {
        break;
      }
    }
    const start = i;
    while (i < bytes.length && !/\s/.test(String.fromCharCode(bytes[i]!))) i++;
    return String.fromCharCode(...bytes.subarray(start, i));
  };
  const got = token();
  if (got !== magic) throw new Error(`expected ${magic}, got ${got || "empty file"}`);
  while (fields.length < 3) {
    const t = token();
    if (t === "") throw new Error(`truncated ${magic} header`);
    const n = Number(t);
    if (!Number.isInteger(n) || n < 0) throw new Error(`bad ${magic} header token ${t}`);
    fields.push(n);
  }
  i++; // single whitespace byte after maxval
  const [width, height, maxval] = fields as [number, number, number];
  if (maxval !== 255) throw new Error(`unsupported maxval ${maxval}`);
  return { width, height, offset: i };
}

export function decodePpm(bytes: Uint8Array): RgbImage {
  const { width, height, offset } = parseHeader(bytes, "P6");
  const n = width * height;
  if (bytes.length - offset < 3 * n) throw new Error("truncated P6 pixel data");
  const data = new Uint8ClampedArray(4 * n);
  for (let p = 0; p < n; p++) {
    data[4 * p] = bytes[offset + 3 * p]!;
    data[4 * p + 1] = bytes[offset + 3 * p + 1]!;
    data[4 * p + 2] = bytes[offset + 3 * p + 2]!;
    data[4 * p + 3] = 255;
  }
  return { width, height, data };
}

export function decodePgm(bytes: Uint8Array): GrayImage {
  const { width, height, offset } = parseHeader(bytes, "P5");
  const n = width * height;
  if (bytes.length - offset < n) throw new Error("truncated P5 pixel data");
  return { width, height, data: bytes.subarray(offset, offset + n) };
}

export function decodeBase64(b64: string): Uint8Array {
  if (typeof Buffer !== "undefined") return new Uint8Array(Buffer.from(b64, "base64"));
  const raw = atob(b64);
  const out = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) out[i] = raw.charCodeAt(i);
  return out;
}
