/** Decoders for the base64 netpbm payloads the service ships inside JSON:
 * binary P6 (color, maxval 255) and binary P5 (gray, maxval 65535). Decoding
 * is pure; painting to a canvas happens elsewhere. */

export interface DecodedImage {
  width: number;
  height: number;
  /** RGBA, row-major, 4 bytes per pixel (alpha 255). */
  rgba: Uint8ClampedArray;
}

export interface DecodedGray {
  width: number;
  height: number;
  /** Samples normalized to [0, 1]. */
  values: Float64Array;
}

export function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(b64, "base64"));
}

export function bytesToBase64(bytes: Uint8Array): string {
  if (typeof btoa === "function") {
    let bin = "";
    for (let i = 0; i < bytes.length; i++) bin += String.fromCharCode(bytes[i]);
    return btoa(bin);
  }
  return Buffer.from(bytes).toString("base64");
}

interface Header {
  magic: string;
  width: number;
  height: number;
  maxval: number;
  offset: number;
}

function parseHeader(bytes: Uint8Array, wantMagic: string): Header {
  const isSpace = (b: number) => b === 0x20 || b === 0x0a || b === 0x0d || b === 0x09;
  const magic = String.fromCharCode(bytes[0], bytes[1]);
  if (magic !== wantMagic) {
    throw new Error(`expected ${wantMagic}, got ${magic}`);
  }
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) {
      // comment line
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let value = 0;
    const start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) {
      value = value * 10 + (bytes[pos] - 0x30);
      pos++;
    }
    if (pos === start) throw new Error("malformed netpbm header");
    fields.push(value);
  }
  pos++; // the single whitespace byte that closes the header
  return { magic, width: fields[0], height: fields[1], maxval: fields[2], offset: pos };
}

export function decodePpm(b64: string): DecodedImage {
  const bytes = base64ToBytes(b64);
  const h = parseHeader(bytes, "P6");
  if (h.maxval !== 255) throw new Error(`unsupported P6 maxval ${h.maxval}`);
  const n = h.width * h.height;
  const rgba = new Uint8ClampedArray(n * 4);
  for (let i = 0; i < n; i++) {
    rgba[i * 4] = bytes[h.offset + i * 3];
    rgba[i * 4 + 1] = bytes[h.offset + i * 3 + 1];
    rgba[i * 4 + 2] = bytes[h.offset + i * 3 + 2];
    rgba[i * 4 + 3] = 255;
  }
  return { width: h.width, height: h.height, rgba };
}

export function decodePgm16(b64: string): DecodedGray {
  const bytes = base64ToBytes(b64);
  const h = parseHeader(bytes, "P5");
  if (h.maxval !== 65535) throw new Error(`unsupported P5 maxval ${h.maxval}`);
  const n = h.width * h.height;
  const values = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    const hi = bytes[h.offset + i * 2];
    const lo = bytes[h.offset + i * 2 + 1];
    values[i] = (hi * 256 + lo) / 65535;
  }
  return { width: h.width, height: h.height, values };
}

/** Overlay attribution heat onto an image: red channel carries the heat. */
export function blendOverlay(image: DecodedImage, heat: DecodedGray,
                             strength = 0.65): DecodedImage {
  if (image.width !== heat.width || image.height !== heat.height) {
    throw new Error("overlay size mismatch");
  }
  const rgba = new Uint8ClampedArray(image.rgba);
  for (let i = 0; i < heat.values.length; i++) {
    const v = heat.values[i];
    rgba[i * 4] = Math.min(255, rgba[i * 4] * (1 - strength) + 255 * v * strength + rgba[i * 4] * strength * (1 - v));
    rgba[i * 4 + 1] = rgba[i * 4 + 1] * (1 - strength * v);
    rgba[i * 4 + 2] = rgba[i * 4 + 2] * (1 - strength * v);
  }
  return { width: image.width, height: image.height, rgba };
}
