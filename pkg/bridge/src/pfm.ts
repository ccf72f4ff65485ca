/**
 * Grayscale PFM and binary PGM codecs.
 *
 * The core sends depth maps as PFM: `Pf\n{w} {h}\n{scale}\n` followed by
 * w*h float32 samples, rows stored bottom-up, little-endian when the
 * scale is negative. Images referenced by `image_ref` are 8-bit binary
 * PGM (`P5`, maxval 255).
 */

export interface Grid {
  data: Float64Array; // row-major, top row first
  h: number;
  w: number;
}

export function decodePfm(blob: Buffer): Grid {
  const firstNl = blob.indexOf(0x0a);
  const secondNl = blob.indexOf(0x0a, firstNl + 1);
  const thirdNl = blob.indexOf(0x0a, secondNl + 1);
  if (firstNl < 0 || secondNl < 0 || thirdNl < 0) {
    throw new Error('malformed PFM header');
  }
  const magic = blob.subarray(0, firstNl).toString('ascii');
  if (magic !== 'Pf') throw new Error(`not a grayscale PFM: magic ${JSON.stringify(magic)}`);
  const dims = blob.subarray(firstNl + 1, secondNl).toString('ascii').trim().split(/\s+/);
  const w = Number(dims[0]);
  const h = Number(dims[1]);
  const scale = Number(blob.subarray(secondNl + 1, thirdNl).toString('ascii'));
  if (!Number.isInteger(w) || !Number.isInteger(h) || w < 1 || h < 1 || !Number.isFinite(scale)) {
    throw new Error('malformed PFM header');
  }
  const payload = blob.subarray(thirdNl + 1);
  if (payload.length !== w * h * 4) {
    throw new Error(`PFM payload is ${payload.length} bytes, expected ${w * h * 4}`);
  }
  const littleEndian = scale < 0;
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  const data = new Float64Array(w * h);
  for (let r = 0; r < h; r++) {
    const srcRow = h - 1 - r; // bottom-up storage
    for (let c = 0; c < w; c++) {
      data[r * w + c] = view.getFloat32((srcRow * w + c) * 4, littleEndian);
    }
  }
  return { data, h, w };
}

export function encodePfm(grid: Grid): Buffer {
  const header = Buffer.from(`Pf\n${grid.w} ${grid.h}\n-1.0\n`, 'ascii');
  const payload = Buffer.alloc(grid.w * grid.h * 4);
  for (let r = 0; r < grid.h; r++) {
    const dstRow = grid.h - 1 - r;
    for (let c = 0; c < grid.w; c++) {
      payload.writeFloatLE(grid.data[r * grid.w + c], (dstRow * grid.w + c) * 4);
    }
  }
  return Buffer.concat([header, payload]);
}

/** 8-bit binary PGM, values scaled to [0, 1]. Comments are tolerated. */
export function decodePgm(blob: Buffer): Grid {
  let pos = 0;
  const token = (): string => {
    for (;;) {
      while (pos < blob.length && /\s/.test(String.fromCharCode(blob[pos]))) pos++;
      if (pos < blob.length && blob[pos] === 0x23) {
        while (pos < blob.length && blob[pos] !== 0x0a) pos++;
        continue;
      }
      break;
    }
    const start = pos;
    while (pos < blob.length && !/\s/.test(String.fromCharCode(blob[pos]))) pos++;
    return blob.subarray(start, pos).toString('ascii');
  };
  if (token() !== 'P5') throw new Error('not a binary PGM');
  const w = Number(token());
  const h = Number(token());
  const maxval = Number(token());
  pos++; // exactly one whitespace byte after maxval
  if (!Number.isInteger(w) || !Number.isInteger(h) || w < 1 || h < 1 || maxval !== 255) {
    throw new Error('unsupported PGM header');
  }
  if (blob.length - pos !== w * h) {
    throw new Error(`PGM payload is ${blob.length - pos} bytes, expected ${w * h}`);
  }
  const data = new Float64Array(w * h);
  for (let i = 0; i < w * h; i++) data[i] = blob[pos + i] / 255;
  return { data, h, w };
}

export function encodePgm(grid: Grid): Buffer {
  const header = Buffer.from(`P5\n${grid.w} ${grid.h}\n255\n`, 'ascii');
  const payload = Buffer.alloc(grid.w * grid.h);
  for (let i = 0; i < grid.w * grid.h; i++) {
    const v = Math.min(1, Math.max(0, grid.data[i]));
    payload[i] = Math.round(v * 255);
  }
  return Buffer.concat([header, payload]);
}
