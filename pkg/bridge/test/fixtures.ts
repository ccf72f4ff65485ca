/**
 * Seeded test scenes: a smooth depth surface at latent resolution, the
 * image that surface shades to, and a 20-degree in-plane rotated copy
 * of the depth standing in for a misaligned pose.
 */

import { mkdtempSync, writeFileSync } from 'fs';
import { tmpdir } from 'os';
import { join } from 'path';
import { SeededRng } from '../src/rng.js';
import { encodePfm, encodePgm, Grid } from '../src/pfm.js';
import { shadeToUnit } from '../src/model.js';

export interface Scene {
  imagePath: string;
  aligned: Grid;
  misaligned: Grid;
}

export function makeDepthSurface(seed: number, h = 12, w = 16): Grid {
  const rng = new SeededRng(seed);
  const a1 = 0.4 + 0.4 * rng.nextUniform();
  const a2 = 0.2 + 0.3 * rng.nextUniform();
  const p1 = rng.nextUniform();
  const p2 = rng.nextUniform();
  const f1 = 1 + Math.floor(2 * rng.nextUniform());
  const data = new Float64Array(h * w);
  for (let r = 0; r < h; r++) {
    for (let c = 0; c < w; c++) {
      const v =
        2.2 +
        a1 * Math.sin(2 * Math.PI * ((f1 * r) / h + p1)) * Math.cos(2 * Math.PI * (c / w + p2)) +
        a2 * Math.sin(2 * Math.PI * ((r + 2 * c) / (h + w) + p1 * p2));
      data[r * w + c] = Math.min(4.0, Math.max(1.2, v));
    }
  }
  // carve an empty notch so the occupancy mask is exercised
  const nr = 1 + Math.floor(2 * rng.nextUniform());
  const nc = 1 + Math.floor(3 * rng.nextUniform());
  for (let r = 0; r < nr; r++) for (let c = 0; c < nc; c++) data[r * w + c] = 0;
  return { data, h, w };
}

/** Shade the depth, upsample by `scale` (nearest), add faint texture. */
export function renderImage(depth: Grid, seed: number, scale = 8): Grid {
  const h = depth.h * scale;
  const w = depth.w * scale;
  const rng = new SeededRng(seed ^ 0x5eed);
  const data = new Float64Array(h * w);
  for (let r = 0; r < h; r++) {
    for (let c = 0; c < w; c++) {
      const d = depth.data[Math.floor(r / scale) * depth.w + Math.floor(c / scale)];
      data[r * w + c] = Math.min(1, Math.max(0, shadeToUnit(d) + 0.01 * rng.nextGaussian()));
    }
  }
  return { data, h, w };
}

/** In-plane rotation about the grid center, bilinear, holes become empty. */
export function rotateDepth(depth: Grid, deg: number): Grid {
  const { h, w } = depth;
  const rad = (deg * Math.PI) / 180;
  const cos = Math.cos(rad);
  const sin = Math.sin(rad);
  const cy = (h - 1) / 2;
  const cx = (w - 1) / 2;
  const out = new Float64Array(h * w);
  for (let r = 0; r < h; r++) {
    for (let c = 0; c < w; c++) {
      const sy = cy + cos * (r - cy) - sin * (c - cx);
      const sx = cx + sin * (r - cy) + cos * (c - cx);
      const r0 = Math.floor(sy);
      const c0 = Math.floor(sx);
      if (r0 < 0 || c0 < 0 || r0 + 1 >= h || c0 + 1 >= w) continue;
      const q00 = depth.data[r0 * w + c0];
      const q01 = depth.data[r0 * w + c0 + 1];
      const q10 = depth.data[(r0 + 1) * w + c0];
      const q11 = depth.data[(r0 + 1) * w + c0 + 1];
      if (q00 <= 0 || q01 <= 0 || q10 <= 0 || q11 <= 0) continue;
      const fy = sy - r0;
      const fx = sx - c0;
      out[r * w + c] =
        q00 * (1 - fy) * (1 - fx) + q01 * (1 - fy) * fx + q10 * fy * (1 - fx) + q11 * fy * fx;
    }
  }
  return { data: out, h, w };
}

export function makeScene(seed: number, dir?: string): Scene {
  const depth = makeDepthSurface(seed);
  const image = renderImage(depth, seed);
  const base = dir ?? mkdtempSync(join(tmpdir(), 'bridge-scene-'));
  const imagePath = join(base, `image_${seed}.pgm`);
  writeFileSync(imagePath, encodePgm(image));
  return { imagePath, aligned: depth, misaligned: rotateDepth(depth, 20) };
}

export function requestLine(
  id: number,
  scene: Scene,
  depth: Grid,
  t = 0.5,
  seed = 11,
): string {
  return JSON.stringify({
    id,
    depth_pfm_b64: encodePfm(depth).toString('base64'),
    image_ref: scene.imagePath,
    t,
    seed,
    latent: [depth.h, depth.w],
  });
}

export function decodeResidual(b64: string, n: number): Float64Array {
  const buf = Buffer.from(b64, 'base64');
  if (buf.length !== n * 4) throw new Error(`expected ${n * 4} bytes, got ${buf.length}`);
  const out = new Float64Array(n);
  for (let i = 0; i < n; i++) out[i] = buf.readFloatLE(i * 4);
  return out;
}

/** Mean squared residual over the cells the request marked occupied. */
export function maskedMeanSquare(residual: Float64Array, depth: Grid): number {
  let sum = 0;
  let count = 0;
  for (let i = 0; i < residual.length; i++) {
    if (depth.data[i] > 0) {
      sum += residual[i] * residual[i];
      count++;
    }
  }
  return count === 0 ? 0 : sum / count;
}
