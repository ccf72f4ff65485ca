/**
 * The depth-conditioned scoring model behind the wire protocol.
 *
 * `shaded-v1` is a closed-form stand-in with the same interface and
 * noise bookkeeping as a latent-diffusion noise predictor: the image is
 * encoded to a latent, seeded noise is mixed in at the requested
 * timestep, and a predictor conditioned on the depth map estimates that
 * noise. Its clean-latent estimate is a shading of the conditioning
 * depth, so the returned residual (estimate minus true noise) grows
 * with image/depth disagreement, which is exactly the signal the pose
 * optimizer consumes. A small tanh head on the noised latent keeps the
 * predictor honestly seed-dependent, like any learned one.
 */

import { readFileSync } from 'fs';
import { SeededRng } from './rng.js';
import { decodePgm, Grid } from './pfm.js';

export interface BridgeConfig {
  model: string;
  device: string;
  latentH: number | null; // when set, requests must match
  latentW: number | null;
  timeoutS: number;
}

export const DEFAULT_CONFIG: BridgeConfig = {
  model: 'shaded-v1',
  device: 'cpu',
  latentH: null,
  latentW: null,
  timeoutS: 30,
};

const KNOWN_MODELS = new Set(['shaded-v1']);

export function validateConfig(cfg: BridgeConfig): void {
  if (!KNOWN_MODELS.has(cfg.model)) {
    throw new Error(`unknown model ${JSON.stringify(cfg.model)}; available: ${[...KNOWN_MODELS].join(', ')}`);
  }
  if (cfg.device !== 'cpu') throw new Error(`unsupported device ${JSON.stringify(cfg.device)}`);
  for (const d of [cfg.latentH, cfg.latentW]) {
    if (d !== null && (!Number.isInteger(d) || d < 1)) throw new Error(`bad latent dim ${d}`);
  }
  if (!(cfg.timeoutS > 0)) throw new Error(`timeout must be positive, got ${cfg.timeoutS}`);
}

// shading reference: depths at or beyond this render black
export const DMAX_REF = 10.0;
// strength of the seed-dependent head
const KAPPA = 0.05;
// cosine noise schedule offset, squaredcos flavor
const SCHEDULE_S = 0.008;

/** Noise level at t in [0, 1]; the bridge owns this conversion. */
export function alphaBar(t: number): number {
  const tc = Math.min(1, Math.max(0, t));
  const a = Math.cos(((tc + SCHEDULE_S) / (1 + SCHEDULE_S)) * (Math.PI / 2)) ** 2;
  return Math.min(1 - 1e-6, Math.max(1e-6, a));
}

/** Inverse-depth shading in [0, 1]; 0 marks an empty cell. */
export function shadeToUnit(d: number): number {
  if (!(d > 0)) return 0;
  return Math.min(1, Math.max(0, 1 - d / DMAX_REF));
}

function depthToLatent(depth: Grid): Float64Array {
  const z = new Float64Array(depth.data.length);
  for (let i = 0; i < z.length; i++) {
    z[i] = depth.data[i] > 0 ? 2 * shadeToUnit(depth.data[i]) - 1 : 0;
  }
  return z;
}

/** Box-average an image down to the latent grid, then map to [-1, 1]. */
export function encodeImage(img: Grid, lh: number, lw: number): Float64Array {
  const z = new Float64Array(lh * lw);
  for (let r = 0; r < lh; r++) {
    const r0 = Math.floor((r * img.h) / lh);
    const r1 = Math.max(r0 + 1, Math.floor(((r + 1) * img.h) / lh));
    for (let c = 0; c < lw; c++) {
      const c0 = Math.floor((c * img.w) / lw);
      const c1 = Math.max(c0 + 1, Math.floor(((c + 1) * img.w) / lw));
      let sum = 0;
      for (let rr = r0; rr < r1; rr++) {
        for (let cc = c0; cc < c1; cc++) sum += img.data[rr * img.w + cc];
      }
      z[r * lw + c] = (2 * sum) / ((r1 - r0) * (c1 - c0)) - 1;
    }
  }
  return z;
}

export class ShadedDepthModel {
  private readonly images = new Map<string, Grid>();

  constructor(readonly config: BridgeConfig) {
    validateConfig(config);
  }

  private loadImage(ref: string): Grid {
    const cached = this.images.get(ref);
    if (cached) return cached;
    const img = decodePgm(readFileSync(ref));
    this.images.set(ref, img);
    return img;
  }

  /**
   * Masked noise-prediction residual for one request.
   *
   * z_t = sqrt(ab) z_image + sqrt(1-ab) eps with eps drawn from the
   * request seed; the predictor inverts z_t against the depth-shaded
   * latent, so eps_hat - eps = sqrt(ab/(1-ab)) (z_image - z_depth)
   * plus the seed-dependent tanh head. Cells with no depth are masked
   * to zero.
   */
  residual(imageRef: string, depth: Grid, t: number, seed: number): Float32Array {
    const { h, w } = depth;
    const img = this.loadImage(imageRef);
    const zImg = encodeImage(img, h, w);
    const zDepth = depthToLatent(depth);

    const ab = alphaBar(t);
    const sa = Math.sqrt(ab);
    const sn = Math.sqrt(1 - ab);
    const eps = new SeededRng(seed).gaussianField(h * w);

    const out = new Float32Array(h * w);
    for (let i = 0; i < h * w; i++) {
      if (!(depth.data[i] > 0)) continue; // masked
      const zt = sa * zImg[i] + sn * eps[i];
      const epsHat = (zt - sa * zDepth[i]) / sn + KAPPA * Math.tanh(zt);
      out[i] = epsHat - eps[i];
    }
    return out;
  }
}
