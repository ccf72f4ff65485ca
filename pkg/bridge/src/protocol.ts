/**
 * Wire protocol: one JSON object per line, request and response.
 *
 * Request: {"id", "depth_pfm_b64", "image_ref", "t", "seed",
 *           "latent": [h, w]}
 * Response: {"id", "residual_b64", "err"} where residual_b64 decodes to
 * exactly h*w little-endian float32 values, and err is null on success.
 *
 * Every line gets exactly one response. A line that cannot be parsed at
 * all is answered with id null and err set; the loop never dies on bad
 * input.
 */

import { BridgeConfig, ShadedDepthModel } from './model.js';
import { decodePfm } from './pfm.js';

export interface ScoreResponse {
  id: number | null;
  residual_b64: string | null;
  err: string | null;
}

function fail(id: number | null, err: string): ScoreResponse {
  return { id, residual_b64: null, err };
}

export function handleLine(line: string, model: ShadedDepthModel): ScoreResponse {
  const started = Date.now();
  let msg: unknown;
  try {
    msg = JSON.parse(line);
  } catch (e) {
    return fail(null, `malformed JSON: ${(e as Error).message}`);
  }
  if (typeof msg !== 'object' || msg === null || Array.isArray(msg)) {
    return fail(null, 'request must be a JSON object');
  }
  const req = msg as Record<string, unknown>;
  const id = typeof req.id === 'number' && Number.isFinite(req.id) ? req.id : null;
  try {
    if (id === null) throw new Error('missing or non-numeric id');
    const { latent, t, seed, image_ref, depth_pfm_b64 } = req;
    if (!Array.isArray(latent) || latent.length !== 2) throw new Error('latent must be [h, w]');
    const [h, w] = latent as unknown[];
    if (!Number.isInteger(h) || !Number.isInteger(w) || (h as number) < 1 || (w as number) < 1) {
      throw new Error(`bad latent dims ${JSON.stringify(latent)}`);
    }
    const cfg: BridgeConfig = model.config;
    if ((cfg.latentH !== null && cfg.latentH !== h) || (cfg.latentW !== null && cfg.latentW !== w)) {
      throw new Error(`latent dims [${h}, ${w}] do not match configured [${cfg.latentH}, ${cfg.latentW}]`);
    }
    if (typeof t !== 'number' || !Number.isFinite(t)) throw new Error('t must be a finite number');
    if (typeof seed !== 'number' || !Number.isFinite(seed)) throw new Error('seed must be a finite number');
    if (typeof image_ref !== 'string' || image_ref.length === 0) throw new Error('image_ref must be a non-empty string');
    if (typeof depth_pfm_b64 !== 'string') throw new Error('depth_pfm_b64 must be a string');
    // Buffer.from silently drops junk, so check the grammar first
    if (depth_pfm_b64.length % 4 !== 0 || !/^[A-Za-z0-9+/]*={0,2}$/.test(depth_pfm_b64)) {
      throw new Error('depth_pfm_b64 is not valid base64');
    }
    const depth = decodePfm(Buffer.from(depth_pfm_b64, 'base64'));
    if (depth.h !== h || depth.w !== w) {
      throw new Error(`depth is ${depth.h}x${depth.w}, request says ${h}x${w}`);
    }
    const residual = model.residual(image_ref, depth, t, seed);
    if (Date.now() - started > cfg.timeoutS * 1000) {
      throw new Error(`request exceeded ${cfg.timeoutS}s timeout`);
    }
    const bytes = Buffer.alloc(residual.length * 4);
    for (let i = 0; i < residual.length; i++) bytes.writeFloatLE(residual[i], i * 4);
    return { id, residual_b64: bytes.toString('base64'), err: null };
  } catch (e) {
    return fail(id, (e as Error).message);
  }
}

export function handleLineJson(line: string, model: ShadedDepthModel): string {
  return JSON.stringify(handleLine(line, model));
}
