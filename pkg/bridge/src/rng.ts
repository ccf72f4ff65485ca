/**
 * Deterministic random numbers for the seeded noise draw.
 *
 * splitmix64 over BigInt state; every arithmetic step is exact integer
 * math, so a given seed yields the same stream on every platform. The
 * Gaussian comes from Box-Muller on 53-bit uniforms.
 */

const GAMMA = 0x9e3779b97f4a7c15n;
const MIX1 = 0xbf58476d1ce4e5b9n;
const MIX2 = 0x94d049bb133111ebn;
const U64 = (x: bigint) => BigInt.asUintN(64, x);

export class SeededRng {
  private state: bigint;
  private spare: number | null = null;

  constructor(seed: number | bigint) {
    if (typeof seed === 'number') {
      if (!Number.isFinite(seed)) throw new Error(`non-finite seed: ${seed}`);
      // seeds above 2^53 arrive as integral doubles; BigInt keeps them stable
      seed = BigInt(Math.trunc(seed));
    }
    this.state = U64(seed);
  }

  nextU64(): bigint {
    this.state = U64(this.state + GAMMA);
    let z = this.state;
    z = U64((z ^ (z >> 30n)) * MIX1);
    z = U64((z ^ (z >> 27n)) * MIX2);
    return z ^ (z >> 31n);
  }

  /** Uniform in (0, 1]: 53 random bits, never exactly 0. */
  nextUniform(): number {
    return (Number(this.nextU64() >> 11n) + 1) * 2 ** -53;
  }

  nextGaussian(): number {
    if (this.spare !== null) {
      const v = this.spare;
      this.spare = null;
      return v;
    }
    const u1 = this.nextUniform();
    const u2 = this.nextUniform();
    const r = Math.sqrt(-2 * Math.log(u1));
    this.spare = r * Math.sin(2 * Math.PI * u2);
    return r * Math.cos(2 * Math.PI * u2);
  }

  gaussianField(n: number): Float64Array {
    const out = new Float64Array(n);
    for (let i = 0; i < n; i++) out[i] = this.nextGaussian();
    return out;
  }
}
