/**
 * Seed-compatible port of numpy's default generator seeding: SeedSequence
 * entropy mixing, the PCG64 bit generator, and the Lemire bounded draw that
 * backs Generator.integers. Given the same integer seed, integerBelow(n)
 * returns exactly what np.random.default_rng(seed).integers(n) returns, so
 * sampling starts chosen here line up with the Python tooling.
 */

// SeedSequence hash constants (from the randutils entropy mixer numpy ports).
const INIT_A = 0x43b0d7e5;
const MULT_A = 0x931e8875;
const INIT_B = 0x8b51f9dd;
const MULT_B = 0x58f38ded;
const MIX_MULT_L = 0xca01f9dd;
const MIX_MULT_R = 0x4973f715;
const XSHIFT = 16;

const MASK64 = (1n << 64n) - 1n;
const MASK128 = (1n << 128n) - 1n;
// PCG's default 128-bit LCG multiplier.
const PCG_MULT = (2549297995355413924n << 64n) | 4865540595714422341n;

/** Non-negative integer seed split into little-endian 32-bit words. */
function entropyWords(seed: number | bigint): number[] {
  let v = BigInt(seed);
  if (v < 0n) {
    throw new Error(`seed must be >= 0, got ${seed}`);
  }
  if (v === 0n) {
    return [0];
  }
  const words: number[] = [];
  while (v > 0n) {
    words.push(Number(v & 0xffffffffn));
    v >>= 32n;
  }
  return words;
}

function seedPool(entropy: number[]): Uint32Array {
  const pool = new Uint32Array(4);
  let hashConst = INIT_A;
  const hash = (value: number): number => {
    value = (value ^ hashConst) >>> 0;
    hashConst = Math.imul(hashConst, MULT_A) >>> 0;
    value = Math.imul(value, hashConst) >>> 0;
    return (value ^ (value >>> XSHIFT)) >>> 0;
  };
  // mix is MULT_L*x - MULT_R*y in u32 arithmetic, not an xor
  const mix = (x: number, y: number): number => {
    let r = (Math.imul(x, MIX_MULT_L) - Math.imul(y, MIX_MULT_R)) >>> 0;
    return (r ^ (r >>> XSHIFT)) >>> 0;
  };
  for (let i = 0; i < pool.length; i++) {
    pool[i] = hash(i < entropy.length ? entropy[i] : 0);
  }
  for (let src = 0; src < pool.length; src++) {
    for (let dst = 0; dst < pool.length; dst++) {
      if (src !== dst) {
        pool[dst] = mix(pool[dst], hash(pool[src]));
      }
    }
  }
  for (let src = pool.length; src < entropy.length; src++) {
    for (let dst = 0; dst < pool.length; dst++) {
      pool[dst] = mix(pool[dst], hash(entropy[src]));
    }
  }
  return pool;
}

function generateStateWords(pool: Uint32Array, nWords: number): Uint32Array {
  const out = new Uint32Array(nWords);
  let hashConst = INIT_B;
  for (let i = 0; i < nWords; i++) {
    let v = (pool[i % pool.length] ^ hashConst) >>> 0;
    hashConst = Math.imul(hashConst, MULT_B) >>> 0;
    v = Math.imul(v, hashConst) >>> 0;
    out[i] = (v ^ (v >>> XSHIFT)) >>> 0;
  }
  return out;
}

export class Pcg64 {
  private state: bigint;
  private readonly inc: bigint;
  private hasUint32 = false;
  private cachedUint32 = 0;

  constructor(seed: number | bigint) {
    const w = generateStateWords(seedPool(entropyWords(seed)), 8);
    // words pair up little-endian into four u64s: state hi/lo, stream hi/lo
    const u64 = (i: number) => BigInt(w[i]) | (BigInt(w[i + 1]) << 32n);
    const initstate = (u64(0) << 64n) | u64(2);
    const initseq = (u64(4) << 64n) | u64(6);
    this.state = 0n;
    this.inc = ((initseq << 1n) | 1n) & MASK128;
    this.step();
    this.state = (this.state + initstate) & MASK128;
    this.step();
  }

  private step(): void {
    this.state = (this.state * PCG_MULT + this.inc) & MASK128;
  }

  /** XSL-RR output: xor-fold the 128-bit state, rotate by its top 6 bits. */
  nextUint64(): bigint {
    this.step();
    const s = this.state;
    const xored = ((s >> 64n) ^ (s & MASK64)) & MASK64;
    const rot = s >> 122n;
    return ((xored >> rot) | (xored << ((64n - rot) & 63n))) & MASK64;
  }

  /** Low half first, high half cached, matching numpy's next_uint32. */
  nextUint32(): number {
    if (this.hasUint32) {
      this.hasUint32 = false;
      return this.cachedUint32;
    }
    const v = this.nextUint64();
    this.hasUint32 = true;
    this.cachedUint32 = Number(v >> 32n);
    return Number(v & 0xffffffffn);
  }

  /** Uniform draw from [0, n), matching Generator.integers(n). */
  integerBelow(n: number): number {
    if (!Number.isInteger(n) || n < 1) {
      throw new Error(`integerBelow needs an integer n >= 1, got ${n}`);
    }
    const rangeM1 = BigInt(n) - 1n;
    if (rangeM1 === 0n) {
      return 0;
    }
    if (rangeM1 <= 0xffffffffn) {
      // ranges that fit in 32 bits consume buffered 32-bit halves
      const excl = rangeM1 + 1n;
      let m = BigInt(this.nextUint32()) * excl;
      let leftover = m & 0xffffffffn;
      if (leftover < excl) {
        const threshold = (0xffffffffn - rangeM1) % excl;
        while (leftover < threshold) {
          m = BigInt(this.nextUint32()) * excl;
          leftover = m & 0xffffffffn;
        }
      }
      return Number(m >> 32n);
    }
    const excl = rangeM1 + 1n;
    let m = this.nextUint64() * excl;
    let leftover = m & MASK64;
    if (leftover < excl) {
      const threshold = (MASK64 - rangeM1) % excl;
      while (leftover < threshold) {
        m = this.nextUint64() * excl;
        leftover = m & MASK64;
      }
    }
    return Number(m >> 64n);
  }
}

/** The seeded first pick used by farthest point sampling on the Python side. */
export function seededStartIndex(seed: number | bigint, count: number): number {
  return new Pcg64(seed).integerBelow(count);
}
