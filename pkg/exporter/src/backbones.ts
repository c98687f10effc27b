/**
 * Pluggable feature backbones.
 *
 * "reference" is a deterministic seeded model that runs anywhere with no
 * downloads: a fixed random projection plus tanh, with an additive positional
 * table on the color side. Names of real pretrained models are registered but
 * ship without weights; constructing one raises an error that says how to
 * plug the real thing in. Register your own with registerRgbBackbone /
 * registerPcBackbone.
 */

import { createHash } from "node:crypto";
import type { RgbImage } from "./images.js";

const MASK64 = (1n << 64n) - 1n;

function fnv1a64(text: string): bigint {
  let h = 0xcbf29ce484222325n;
  for (let i = 0; i < text.length; i++) {
    h ^= BigInt(text.charCodeAt(i) & 0xff);
    h = (h * 0x100000001b3n) & MASK64;
  }
  return h;
}

/** splitmix64 stream keyed by (seed, tag); feeds Box-Muller gaussians. */
class WeightStream {
  private state: bigint;
  private spare: number | null = null;

  constructor(seed: number, tag: string) {
    this.state = ((BigInt(seed) * 0x9e3779b97f4a7c15n) ^ fnv1a64(tag)) & MASK64;
  }

  private nextUint64(): bigint {
    this.state = (this.state + 0x9e3779b97f4a7c15n) & MASK64;
    let z = this.state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK64;
    return (z ^ (z >> 31n)) & MASK64;
  }

  uniform(): number {
    // 53 mantissa bits, strictly inside (0, 1]
    return (Number(this.nextUint64() >> 11n) + 1) / 9007199254740992;
  }

  gaussian(): number {
    if (this.spare !== null) {
      const v = this.spare;
      this.spare = null;
      return v;
    }
    const r = Math.sqrt(-2.0 * Math.log(this.uniform()));
    const theta = 2.0 * Math.PI * this.uniform();
    this.spare = r * Math.sin(theta);
    return r * Math.cos(theta);
  }

  matrix(rows: number, cols: number, scale: number): Float64Array {
    const out = new Float64Array(rows * cols);
    for (let i = 0; i < out.length; i++) {
      out[i] = this.gaussian() * scale;
    }
    return out;
  }
}

function weightsChecksum(parts: Float64Array[]): string {
  const h = createHash("sha256");
  for (const p of parts) {
    h.update(Buffer.from(p.buffer, p.byteOffset, p.byteLength));
  }
  return h.digest("hex");
}

// ---------------------------------------------------------------------------
// Color backbone

export interface RgbBackboneOptions {
  inputSize: number;
  patchSize: number;
  dim: number;
  seed: number;
}

export interface RgbBackbone {
  readonly name: string;
  readonly inputSize: number;
  readonly patchSize: number;
  readonly dim: number;
  readonly weightsSha256: string;
  /**
   * Patch tokens for one inputSize x inputSize image, flat (grid*grid) x dim
   * in row-major patch order. Tokens include the model's additive positional
   * table; subtract positionalTable() to get position-free features.
   */
  encode(img: RgbImage): Float64Array;
  positionalTable(): Float64Array;
}

export interface PcBackboneOptions {
  dim: number;
  seed: number;
}

export interface PcBackbone {
  readonly name: string;
  readonly dim: number;
  readonly weightsSha256: string;
  /** Embed one group of m points given center-relative coords (flat m x 3). */
  embedGroup(rel: Float64Array, m: number): Float64Array;
}

class ReferenceRgbBackbone implements RgbBackbone {
  readonly name = "reference";
  readonly inputSize: number;
  readonly patchSize: number;
  readonly dim: number;
  readonly weightsSha256: string;
  private readonly grid: number;
  private readonly weights: Float64Array; // dim x patchVec
  private readonly positional: Float64Array; // grid*grid x dim

  constructor(opts: RgbBackboneOptions) {
    if (opts.inputSize % opts.patchSize !== 0) {
      throw new Error(
        `input size ${opts.inputSize} does not divide into ${opts.patchSize}px patches`,
      );
    }
    this.inputSize = opts.inputSize;
    this.patchSize = opts.patchSize;
    this.dim = opts.dim;
    this.grid = opts.inputSize / opts.patchSize;
    const patchVec = opts.patchSize * opts.patchSize * 3;
    this.weights = new WeightStream(opts.seed, "rgb-proj").matrix(
      opts.dim,
      patchVec,
      1.0 / Math.sqrt(patchVec),
    );
    this.positional = new WeightStream(opts.seed, "rgb-pos").matrix(
      this.grid * this.grid,
      opts.dim,
      0.25,
    );
    this.weightsSha256 = weightsChecksum([this.weights, this.positional]);
  }

  encode(img: RgbImage): Float64Array {
    if (img.rows !== this.inputSize || img.cols !== this.inputSize) {
      throw new Error(
        `backbone wants a ${this.inputSize}x${this.inputSize} image, got ${img.rows}x${img.cols}`,
      );
    }
    const g = this.grid;
    const ps = this.patchSize;
    const patchVec = ps * ps * 3;
    const patch = new Float64Array(patchVec);
    const out = new Float64Array(g * g * this.dim);
    for (let pr = 0; pr < g; pr++) {
      for (let pc = 0; pc < g; pc++) {
        let at = 0;
        for (let r = 0; r < ps; r++) {
          const row = (pr * ps + r) * img.cols + pc * ps;
          for (let c = 0; c < ps; c++) {
            const px = (row + c) * 3;
            patch[at++] = img.pixels[px];
            patch[at++] = img.pixels[px + 1];
            patch[at++] = img.pixels[px + 2];
          }
        }
        const token = (pr * g + pc) * this.dim;
        for (let j = 0; j < this.dim; j++) {
          let acc = 0.0;
          const wrow = j * patchVec;
          for (let i = 0; i < patchVec; i++) {
            acc += this.weights[wrow + i] * patch[i];
          }
          out[token + j] = Math.tanh(acc) + this.positional[token + j];
        }
      }
    }
    return out;
  }

  positionalTable(): Float64Array {
    return this.positional;
  }
}

const PC_HIDDEN = 32;

class ReferencePcBackbone implements PcBackbone {
  readonly name = "reference";
  readonly dim: number;
  readonly weightsSha256: string;
  private readonly wIn: Float64Array; // hidden x 3
  private readonly wOut: Float64Array; // dim x 2*hidden

  constructor(opts: PcBackboneOptions) {
    this.dim = opts.dim;
    this.wIn = new WeightStream(opts.seed, "pc-in").matrix(PC_HIDDEN, 3, 1.0 / Math.sqrt(3));
    this.wOut = new WeightStream(opts.seed, "pc-out").matrix(
      opts.dim,
      2 * PC_HIDDEN,
      1.0 / Math.sqrt(2 * PC_HIDDEN),
    );
    this.weightsSha256 = weightsChecksum([this.wIn, this.wOut]);
  }

  embedGroup(rel: Float64Array, m: number): Float64Array {
    if (m < 1 || rel.length !== m * 3) {
      throw new Error(`group must be flat m x 3 with m >= 1, got length ${rel.length}`);
    }
    // order-insensitive pooling: mean and max of per-point features
    const mean = new Float64Array(PC_HIDDEN);
    const max = new Float64Array(PC_HIDDEN).fill(-Infinity);
    for (let p = 0; p < m; p++) {
      for (let h = 0; h < PC_HIDDEN; h++) {
        const a = Math.tanh(
          this.wIn[3 * h] * rel[3 * p] +
            this.wIn[3 * h + 1] * rel[3 * p + 1] +
            this.wIn[3 * h + 2] * rel[3 * p + 2],
        );
        mean[h] += a;
        if (a > max[h]) {
          max[h] = a;
        }
      }
    }
    for (let h = 0; h < PC_HIDDEN; h++) {
      mean[h] /= m;
    }
    const out = new Float64Array(this.dim);
    for (let j = 0; j < this.dim; j++) {
      let acc = 0.0;
      const row = j * 2 * PC_HIDDEN;
      for (let h = 0; h < PC_HIDDEN; h++) {
        acc += this.wOut[row + h] * mean[h] + this.wOut[row + PC_HIDDEN + h] * max[h];
      }
      out[j] = Math.tanh(acc);
    }
    return out;
  }
}

// ---------------------------------------------------------------------------
// Registry

type RgbFactory = (opts: RgbBackboneOptions) => RgbBackbone;
type PcFactory = (opts: PcBackboneOptions) => PcBackbone;

const rgbFactories = new Map<string, RgbFactory>();
const pcFactories = new Map<string, PcFactory>();

export function registerRgbBackbone(name: string, factory: RgbFactory): void {
  rgbFactories.set(name, factory);
}

export function registerPcBackbone(name: string, factory: PcFactory): void {
  pcFactories.set(name, factory);
}

function pretrainedStub(kind: "rgb" | "pc", name: string): never {
  const register = kind === "rgb" ? "registerRgbBackbone" : "registerPcBackbone";
  throw new Error(
    `${kind} backbone "${name}" needs pretrained weights and none are bundled (this tool never downloads). ` +
      `Fetch the weights out of band, wrap them in the backbone interface with your model runtime, ` +
      `and plug them in via ${register}("${name}", factory). ` +
      `The "reference" backbone runs without any downloads.`,
  );
}

registerRgbBackbone("reference", (opts) => new ReferenceRgbBackbone(opts));
registerRgbBackbone("dino", () => pretrainedStub("rgb", "dino"));
registerPcBackbone("reference", (opts) => new ReferencePcBackbone(opts));
registerPcBackbone("point-mae", () => pretrainedStub("pc", "point-mae"));

export function createRgbBackbone(name: string, opts: RgbBackboneOptions): RgbBackbone {
  const factory = rgbFactories.get(name);
  if (!factory) {
    throw new Error(
      `unknown rgb backbone "${name}"; known: ${[...rgbFactories.keys()].sort().join(", ")}`,
    );
  }
  return factory(opts);
}

export function createPcBackbone(name: string, opts: PcBackboneOptions): PcBackbone {
  const factory = pcFactories.get(name);
  if (!factory) {
    throw new Error(
      `unknown pc backbone "${name}"; known: ${[...pcFactories.keys()].sort().join(", ")}`,
    );
  }
  return factory(opts);
}
