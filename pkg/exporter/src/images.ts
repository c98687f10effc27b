/**
 * Raw sample decoding: 8-bit RGB PNGs and the structured xyz grids stored as
 * 3-channel float32 TIFFs. The TIFF side is deliberately narrow: it reads
 * exactly the flavor the Python preprocess stage writes (little-endian,
 * uncompressed strips, IEEE float samples) and nothing else.
 */

import { readFileSync, renameSync, writeFileSync } from "node:fs";
import { PNG } from "pngjs";

export interface RgbImage {
  rows: number;
  cols: number;
  /** rows*cols*3 values in [0, 1]. */
  pixels: Float32Array;
}

export interface XyzGrid {
  rows: number;
  cols: number;
  /** rows*cols*3 xyz values; an exact (0,0,0) triple marks background. */
  coords: Float32Array;
}

export function readRgbPng(path: string): RgbImage {
  let png: PNG;
  try {
    png = PNG.sync.read(readFileSync(path));
  } catch (err) {
    throw new Error(`cannot read image ${path}: ${(err as Error).message}`);
  }
  const rows = png.height;
  const cols = png.width;
  const pixels = new Float32Array(rows * cols * 3);
  // pngjs always hands back RGBA
  for (let i = 0, p = 0; i < rows * cols; i++, p += 4) {
    pixels[3 * i] = png.data[p] / 255.0;
    pixels[3 * i + 1] = png.data[p + 1] / 255.0;
    pixels[3 * i + 2] = png.data[p + 2] / 255.0;
  }
  return { rows, cols, pixels };
}

/** Bilinear resize through half-pixel centers; returns the input when sizes match. */
export function resizeBilinear(img: RgbImage, outRows: number, outCols: number): RgbImage {
  if (outRows < 1 || outCols < 1) {
    throw new Error(`bad resize target (${outRows}, ${outCols})`);
  }
  if (outRows === img.rows && outCols === img.cols) {
    return img;
  }
  const out = new Float32Array(outRows * outCols * 3);
  const scaleR = img.rows / outRows;
  const scaleC = img.cols / outCols;
  for (let r = 0; r < outRows; r++) {
    let sr = (r + 0.5) * scaleR - 0.5;
    sr = Math.min(Math.max(sr, 0), img.rows - 1);
    const r0 = Math.floor(sr);
    const r1 = Math.min(r0 + 1, img.rows - 1);
    const wr = sr - r0;
    for (let c = 0; c < outCols; c++) {
      let sc = (c + 0.5) * scaleC - 0.5;
      sc = Math.min(Math.max(sc, 0), img.cols - 1);
      const c0 = Math.floor(sc);
      const c1 = Math.min(c0 + 1, img.cols - 1);
      const wc = sc - c0;
      for (let ch = 0; ch < 3; ch++) {
        const tl = img.pixels[(r0 * img.cols + c0) * 3 + ch];
        const tr = img.pixels[(r0 * img.cols + c1) * 3 + ch];
        const bl = img.pixels[(r1 * img.cols + c0) * 3 + ch];
        const br = img.pixels[(r1 * img.cols + c1) * 3 + ch];
        const top = tl + (tr - tl) * wc;
        const bot = bl + (br - bl) * wc;
        out[(r * outCols + c) * 3 + ch] = top + (bot - top) * wr;
      }
    }
  }
  return { rows: outRows, cols: outCols, pixels: out };
}

// TIFF tag ids this reader cares about
const TAG_WIDTH = 256;
const TAG_HEIGHT = 257;
const TAG_BITS = 258;
const TAG_COMPRESSION = 259;
const TAG_PHOTOMETRIC = 262;
const TAG_STRIP_OFFSETS = 273;
const TAG_SAMPLES = 277;
const TAG_ROWS_PER_STRIP = 278;
const TAG_STRIP_COUNTS = 279;
const TAG_PLANAR = 284;
const TAG_SAMPLE_FORMAT = 339;

const TYPE_SHORT = 3;
const TYPE_LONG = 4;

function readTagArray(buf: Buffer, type: number, count: number, valueOffset: number): number[] {
  let width: number;
  if (type === TYPE_SHORT) {
    width = 2;
  } else if (type === TYPE_LONG) {
    width = 4;
  } else {
    throw new Error(`unsupported TIFF tag type ${type}`);
  }
  const total = width * count;
  const base = total <= 4 ? valueOffset : buf.readUInt32LE(valueOffset);
  const out: number[] = [];
  for (let i = 0; i < count; i++) {
    out.push(width === 2 ? buf.readUInt16LE(base + 2 * i) : buf.readUInt32LE(base + 4 * i));
  }
  return out;
}

export function readXyzTiff(path: string): XyzGrid {
  const buf = readFileSync(path);
  if (buf.length < 8 || buf.toString("ascii", 0, 2) !== "II" || buf.readUInt16LE(2) !== 42) {
    throw new Error(`${path} is not a little-endian TIFF`);
  }
  const ifd = buf.readUInt32LE(4);
  const nTags = buf.readUInt16LE(ifd);
  const tags = new Map<number, number[]>();
  for (let i = 0; i < nTags; i++) {
    const off = ifd + 2 + 12 * i;
    const tag = buf.readUInt16LE(off);
    const type = buf.readUInt16LE(off + 2);
    const count = buf.readUInt32LE(off + 4);
    tags.set(tag, readTagArray(buf, type, count, off + 8));
  }

  const one = (tag: number, label: string): number => {
    const v = tags.get(tag);
    if (!v || v.length === 0) {
      throw new Error(`${path}: missing TIFF tag ${label}`);
    }
    return v[0];
  };
  const cols = one(TAG_WIDTH, "width");
  const rows = one(TAG_HEIGHT, "height");
  const compression = one(TAG_COMPRESSION, "compression");
  if (compression !== 1) {
    throw new Error(
      `${path}: compression code ${compression} not supported; this reader only handles the uncompressed float TIFFs the preprocess stage writes`,
    );
  }
  const samples = one(TAG_SAMPLES, "samples per pixel");
  if (samples !== 3) {
    throw new Error(`${path}: expected 3 samples per pixel, got ${samples}`);
  }
  for (const bits of tags.get(TAG_BITS) ?? []) {
    if (bits !== 32) {
      throw new Error(`${path}: expected 32-bit samples, got ${bits}`);
    }
  }
  for (const fmt of tags.get(TAG_SAMPLE_FORMAT) ?? []) {
    if (fmt !== 3) {
      throw new Error(`${path}: expected IEEE float samples (format 3), got ${fmt}`);
    }
  }
  const planar = tags.get(TAG_PLANAR)?.[0] ?? 1;
  if (planar !== 1) {
    throw new Error(`${path}: planar configuration ${planar} not supported`);
  }

  const offsets = tags.get(TAG_STRIP_OFFSETS);
  const counts = tags.get(TAG_STRIP_COUNTS);
  if (!offsets || !counts || offsets.length !== counts.length) {
    throw new Error(`${path}: malformed strip layout`);
  }
  const expected = rows * cols * 3 * 4;
  const payload = Buffer.alloc(expected);
  let at = 0;
  for (let i = 0; i < offsets.length; i++) {
    if (at + counts[i] > expected || offsets[i] + counts[i] > buf.length) {
      throw new Error(`${path}: strip ${i} overruns the file`);
    }
    buf.copy(payload, at, offsets[i], offsets[i] + counts[i]);
    at += counts[i];
  }
  if (at !== expected) {
    throw new Error(`${path}: strips hold ${at} bytes, expected ${expected}`);
  }
  const coords = new Float32Array(rows * cols * 3);
  for (let i = 0; i < coords.length; i++) {
    coords[i] = payload.readFloatLE(4 * i);
  }
  return { rows, cols, coords };
}

/** Single-strip uncompressed writer, mainly for fixtures and tooling. */
export function writeXyzTiff(path: string, grid: XyzGrid): void {
  const { rows, cols, coords } = grid;
  if (coords.length !== rows * cols * 3) {
    throw new Error(`coords length ${coords.length} is not ${rows}x${cols}x3`);
  }
  const nTags = 11;
  const ifdStart = 8;
  const arraysStart = ifdStart + 2 + 12 * nTags + 4;
  const bitsOffset = arraysStart; // 3 u16
  const fmtOffset = arraysStart + 6; // 3 u16
  const dataOffset = arraysStart + 12;
  const dataBytes = rows * cols * 3 * 4;
  const buf = Buffer.alloc(dataOffset + dataBytes);

  buf.write("II", 0, "ascii");
  buf.writeUInt16LE(42, 2);
  buf.writeUInt32LE(ifdStart, 4);
  buf.writeUInt16LE(nTags, ifdStart);

  let entry = ifdStart + 2;
  const tag = (id: number, type: number, count: number, value: number) => {
    buf.writeUInt16LE(id, entry);
    buf.writeUInt16LE(type, entry + 2);
    buf.writeUInt32LE(count, entry + 4);
    if (type === TYPE_SHORT && count === 1) {
      buf.writeUInt16LE(value, entry + 8);
    } else {
      buf.writeUInt32LE(value, entry + 8);
    }
    entry += 12;
  };
  tag(TAG_WIDTH, TYPE_LONG, 1, cols);
  tag(TAG_HEIGHT, TYPE_LONG, 1, rows);
  tag(TAG_BITS, TYPE_SHORT, 3, bitsOffset);
  tag(TAG_COMPRESSION, TYPE_SHORT, 1, 1);
  tag(TAG_PHOTOMETRIC, TYPE_SHORT, 1, 2);
  tag(TAG_STRIP_OFFSETS, TYPE_LONG, 1, dataOffset);
  tag(TAG_SAMPLES, TYPE_SHORT, 1, 3);
  tag(TAG_ROWS_PER_STRIP, TYPE_LONG, 1, rows);
  tag(TAG_STRIP_COUNTS, TYPE_LONG, 1, dataBytes);
  tag(TAG_PLANAR, TYPE_SHORT, 1, 1);
  tag(TAG_SAMPLE_FORMAT, TYPE_SHORT, 3, fmtOffset);
  buf.writeUInt32LE(0, entry); // no next IFD

  for (let i = 0; i < 3; i++) {
    buf.writeUInt16LE(32, bitsOffset + 2 * i);
    buf.writeUInt16LE(3, fmtOffset + 2 * i);
  }
  for (let i = 0; i < coords.length; i++) {
    buf.writeFloatLE(coords[i], dataOffset + 4 * i);
  }
  const tmp = `${path}.tmp-${process.pid}`;
  writeFileSync(tmp, buf);
  renameSync(tmp, path);
}

export interface ForegroundPoints {
  count: number;
  /** flat count x 3 xyz, row-major pixel scan order. */
  points: Float64Array;
  /** flat count x 2 (row, col) pixel coordinates. */
  pixels: Float64Array;
}

export function foregroundPoints(grid: XyzGrid): ForegroundPoints {
  const { rows, cols, coords } = grid;
  let count = 0;
  for (let i = 0; i < rows * cols; i++) {
    if (coords[3 * i] !== 0 || coords[3 * i + 1] !== 0 || coords[3 * i + 2] !== 0) {
      count++;
    }
  }
  const points = new Float64Array(count * 3);
  const pixels = new Float64Array(count * 2);
  let at = 0;
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      const i = r * cols + c;
      if (coords[3 * i] !== 0 || coords[3 * i + 1] !== 0 || coords[3 * i + 2] !== 0) {
        points[3 * at] = coords[3 * i];
        points[3 * at + 1] = coords[3 * i + 1];
        points[3 * at + 2] = coords[3 * i + 2];
        pixels[2 * at] = r;
        pixels[2 * at + 1] = c;
        at++;
      }
    }
  }
  return { count, points, pixels };
}
