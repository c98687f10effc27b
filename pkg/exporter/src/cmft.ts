/**
 * Binary feature-tensor files (.cmft), the wire contract with the Python
 * xmad tools.
 *
 * Layout, all little-endian: the 4 magic bytes "CMFT", then five u32 fields
 * (version=1, rows, cols, dim, dtype=0 for 4-byte floats), then the payload
 * as row-major float32 cells. A file is always 24 + 4*rows*cols*dim bytes.
 */

import { createHash } from "node:crypto";
import { readFileSync, renameSync, writeFileSync } from "node:fs";
import { endianness } from "node:os";

const HOST_LE = endianness() === "LE";

export const MAGIC = "CMFT";
export const FORMAT_VERSION = 1;
export const DTYPE_F32 = 0;
export const HEADER_BYTES = 24;

export interface FeatureGrid {
  rows: number;
  cols: number;
  dim: number;
  /** rows*cols*dim values, cell-major (row, then col, then channel). */
  data: Float32Array;
}

export function featureFileBytes(rows: number, cols: number, dim: number): number {
  return HEADER_BYTES + 4 * rows * cols * dim;
}

function checkShape(rows: number, cols: number, dim: number) {
  for (const [label, v] of [["rows", rows], ["cols", cols], ["dim", dim]] as const) {
    if (!Number.isInteger(v) || v < 1) {
      throw new Error(`bad feature grid ${label}: ${v}`);
    }
  }
}

export function makeFeatureGrid(
  rows: number,
  cols: number,
  dim: number,
  values: Float32Array | Float64Array | number[],
): FeatureGrid {
  checkShape(rows, cols, dim);
  if (values.length !== rows * cols * dim) {
    throw new Error(
      `feature grid wants ${rows * cols * dim} values for ${rows}x${cols}x${dim}, got ${values.length}`,
    );
  }
  const data = values instanceof Float32Array ? values : Float32Array.from(values);
  for (let i = 0; i < data.length; i++) {
    if (!Number.isFinite(data[i])) {
      throw new Error(`non-finite value at flat index ${i}`);
    }
  }
  return { rows, cols, dim, data };
}

export function encodeFeatureGrid(grid: FeatureGrid): Buffer {
  checkShape(grid.rows, grid.cols, grid.dim);
  const buf = Buffer.alloc(featureFileBytes(grid.rows, grid.cols, grid.dim));
  buf.write(MAGIC, 0, "ascii");
  buf.writeUInt32LE(FORMAT_VERSION, 4);
  buf.writeUInt32LE(grid.rows, 8);
  buf.writeUInt32LE(grid.cols, 12);
  buf.writeUInt32LE(grid.dim, 16);
  buf.writeUInt32LE(DTYPE_F32, 20);
  if (HOST_LE) {
    Buffer.from(grid.data.buffer, grid.data.byteOffset, grid.data.byteLength).copy(
      buf,
      HEADER_BYTES,
    );
  } else {
    for (let i = 0; i < grid.data.length; i++) {
      buf.writeFloatLE(grid.data[i], HEADER_BYTES + 4 * i);
    }
  }
  return buf;
}

export function decodeFeatureGrid(buf: Buffer): FeatureGrid {
  if (buf.length < HEADER_BYTES) {
    throw new Error(`truncated header: expected ${HEADER_BYTES} bytes, got ${buf.length}`);
  }
  const magic = buf.toString("ascii", 0, 4);
  if (magic !== MAGIC) {
    throw new Error(`bad magic ${JSON.stringify(magic)}, expected ${JSON.stringify(MAGIC)}`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== FORMAT_VERSION) {
    throw new Error(`unsupported version ${version}, expected ${FORMAT_VERSION}`);
  }
  const rows = buf.readUInt32LE(8);
  const cols = buf.readUInt32LE(12);
  const dim = buf.readUInt32LE(16);
  const dtype = buf.readUInt32LE(20);
  if (dtype !== DTYPE_F32) {
    throw new Error(`unsupported dtype code ${dtype}, expected ${DTYPE_F32}`);
  }
  if (rows < 1 || cols < 1 || dim < 1) {
    throw new Error(`bad shape (${rows}, ${cols}, ${dim})`);
  }
  const expected = featureFileBytes(rows, cols, dim);
  if (buf.length !== expected) {
    throw new Error(`payload size mismatch: expected ${expected} bytes total, got ${buf.length}`);
  }
  let data: Float32Array;
  if (HOST_LE) {
    data = new Float32Array(
      buf.buffer.slice(buf.byteOffset + HEADER_BYTES, buf.byteOffset + expected),
    );
  } else {
    data = new Float32Array(rows * cols * dim);
    for (let i = 0; i < data.length; i++) {
      data[i] = buf.readFloatLE(HEADER_BYTES + 4 * i);
    }
  }
  return { rows, cols, dim, data };
}

export function readFeatureGridFile(path: string): FeatureGrid {
  return decodeFeatureGrid(readFileSync(path));
}

/** Write tmp-then-rename so a crash never leaves a half-written tensor. */
export function writeFeatureGridFile(path: string, grid: FeatureGrid): number {
  const buf = encodeFeatureGrid(grid);
  const tmp = `${path}.tmp-${process.pid}`;
  writeFileSync(tmp, buf);
  renameSync(tmp, path);
  return buf.length;
}

export function sha256Hex(buf: Buffer | Uint8Array): string {
  return createHash("sha256").update(buf).digest("hex");
}

export function fileSha256(path: string): string {
  return sha256Hex(readFileSync(path));
}
