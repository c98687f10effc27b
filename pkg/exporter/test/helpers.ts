/** Shared fixtures and process wrappers for the test suite. */

import { spawnSync } from "node:child_process";
import { mkdirSync, writeFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { PNG } from "pngjs";
import { writeXyzTiff, type XyzGrid } from "../src/images.js";

const MAX_BUFFER = 1 << 28;

/** Run a python snippet, returning stdout; throws with stderr attached on failure. */
export function runPython(code: string): string {
  const res = spawnSync("python3", ["-c", code], {
    encoding: "utf8",
    maxBuffer: MAX_BUFFER,
  });
  if (res.error) throw res.error;
  if (res.status !== 0) {
    throw new Error(`python exited with ${res.status}:\n${res.stderr}`);
  }
  return res.stdout;
}

export function pythonJson<T>(code: string): T {
  return JSON.parse(runPython(code)) as T;
}

export function runXmad(args: string[]): {
  status: number | null;
  stdout: string;
  stderr: string;
} {
  const res = spawnSync("xmad", args, { encoding: "utf8", maxBuffer: MAX_BUFFER });
  if (res.error) throw res.error;
  return { status: res.status, stdout: res.stdout, stderr: res.stderr };
}

export function runOwnCli(args: string[]): {
  status: number | null;
  stdout: string;
  stderr: string;
} {
  const cli = join(import.meta.dirname, "..", "dist", "cli.js");
  const res = spawnSync(process.execPath, [cli, ...args], {
    encoding: "utf8",
    maxBuffer: MAX_BUFFER,
  });
  if (res.error) throw res.error;
  return { status: res.status, stdout: res.stdout, stderr: res.stderr };
}

/** Small deterministic PRNG for fixture data; unrelated to the export seeds. */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function writeRgbPng(
  path: string,
  rows: number,
  cols: number,
  pixel: (r: number, c: number) => [number, number, number],
): void {
  const png = new PNG({ width: cols, height: rows });
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      const [red, green, blue] = pixel(r, c);
      const i = (r * cols + c) * 4;
      png.data[i] = red;
      png.data[i + 1] = green;
      png.data[i + 2] = blue;
      png.data[i + 3] = 255;
    }
  }
  mkdirSync(dirname(path), { recursive: true });
  writeFileSync(path, PNG.sync.write(png, { colorType: 2 }));
}

export function writeGrayPng(
  path: string,
  rows: number,
  cols: number,
  value: (r: number, c: number) => number,
): void {
  const png = new PNG({ width: cols, height: rows });
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      const v = value(r, c);
      const i = (r * cols + c) * 4;
      png.data[i] = v;
      png.data[i + 1] = v;
      png.data[i + 2] = v;
      png.data[i + 3] = 255;
    }
  }
  mkdirSync(dirname(path), { recursive: true });
  writeFileSync(path, PNG.sync.write(png, { colorType: 0 }));
}

/**
 * Organized-grid scan of a bumpy object on a zeroed background. Interior
 * pixels carry strictly positive xyz so every one counts as foreground;
 * the border stays exactly zero.
 */
export function makeXyzGrid(
  rows: number,
  cols: number,
  variant: number,
  margin = 6,
): XyzGrid {
  const rand = mulberry32(0x5eed0 + variant);
  const coords = new Float32Array(rows * cols * 3);
  for (let r = margin; r < rows - margin; r++) {
    for (let c = margin; c < cols - margin; c++) {
      const i = (r * cols + c) * 3;
      coords[i] = 0.002 * c + 1e-4 * rand();
      coords[i + 1] = 0.002 * r + 1e-4 * rand();
      coords[i + 2] =
        0.012 +
        0.004 * Math.sin(0.4 * r + 0.7 * variant) * Math.cos(0.3 * c) +
        2e-4 * rand();
    }
  }
  return { rows, cols, coords };
}

function smoothRgb(variant: number, rows: number, cols: number) {
  const rand = mulberry32(0xc0108 + variant);
  const phase = rand() * 6.28;
  return (r: number, c: number): [number, number, number] => [
    Math.round(127 + 100 * Math.sin(0.11 * r + phase)),
    Math.round(127 + 100 * Math.cos(0.13 * c + phase)),
    Math.round(40 + (180 * (r + c)) / (rows + cols)),
  ];
}

export interface TreeSpec {
  classes: string[];
  trainGood: number;
  testGood: number;
  testAnomalous: number;
  gridRows?: number;
  gridCols?: number;
  rgbRows?: number;
  rgbCols?: number;
  xyzMargin?: number;
  /** When set, anomalous test samples get a gt mask of this size. */
  gtSize?: [number, number];
}

/** Lay out <root>/<class>/<split>/<defect>/{rgb,xyz,gt} with deterministic content. */
export function buildTree(root: string, spec: TreeSpec): string[] {
  const gridRows = spec.gridRows ?? 48;
  const gridCols = spec.gridCols ?? 48;
  const rgbRows = spec.rgbRows ?? 40;
  const rgbCols = spec.rgbCols ?? 40;
  const margin = spec.xyzMargin ?? 6;
  const keys: string[] = [];
  let variant = 0;
  for (const cls of spec.classes) {
    mkdirSync(join(root, cls), { recursive: true });
    // split order and sorted defect names match the exporter's walk order
    const groups: Array<[string, string, number, boolean]> = [
      ["train", "good", spec.trainGood, false],
      ["test", "dent", spec.testAnomalous, true],
      ["test", "good", spec.testGood, false],
    ];
    for (const [split, defect, count, anomalous] of groups) {
      for (let i = 0; i < count; i++) {
        // ids stay unique across the whole tree, like real capture runs
        const id = `${cls}_${split}_${defect}_${String(i).padStart(3, "0")}`;
        const ddir = join(root, cls, split, defect);
        variant += 1;
        writeRgbPng(
          join(ddir, "rgb", `${id}.png`),
          rgbRows,
          rgbCols,
          smoothRgb(variant, rgbRows, rgbCols),
        );
        mkdirSync(join(ddir, "xyz"), { recursive: true });
        writeXyzTiff(
          join(ddir, "xyz", `${id}.tiff`),
          makeXyzGrid(gridRows, gridCols, variant, margin),
        );
        if (anomalous && spec.gtSize) {
          const [gr, gc] = spec.gtSize;
          writeGrayPng(join(ddir, "gt", `${id}.png`), gr, gc, (r, c) =>
            r >= gr / 4 && r < gr / 2 && c >= gc / 4 && c < gc / 2 ? 255 : 0,
          );
        }
        keys.push(`${cls}/${split}/${defect}/${id}`);
      }
    }
  }
  return keys;
}
