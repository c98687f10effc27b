/**
 * Tree walker and per-sample export pipelines.
 *
 * Input is a preprocessed dataset laid out as
 * <root>/<class>/<split>/<defect>/{rgb/<id>.png, xyz/<id>.tiff}; output
 * mirrors the tree with feat/<modality>/<id>.cmft tensors plus JSON sidecars,
 * and one export manifest per modality at the output root. Samples that fail
 * are recorded and skipped; everything else still exports.
 */

import { existsSync, mkdirSync, readdirSync, readFileSync, renameSync, statSync, writeFileSync } from "node:fs";
import { join, relative } from "node:path";
import {
  createPcBackbone,
  createRgbBackbone,
  type PcBackbone,
  type RgbBackbone,
} from "./backbones.js";
import { fileSha256, makeFeatureGrid, writeFeatureGridFile } from "./cmft.js";
import {
  avgPool2,
  farthestPointSample,
  idwInterpolate,
  knnGroups,
  repeatUpsample,
  scaleGridPositions,
} from "./geometry.js";
import { foregroundPoints, readRgbPng, readXyzTiff, resizeBilinear } from "./images.js";
import { seededStartIndex } from "./nprandom.js";

export class ExportDataError extends Error {}

export const SPLITS = ["train", "test"] as const;

export interface ExportOptions {
  modality: "rgb" | "pc";
  root: string;
  out: string;
  classes?: string[];
  backbone?: string;
  /** Backbone weight seed. */
  seed?: number;
  rows?: number;
  cols?: number;
  dim?: number;
  /** Color side: image size fed to the backbone and its patch edge. */
  inputSize?: number;
  patchSize?: number;
  /** Point side: grouping and interpolation settings. */
  fpsSeed?: number;
  nGroups?: number;
  groupSize?: number;
  idwK?: number;
  idwPower?: number;
  /** Write per-sample group centers + embeddings next to each tensor. */
  dumpGroups?: boolean;
  log?: (line: string) => void;
}

interface Resolved extends Required<Omit<ExportOptions, "classes" | "log">> {
  classes: string[] | null;
  log: (line: string) => void;
}

export interface ExportFailure {
  sample: string;
  error: string;
}

export interface ExportSummary {
  manifestPath: string;
  exported: string[];
  failures: ExportFailure[];
}

function resolveOptions(opts: ExportOptions): Resolved {
  const r: Resolved = {
    modality: opts.modality,
    root: opts.root,
    out: opts.out,
    classes: opts.classes ?? null,
    backbone: opts.backbone ?? "reference",
    seed: opts.seed ?? 0,
    rows: opts.rows ?? 56,
    cols: opts.cols ?? 56,
    dim: opts.dim ?? 768,
    inputSize: opts.inputSize ?? 224,
    patchSize: opts.patchSize ?? 16,
    fpsSeed: opts.fpsSeed ?? 0,
    nGroups: opts.nGroups ?? 1024,
    groupSize: opts.groupSize ?? 128,
    idwK: opts.idwK ?? 4,
    idwPower: opts.idwPower ?? 2.0,
    dumpGroups: opts.dumpGroups ?? false,
    log: opts.log ?? (() => {}),
  };
  if (r.modality !== "rgb" && r.modality !== "pc") {
    throw new Error(`modality must be "rgb" or "pc", got ${JSON.stringify(r.modality)}`);
  }
  for (const [label, v] of [
    ["rows", r.rows], ["cols", r.cols], ["dim", r.dim],
    ["n-groups", r.nGroups], ["group-size", r.groupSize], ["idw-k", r.idwK],
  ] as const) {
    if (!Number.isInteger(v) || v < 1) {
      throw new Error(`${label} must be a positive integer, got ${v}`);
    }
  }
  return r;
}

/** JSON with recursively sorted keys so reruns are byte-identical. */
function stableJson(value: unknown, indent = 0): string {
  const pad = "  ".repeat(indent + 1);
  const close = "  ".repeat(indent);
  if (Array.isArray(value)) {
    if (value.length === 0) return "[]";
    const items = value.map((v) => pad + stableJson(v, indent + 1));
    return `[\n${items.join(",\n")}\n${close}]`;
  }
  if (value !== null && typeof value === "object") {
    const keys = Object.keys(value as Record<string, unknown>).sort();
    if (keys.length === 0) return "{}";
    const items = keys.map(
      (k) =>
        `${pad}${JSON.stringify(k)}: ${stableJson((value as Record<string, unknown>)[k], indent + 1)}`,
    );
    return `{\n${items.join(",\n")}\n${close}}`;
  }
  return JSON.stringify(value);
}

function writeJsonAtomic(path: string, value: unknown): void {
  const tmp = `${path}.tmp-${process.pid}`;
  writeFileSync(tmp, stableJson(value) + "\n");
  renameSync(tmp, path);
}

function listDirs(path: string): string[] {
  if (!existsSync(path)) return [];
  return readdirSync(path, { withFileTypes: true })
    .filter((e) => e.isDirectory())
    .map((e) => e.name)
    .sort();
}

function listFiles(path: string, suffix: string): string[] {
  if (!existsSync(path)) return [];
  return readdirSync(path, { withFileTypes: true })
    .filter((e) => e.isFile() && e.name.endsWith(suffix))
    .map((e) => e.name)
    .sort();
}

interface SampleRef {
  key: string;
  cls: string;
  split: string;
  defect: string;
  id: string;
  inputPath: string;
}

function discoverSamples(r: Resolved): SampleRef[] {
  if (!existsSync(r.root) || !statSync(r.root).isDirectory()) {
    throw new ExportDataError(`dataset root ${r.root} does not exist`);
  }
  const classes = r.classes ?? listDirs(r.root);
  const subdir = r.modality === "rgb" ? "rgb" : "xyz";
  const suffix = r.modality === "rgb" ? ".png" : ".tiff";
  const refs: SampleRef[] = [];
  for (const cls of classes) {
    const cdir = join(r.root, cls);
    if (!existsSync(cdir)) {
      throw new ExportDataError(`class directory ${cdir} does not exist`);
    }
    for (const split of SPLITS) {
      for (const defect of listDirs(join(cdir, split))) {
        const fdir = join(cdir, split, defect, subdir);
        for (const name of listFiles(fdir, suffix)) {
          const id = name.slice(0, -suffix.length);
          refs.push({
            key: `${cls}/${split}/${defect}/${id}`,
            cls,
            split,
            defect,
            id,
            inputPath: join(fdir, name),
          });
        }
      }
    }
  }
  return refs;
}

/** Plane parameters recorded by the preprocess stage, when available. */
function loadPlanes(root: string): Record<string, unknown> {
  const path = join(root, "preprocess_manifest.json");
  if (!existsSync(path)) return {};
  try {
    const manifest = JSON.parse(readFileSync(path, "utf-8"));
    const planes: Record<string, unknown> = {};
    for (const [key, entry] of Object.entries(manifest.samples ?? {})) {
      const plane = (entry as Record<string, unknown>).plane;
      if (plane !== undefined) {
        planes[key] = plane;
      }
    }
    return planes;
  } catch {
    return {};
  }
}

function exportRgbSample(ref: SampleRef, r: Resolved, backbone: RgbBackbone): Float32Array {
  const img = resizeBilinear(readRgbPng(ref.inputPath), r.inputSize, r.inputSize);
  const grid = r.inputSize / r.patchSize;
  const tokens = backbone.encode(img);
  const positional = backbone.positionalTable();
  // positional part stripped so the cells compare across locations
  const stripped = new Float64Array(tokens.length);
  for (let i = 0; i < tokens.length; i++) {
    stripped[i] = tokens[i] - positional[i];
  }
  const up = repeatUpsample(stripped, grid, grid, r.dim, r.rows / grid, r.cols / grid);
  return Float32Array.from(up);
}

interface PcSampleOut {
  data: Float32Array;
  start: number;
  centers: number[][];
  embeddings: Float64Array[];
  gridRows: number;
  gridCols: number;
}

function exportPcSample(ref: SampleRef, r: Resolved, backbone: PcBackbone): PcSampleOut {
  const grid = readXyzTiff(ref.inputPath);
  const fg = foregroundPoints(grid);
  if (fg.count < r.nGroups) {
    throw new Error(`${fg.count} foreground points < ${r.nGroups} groups`);
  }
  const m = Math.min(r.groupSize, fg.count);
  const start = seededStartIndex(r.fpsSeed, fg.count);
  const centers = farthestPointSample(fg.points, 3, fg.count, r.nGroups, start);
  const groups = knnGroups(fg.points, 3, fg.count, centers, m);

  const embeddings: Float64Array[] = [];
  const values = new Float64Array(r.nGroups * r.dim);
  const rel = new Float64Array(m * 3);
  for (let gi = 0; gi < groups.length; gi++) {
    const idx = groups[gi];
    const cx = fg.points[idx[0] * 3];
    const cy = fg.points[idx[0] * 3 + 1];
    const cz = fg.points[idx[0] * 3 + 2];
    for (let p = 0; p < m; p++) {
      rel[3 * p] = fg.points[idx[p] * 3] - cx;
      rel[3 * p + 1] = fg.points[idx[p] * 3 + 1] - cy;
      rel[3 * p + 2] = fg.points[idx[p] * 3 + 2] - cz;
    }
    const emb = backbone.embedGroup(rel, m);
    embeddings.push(emb);
    values.set(emb, gi * r.dim);
  }

  const centerPixels = new Float64Array(r.nGroups * 2);
  for (let gi = 0; gi < r.nGroups; gi++) {
    centerPixels[2 * gi] = fg.pixels[2 * centers[gi]];
    centerPixels[2 * gi + 1] = fg.pixels[2 * centers[gi] + 1];
  }
  // interpolate at double resolution, then average-pool back down
  const fineRows = 2 * r.rows;
  const fineCols = 2 * r.cols;
  const positions = scaleGridPositions(centerPixels, grid.rows, grid.cols, fineRows, fineCols);
  const k = Math.min(r.idwK, r.nGroups);
  const fine = idwInterpolate(positions, values, r.dim, fineRows, fineCols, k, r.idwPower);
  const pooled = avgPool2(fine, fineRows, fineCols, r.dim);

  return {
    data: Float32Array.from(pooled),
    start,
    centers: Array.from(centers, (ci) => [fg.pixels[2 * ci], fg.pixels[2 * ci + 1]]),
    embeddings,
    gridRows: grid.rows,
    gridCols: grid.cols,
  };
}

export function runExport(opts: ExportOptions): ExportSummary {
  const r = resolveOptions(opts);
  if (r.modality === "rgb") {
    if (r.inputSize % r.patchSize !== 0) {
      throw new Error(`input size ${r.inputSize} does not divide into ${r.patchSize}px patches`);
    }
    const grid = r.inputSize / r.patchSize;
    if (r.rows % grid !== 0 || r.cols % grid !== 0) {
      throw new Error(
        `output grid ${r.rows}x${r.cols} must be a multiple of the ${grid}x${grid} token grid`,
      );
    }
  }

  const rgbBackbone =
    r.modality === "rgb"
      ? createRgbBackbone(r.backbone, {
          inputSize: r.inputSize,
          patchSize: r.patchSize,
          dim: r.dim,
          seed: r.seed,
        })
      : null;
  const pcBackbone =
    r.modality === "pc" ? createPcBackbone(r.backbone, { dim: r.dim, seed: r.seed }) : null;

  const refs = discoverSamples(r);
  if (refs.length === 0) {
    throw new ExportDataError(`no ${r.modality} samples found under ${r.root}`);
  }

  const planes = loadPlanes(r.root);
  const exported: string[] = [];
  const failures: ExportFailure[] = [];
  const sampleEntries: Record<string, unknown> = {};

  for (const ref of refs) {
    const outDir = join(r.out, ref.cls, ref.split, ref.defect, "feat", r.modality);
    const outPath = join(outDir, `${ref.id}.cmft`);
    try {
      let entry: Record<string, unknown>;
      mkdirSync(outDir, { recursive: true });
      if (r.modality === "rgb") {
        const data = exportRgbSample(ref, r, rgbBackbone!);
        writeFeatureGridFile(outPath, makeFeatureGrid(r.rows, r.cols, r.dim, data));
        entry = {};
      } else {
        const res = exportPcSample(ref, r, pcBackbone!);
        writeFeatureGridFile(outPath, makeFeatureGrid(r.rows, r.cols, r.dim, res.data));
        entry = { fps_start: res.start, n_groups: r.nGroups, group_size: r.groupSize };
        if (r.dumpGroups) {
          writeJsonAtomic(join(outDir, `${ref.id}.groups.json`), {
            fps_seed: r.fpsSeed,
            fps_start: res.start,
            grid_rows: res.gridRows,
            grid_cols: res.gridCols,
            idw_k: Math.min(r.idwK, r.nGroups),
            idw_power: r.idwPower,
            centers: res.centers,
            embeddings: res.embeddings.map((e) => Array.from(e)),
          });
        }
      }
      const checksum = fileSha256(outPath);
      writeJsonAtomic(join(outDir, `${ref.id}.json`), {
        id: ref.id,
        modality: r.modality,
        rows: r.rows,
        cols: r.cols,
        dim: r.dim,
        source: r.backbone,
        checksum,
      });
      entry.path = relative(r.out, outPath);
      entry.sha256 = checksum;
      if (planes[ref.key] !== undefined) {
        entry.plane = planes[ref.key];
      }
      sampleEntries[ref.key] = entry;
      exported.push(ref.key);
      r.log(`exported ${ref.key}`);
    } catch (err) {
      failures.push({ sample: ref.key, error: (err as Error).message });
      r.log(`failed ${ref.key}: ${(err as Error).message}`);
    }
  }

  const model: Record<string, unknown> = {
    name: r.backbone,
    weights_sha256: rgbBackbone ? rgbBackbone.weightsSha256 : pcBackbone!.weightsSha256,
    seed: r.seed,
  };
  if (r.modality === "rgb") {
    model.input_size = r.inputSize;
    model.patch_size = r.patchSize;
  }
  const preprocessing: Record<string, unknown> = {
    source_root: r.root,
    plane_source: Object.keys(planes).length > 0 ? "preprocess_manifest.json" : null,
  };
  if (r.modality === "pc") {
    preprocessing.fps_seed = r.fpsSeed;
    preprocessing.n_groups = r.nGroups;
    preprocessing.group_size = r.groupSize;
    preprocessing.idw_k = r.idwK;
    preprocessing.idw_power = r.idwPower;
  }

  mkdirSync(r.out, { recursive: true });
  const manifestPath = join(r.out, `export_manifest_${r.modality}.json`);
  writeJsonAtomic(manifestPath, {
    modality: r.modality,
    model,
    grid: { rows: r.rows, cols: r.cols, dim: r.dim },
    preprocessing,
    samples: sampleEntries,
    failures,
  });
  return { manifestPath, exported, failures };
}
