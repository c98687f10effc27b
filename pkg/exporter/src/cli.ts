#!/usr/bin/env node
/**
 * export --modality rgb|pc --root <path> --out <path> [--classes a,b] ...
 *
 * Exit codes: 0 success, 1 usage or configuration error, 2 data error,
 * 3 per-sample failures (the rest of the tree still exported).
 */

import { parseArgs } from "node:util";
import { ExportDataError, runExport, type ExportOptions } from "./export.js";

const USAGE = `usage: xmad-export [export] --modality rgb|pc --root <path> --out <path>
                   [--classes a,b] [--backbone reference] [--seed N]
                   [--rows 56] [--cols 56] [--dim 768]
                   [--input-size 224] [--patch-size 16]
                   [--fps-seed 0] [--n-groups 1024] [--group-size 128]
                   [--idw-k 4] [--idw-power 2.0] [--dump-groups] [--quiet]

Reads a preprocessed dataset tree (rgb/<id>.png, xyz/<id>.tiff) and writes
feat/<modality>/<id>.cmft feature tensors plus an export manifest.`;

function intFlag(raw: string | undefined, label: string): number | undefined {
  if (raw === undefined) return undefined;
  const v = Number(raw);
  if (!Number.isInteger(v)) {
    throw new Error(`--${label} wants an integer, got ${JSON.stringify(raw)}`);
  }
  return v;
}

function floatFlag(raw: string | undefined, label: string): number | undefined {
  if (raw === undefined) return undefined;
  const v = Number(raw);
  if (!Number.isFinite(v)) {
    throw new Error(`--${label} wants a number, got ${JSON.stringify(raw)}`);
  }
  return v;
}

export function main(argv: string[]): number {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      allowPositionals: true,
      options: {
        modality: { type: "string" },
        root: { type: "string" },
        out: { type: "string" },
        classes: { type: "string" },
        backbone: { type: "string" },
        seed: { type: "string" },
        rows: { type: "string" },
        cols: { type: "string" },
        dim: { type: "string" },
        "input-size": { type: "string" },
        "patch-size": { type: "string" },
        "fps-seed": { type: "string" },
        "n-groups": { type: "string" },
        "group-size": { type: "string" },
        "idw-k": { type: "string" },
        "idw-power": { type: "string" },
        "dump-groups": { type: "boolean" },
        quiet: { type: "boolean" },
        help: { type: "boolean", short: "h" },
      },
    });
  } catch (err) {
    console.error(`usage error: ${(err as Error).message}`);
    console.error(USAGE);
    return 1;
  }
  const { values, positionals } = parsed;
  if (values.help) {
    console.log(USAGE);
    return 0;
  }
  // tolerate the subcommand-style spelling "xmad-export export ..."
  const extras = positionals.filter((p) => p !== "export");
  if (extras.length > 0) {
    console.error(`usage error: unexpected argument ${JSON.stringify(extras[0])}`);
    return 1;
  }

  try {
    const modality = values.modality;
    if (modality !== "rgb" && modality !== "pc") {
      throw new Error(`--modality must be rgb or pc, got ${JSON.stringify(modality ?? "")}`);
    }
    if (!values.root) {
      throw new Error("--root is required");
    }
    if (!values.out) {
      throw new Error("--out is required");
    }
    const opts: ExportOptions = {
      modality,
      root: values.root,
      out: values.out,
      classes: values.classes ? values.classes.split(",").filter((c) => c) : undefined,
      backbone: values.backbone,
      seed: intFlag(values.seed, "seed"),
      rows: intFlag(values.rows, "rows"),
      cols: intFlag(values.cols, "cols"),
      dim: intFlag(values.dim, "dim"),
      inputSize: intFlag(values["input-size"], "input-size"),
      patchSize: intFlag(values["patch-size"], "patch-size"),
      fpsSeed: intFlag(values["fps-seed"], "fps-seed"),
      nGroups: intFlag(values["n-groups"], "n-groups"),
      groupSize: intFlag(values["group-size"], "group-size"),
      idwK: intFlag(values["idw-k"], "idw-k"),
      idwPower: floatFlag(values["idw-power"], "idw-power"),
      dumpGroups: values["dump-groups"],
      log: values.quiet ? () => {} : (line) => console.log(line),
    };
    const summary = runExport(opts);
    console.log(
      `exported ${summary.exported.length} samples, ${summary.failures.length} failures -> ${summary.manifestPath}`,
    );
    for (const failure of summary.failures) {
      console.error(`  ${failure.sample}: ${failure.error}`);
    }
    return summary.failures.length > 0 ? 3 : 0;
  } catch (err) {
    if (err instanceof ExportDataError) {
      console.error(`data error: ${(err as Error).message}`);
      return 2;
    }
    console.error(`configuration error: ${(err as Error).message}`);
    return 1;
  }
}

const isDirectRun =
  process.argv[1] !== undefined && import.meta.url.endsWith(process.argv[1].split("/").pop()!);
if (isDirectRun) {
  process.exit(main(process.argv.slice(2)));
}
