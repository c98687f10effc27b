"""Command-line front end.

Options resolve in three layers: built-in defaults, then a JSON config file
(--config, flat keys matching the long option names with underscores), then
explicit flags. The dataset root may also come from the XMAD_DATA_ROOT
environment variable.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 partial per-sample failures.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import distill, io, pipeline, preprocess, score
from .errors import ConfigError, DataError

ENV_ROOT = "XMAD_DATA_ROOT"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _csv(value):
    return [v for v in value.split(",") if v]


def _int_csv(value):
    return tuple(int(v) for v in value.split(",") if v)


DEFAULTS = {
    "synth": {
        "class_name": "synthetic",
        "n_train": 40, "n_test_normal": 25, "n_test_anomalous": 25,
        "grid": 16, "dim": 24, "coupling": 0.9, "anomaly_strength": 3.0,
        "seed": 0,
    },
    "preprocess": {
        "classes": None, "iterations": 1000, "ransac_threshold": 0.005,
        "min_inlier_fraction": 0.3, "ransac_seed": 0, "remove_threshold": None,
    },
    "distill": {
        "classes": None, "route": "f2f", "main": "pc", "epochs": 100,
        "batch_size": 32, "learning_rate": None, "warmup_epochs": 10,
        "checkpoint_every": 10, "hidden": None, "seed": 0,
    },
    "bank": {
        "classes": None, "fraction": 0.1, "metric": "l2", "seed": 0,
        "modalities": ["pc", "rgb"], "projection_dim": None,
        "projection_density": None,
    },
    "infer": {
        "classes": None, "mode": "single", "modality": "pc", "route": None,
        "checkpoint": None, "upsample": 4, "sigma": 4.0, "workers": 1,
        "render": False, "nu": 0.5, "fusion_lr": 1e-4, "fusion_steps": 1000,
        "fusion_seed": 0, "extractor_kind": "synthetic", "feature_root": None,
        "feat_rows": 56, "feat_cols": 56, "feat_dim": 768, "extractor_seed": 0,
        "n_groups": 1024, "group_size": 128, "idw_k": 4, "idw_power": 2.0,
    },
    "eval": {"classes": None, "out": None, "fpr_limit": 0.3},
    "sweep": {
        "classes": None, "modality": "pc", "route": "f2f", "fraction": 0.1,
        "metric": "l2", "seed": 0, "upsample": 4, "sigma": 4.0,
        "fpr_limit": 0.3, "nu": 0.5, "fusion_lr": 1e-4, "fusion_steps": 1000,
        "fusion_seed": 0,
    },
    "ablate-metric": {
        "classes": None, "mode": "single", "modality": "pc", "route": None,
        "checkpoint": None, "fraction": 0.1, "seed": 0, "upsample": 4,
        "sigma": 4.0, "fpr_limit": 0.3, "nu": 0.5, "fusion_lr": 1e-4,
        "fusion_steps": 1000, "fusion_seed": 0,
    },
}


def _build_parser():
    parser = _Parser(prog="xmad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, needs_root=True, **extra):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (flags override it)")
        if needs_root:
            p.add_argument("--root", help=f"dataset root (or ${ENV_ROOT})")
        return p

    p = add("synth")
    p.add_argument("--class-name")
    for flag in ("--n-train", "--n-test-normal", "--n-test-anomalous",
                 "--grid", "--dim", "--seed"):
        p.add_argument(flag, type=int)
    p.add_argument("--coupling", type=float)
    p.add_argument("--anomaly-strength", type=float)

    p = add("preprocess")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_csv)
    p.add_argument("--iterations", type=int)
    p.add_argument("--ransac-threshold", type=float)
    p.add_argument("--min-inlier-fraction", type=float)
    p.add_argument("--ransac-seed", type=int)
    p.add_argument("--remove-threshold", type=float)

    p = add("distill")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_csv)
    p.add_argument("--route", choices=distill.ROUTES)
    p.add_argument("--main", choices=("pc", "rgb"))
    for flag in ("--epochs", "--batch-size", "--warmup-epochs",
                 "--checkpoint-every", "--seed"):
        p.add_argument(flag, type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--hidden", type=_int_csv, help="comma widths, e.g. 64,64")

    p = add("bank")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_csv)
    p.add_argument("--fraction", type=float)
    p.add_argument("--metric", choices=("l2", "l1", "cosine"))
    p.add_argument("--seed", type=int)
    p.add_argument("--modalities", type=_csv)
    p.add_argument("--projection-dim", type=int)
    p.add_argument("--projection-density", type=float)

    p = add("infer")
    p.add_argument("--banks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_csv)
    p.add_argument("--mode", choices=("single", "dual", "hallucinated"))
    p.add_argument("--modality", choices=("pc", "rgb"))
    p.add_argument("--route", choices=distill.ROUTES)
    p.add_argument("--checkpoint")
    p.add_argument("--upsample", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--render", action="store_const", const=True)
    for flag in ("--nu", "--fusion-lr", "--idw-power"):
        p.add_argument(flag, type=float)
    for flag in ("--fusion-steps", "--fusion-seed", "--feat-rows", "--feat-cols",
                 "--feat-dim", "--extractor-seed", "--n-groups", "--group-size",
                 "--idw-k"):
        p.add_argument(flag, type=int)
    p.add_argument("--extractor-kind", choices=("synthetic", "precomputed"))
    p.add_argument("--feature-root")

    p = add("eval")
    p.add_argument("--results", required=True)
    p.add_argument("--classes", type=_csv)
    p.add_argument("--out")
    p.add_argument("--fpr-limit", type=float)

    p = add("sweep")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_csv)
    p.add_argument("--modality", choices=("pc", "rgb"))
    p.add_argument("--route", choices=distill.ROUTES)
    p.add_argument("--fraction", type=float)
    p.add_argument("--metric", choices=("l2", "l1", "cosine"))
    p.add_argument("--seed", type=int)
    p.add_argument("--upsample", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--fpr-limit", type=float)
    for flag, typ in (("--nu", float), ("--fusion-lr", float),
                      ("--fusion-steps", int), ("--fusion-seed", int)):
        p.add_argument(flag, type=typ)

    p = add("ablate-metric")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_csv)
    p.add_argument("--mode", choices=("single", "dual", "hallucinated"))
    p.add_argument("--modality", choices=("pc", "rgb"))
    p.add_argument("--route", choices=distill.ROUTES)
    p.add_argument("--checkpoint")
    p.add_argument("--fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--upsample", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--fpr-limit", type=float)
    for flag, typ in (("--nu", float), ("--fusion-lr", float),
                      ("--fusion-steps", int), ("--fusion-seed", int)):
        p.add_argument(flag, type=typ)

    return parser


def _merge_options(command, args):
    merged = dict(DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {config_path} does not exist")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - set(merged) - {"root", "out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None:
            merged[key] = value
    return merged


def _resolve_root(opts):
    root = opts.get("root") or os.environ.get(ENV_ROOT)
    if not root:
        raise ConfigError(f"no dataset root: pass --root or set ${ENV_ROOT}")
    return root


def _mode_from(opts):
    return score.InferenceMode(
        opts["mode"], opts.get("modality", "pc"), opts.get("route")
    )


def _fusion_params(opts):
    return {
        "nu": opts["nu"], "lr": opts["fusion_lr"],
        "steps": opts["fusion_steps"], "seed": opts["fusion_seed"],
    }


def _extractor_options(opts):
    keys = ("extractor_kind", "feature_root", "feat_rows", "feat_cols", "feat_dim",
            "extractor_seed", "n_groups", "group_size", "idw_k", "idw_power")
    return {k: opts[k] for k in keys if k in opts}


def _run(command, opts):
    if command == "synth":
        cfg = io.SynthConfig(
            n_train=opts["n_train"], n_test_normal=opts["n_test_normal"],
            n_test_anomalous=opts["n_test_anomalous"], grid=opts["grid"],
            dim=opts["dim"], coupling=opts["coupling"],
            anomaly_strength=opts["anomaly_strength"], seed=opts["seed"],
        )
        summary = pipeline.stage_synth(_resolve_root(opts), opts["class_name"], cfg)
        print(f"wrote {summary['manifest']}")
        return 0

    if command == "preprocess":
        ransac = preprocess.RansacConfig(
            iterations=opts["iterations"], threshold=opts["ransac_threshold"],
            min_inlier_fraction=opts["min_inlier_fraction"], seed=opts["ransac_seed"],
        )
        summary = pipeline.stage_preprocess(
            _resolve_root(opts), opts["out"], opts["classes"],
            ransac, opts["remove_threshold"],
        )
        print(
            f"processed {len(summary['processed'])}, skipped "
            f"{len(summary['skipped'])}, failed {len(summary['failed'])}"
        )
        for failure in summary["failed"]:
            print(f"  {failure['sample']}: {failure['error']}", file=sys.stderr)
        return 3 if summary["failed"] else 0

    if command == "distill":
        cfg = distill.TrainConfig(
            epochs=opts["epochs"], batch_size=opts["batch_size"],
            learning_rate=opts["learning_rate"], warmup_epochs=opts["warmup_epochs"],
            checkpoint_every=opts["checkpoint_every"],
            hidden=tuple(opts["hidden"]) if opts["hidden"] else None,
            seed=opts["seed"],
        )
        summary = pipeline.stage_distill(
            _resolve_root(opts), opts["classes"], opts["route"], opts["main"],
            cfg, opts["out"],
        )
        for row in summary["checkpoints"]:
            print(f"epoch {row['epoch']:4d}  loss {row['loss']:.6f}")
        return 0

    if command == "bank":
        pipeline.stage_bank(
            _resolve_root(opts), opts["classes"], opts["out"], opts["fraction"],
            opts["metric"], opts["seed"], tuple(opts["modalities"]),
            opts["projection_dim"], opts["projection_density"],
        )
        print(f"banks written to {opts['out']}")
        return 0

    if command == "infer":
        summary = pipeline.stage_infer(
            _resolve_root(opts), opts["classes"], opts["banks"], opts["out"],
            _mode_from(opts), opts["checkpoint"], _fusion_params(opts),
            opts["upsample"], opts["sigma"], opts["workers"], opts["render"],
            _extractor_options(opts),
        )
        print(f"scored {len(summary['results'])} samples -> {summary['out']}")
        for failure in summary["failures"]:
            print(f"  {failure['sample']}: {failure['error']}", file=sys.stderr)
        return 3 if summary["failures"] else 0

    if command == "eval":
        report = pipeline.stage_eval(
            opts["results"], _resolve_root(opts), opts["classes"],
            opts["out"], opts["fpr_limit"],
        )
        overall = report["overall"]
        print(
            f"image_auroc {overall['image_auroc']:.4f}  "
            f"pixel_auroc {overall['pixel_auroc']:.4f}  "
            f"aupro {overall['aupro']:.4f}"
        )
        return 0

    if command == "sweep":
        mode = score.InferenceMode("hallucinated", opts["modality"], opts["route"])
        report = pipeline.stage_sweep(
            _resolve_root(opts), opts["classes"], opts["checkpoints"], opts["out"],
            mode, opts["fraction"], opts["metric"], opts["seed"],
            _fusion_params(opts), opts["upsample"], opts["sigma"],
            opts["fpr_limit"],
        )
        for row in report["rows"]:
            print(
                f"epoch {row['epoch']:4d}  loss {row['train_loss']:.6f}  "
                f"image_auroc {row['image_auroc']:.4f}"
            )
        print(f"best epoch: {report['best_epoch']}")
        return 0

    if command == "ablate-metric":
        report = pipeline.stage_ablate_metric(
            _resolve_root(opts), opts["classes"], opts["out"], _mode_from(opts),
            opts["fraction"], opts["seed"], opts["checkpoint"],
            _fusion_params(opts), opts["upsample"], opts["sigma"],
            opts["fpr_limit"],
        )
        for row in report["rows"]:
            print(
                f"{row['metric']:>6}  image_auroc {row['image_auroc']:.4f}  "
                f"pixel_auroc {row['pixel_auroc']:.4f}  aupro {row['aupro']:.4f}"
            )
        return 0

    raise ConfigError(f"unknown command {command!r}")


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        opts = _merge_options(args.command, args)
        return _run(args.command, opts)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
