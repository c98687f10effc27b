"""Stage orchestration: everything the CLI runs lives here as functions.

Every stage writes a manifest of config, seeds, and input checksums (never
timestamps), so rerunning a stage with the same inputs produces byte-identical
artifacts.
"""

import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from functools import partial
from pathlib import Path

import numpy as np

from . import bank as bank_mod
from . import distill, extractor, io, metrics, preprocess, score
from .errors import ConfigError, DataError, NoPlaneError

RESULT_DIRNAME = "samples"


def _config_dict(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _train_samples(root, classes):
    data = io.load_dataset(root, classes)
    samples = []
    for cls in sorted(data):
        samples.extend(data[cls]["train"])
    if not samples:
        raise DataError(f"no training samples under {root} for classes {classes}")
    return samples


def _test_samples(root, classes):
    data = io.load_dataset(root, classes)
    samples = []
    for cls in sorted(data):
        samples.extend(data[cls]["test"])
    if not samples:
        raise DataError(f"no test samples under {root} for classes {classes}")
    return samples


def _feature_checksums(root, classes):
    root = Path(root)
    sums = {}
    for cls in classes or sorted(p.name for p in root.iterdir() if p.is_dir()):
        for path in sorted((root / cls).rglob("*.cmft")):
            sums[str(path.relative_to(root))] = io.file_sha256(path)
    return sums


# ---------------------------------------------------------------------------
# synth


def stage_synth(root, class_name, synth_cfg):
    manifest = io.save_synthetic_dataset(root, class_name, synth_cfg)
    return {"manifest": str(manifest), "class": class_name}


# ---------------------------------------------------------------------------
# preprocess


def stage_preprocess(in_root, out_root, classes=None, ransac=None, threshold=None):
    """Fit and remove each scene's background plane; idempotent via manifest.

    Returns a summary with processed/skipped/failed sample keys. Samples that
    fail (no plane, unreadable data) are recorded and skipped; the rest of the
    tree still processes.
    """
    ransac = ransac or preprocess.RansacConfig()
    threshold = ransac.threshold if threshold is None else threshold
    in_root, out_root = Path(in_root), Path(out_root)
    if not in_root.is_dir():
        raise DataError(f"input root {in_root} does not exist")
    manifest_path = out_root / "preprocess_manifest.json"
    manifest = io.read_json(manifest_path) if manifest_path.is_file() else {}
    entries = manifest.get("samples", {})

    if classes is None:
        classes = sorted(p.name for p in in_root.iterdir() if p.is_dir())
    processed, skipped, failed = [], [], []
    for cls in classes:
        for split in io.SPLITS:
            sdir = in_root / cls / split
            if not sdir.is_dir():
                continue
            for ddir in sorted(p for p in sdir.iterdir() if p.is_dir()):
                xyz_dir = ddir / "xyz"
                if not xyz_dir.is_dir():
                    continue
                for xyz_path in sorted(xyz_dir.glob("*.tiff")):
                    sid = xyz_path.stem
                    key = f"{cls}/{split}/{ddir.name}/{sid}"
                    out_ddir = out_root / cls / split / ddir.name
                    rgb_path = ddir / "rgb" / f"{sid}.png"
                    in_sums = {"xyz": io.file_sha256(xyz_path)}
                    if rgb_path.is_file():
                        in_sums["rgb"] = io.file_sha256(rgb_path)
                    entry = entries.get(key)
                    if entry and entry.get("inputs") == in_sums and _outputs_intact(
                        out_ddir, sid, entry
                    ):
                        skipped.append(key)
                        continue
                    try:
                        entry = _preprocess_one(
                            ddir, out_ddir, sid, ransac, threshold, in_sums
                        )
                    except (DataError, NoPlaneError, ValueError) as exc:
                        failed.append({"sample": key, "error": str(exc)})
                        continue
                    entries[key] = entry
                    processed.append(key)

    out_root.mkdir(parents=True, exist_ok=True)
    io.write_json(
        manifest_path,
        {"ransac": _config_dict(ransac), "threshold": threshold, "samples": entries},
    )
    return {
        "manifest": str(manifest_path),
        "processed": processed,
        "skipped": skipped,
        "failed": failed,
    }


def _outputs_intact(out_ddir, sid, entry):
    for rel, sha in entry.get("outputs", {}).items():
        path = out_ddir / rel
        if not path.is_file() or io.file_sha256(path) != sha:
            return False
    return True


def _preprocess_one(ddir, out_ddir, sid, ransac, threshold, in_sums):
    cloud = preprocess.read_xyz_tiff(ddir / "xyz" / f"{sid}.tiff")
    rgb_path = ddir / "rgb" / f"{sid}.png"
    image = preprocess.read_rgb_png(rgb_path) if rgb_path.is_file() else None
    plane = preprocess.fit_background_plane(cloud, ransac)
    new_cloud, new_image = preprocess.remove_background(cloud, image, plane, threshold)

    (out_ddir / "xyz").mkdir(parents=True, exist_ok=True)
    preprocess.write_xyz_tiff(out_ddir / "xyz" / f"{sid}.tiff", new_cloud)
    outputs = {f"xyz/{sid}.tiff": io.file_sha256(out_ddir / "xyz" / f"{sid}.tiff")}
    if new_image is not None:
        (out_ddir / "rgb").mkdir(parents=True, exist_ok=True)
        preprocess.write_rgb_png(out_ddir / "rgb" / f"{sid}.png", new_image)
        outputs[f"rgb/{sid}.png"] = io.file_sha256(out_ddir / "rgb" / f"{sid}.png")
    gt_path = ddir / "gt" / f"{sid}.png"
    if gt_path.is_file():
        (out_ddir / "gt").mkdir(parents=True, exist_ok=True)
        shutil.copyfile(gt_path, out_ddir / "gt" / f"{sid}.png")
        outputs[f"gt/{sid}.png"] = io.file_sha256(out_ddir / "gt" / f"{sid}.png")
    return {
        "inputs": in_sums,
        "plane": {"normal": list(plane.normal), "offset": plane.offset},
        "outputs": outputs,
    }


# ---------------------------------------------------------------------------
# distill


def stage_distill(root, classes, route, main, train_cfg, out_dir):
    samples = _train_samples(root, classes)
    checkpoints = distill.train_distiller(route, main, samples, train_cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cp in checkpoints:
        cdir = out / f"checkpoint_ep{cp.epoch:04d}"
        distill.save_checkpoint(cdir, cp, train_cfg)
        rows.append({"epoch": cp.epoch, "loss": cp.loss, "dir": cdir.name})
    io.write_json(
        out / "manifest.json",
        {
            "route": route,
            "main": main,
            "classes": sorted({s.class_name for s in samples}),
            "train_config": _config_dict(train_cfg),
            "checkpoints": rows,
            "inputs": _feature_checksums(root, classes),
        },
    )
    return {"manifest": str(out / "manifest.json"), "checkpoints": rows}


# ---------------------------------------------------------------------------
# bank


def build_patchsets(root, classes, modalities=("pc", "rgb")):
    samples = _train_samples(root, classes)
    sets = {}
    for modality in modalities:
        maps, ids = [], []
        for s in samples:
            fmap = s.pc_features if modality == "pc" else s.rgb_features
            if fmap is None:
                raise DataError(f"sample {s.sample_id} has no {modality} features")
            maps.append(fmap)
            ids.append(s.sample_id)
        sets[modality] = bank_mod.collect_patches(maps, ids)
    return sets


def banks_from_patchsets(
    patchsets, out_dir, fraction, metric="l2", seed=0,
    projection_dim=None, projection_density=None, source=None,
):
    out = Path(out_dir)
    built = {}
    for modality, pset in patchsets.items():
        projection = None
        if projection_dim is not None:
            projection = bank_mod.make_projection(
                pset.patches.shape[1], projection_dim, projection_density, seed
            )
        bank = bank_mod.build_bank(
            pset, fraction, metric, projection, seed, modality, source
        )
        bank_mod.save_bank(out / modality, bank)
        built[modality] = bank
    return built


def stage_bank(
    root, classes, out_dir, fraction=0.1, metric="l2", seed=0,
    modalities=("pc", "rgb"), projection_dim=None, projection_density=None,
):
    patchsets = build_patchsets(root, classes, modalities)
    source = {"root_checksums": _feature_checksums(root, classes)}
    banks = banks_from_patchsets(
        patchsets, out_dir, fraction, metric, seed,
        projection_dim, projection_density, source,
    )
    io.write_json(
        Path(out_dir) / "manifest.json",
        {
            "modalities": sorted(banks),
            "fraction": fraction,
            "metric": metric,
            "seed": seed,
            "projection_dim": projection_dim,
            "projection_density": projection_density,
            "rows": {m: int(b.rows.shape[0]) for m, b in banks.items()},
        },
    )
    return {"manifest": str(Path(out_dir) / "manifest.json")}


# ---------------------------------------------------------------------------
# infer


def _specs_from(options):
    options = options or {}
    kind = options.get("extractor_kind", "synthetic")
    feature_root = options.get("feature_root")
    rgb_spec = extractor.ExtractorSpec(
        "rgb", kind,
        options.get("feat_rows", 56), options.get("feat_cols", 56),
        options.get("feat_dim", 768), options.get("extractor_seed", 0),
        feature_root,
    )
    pc_spec = extractor.ExtractorSpec(
        "pc", kind,
        options.get("feat_rows", 56), options.get("feat_cols", 56),
        options.get("feat_dim", 768), options.get("extractor_seed", 0),
        feature_root,
    )
    grouping = extractor.GroupingConfig(
        options.get("n_groups", 1024), options.get("group_size", 128),
        options.get("idw_k", 4), options.get("idw_power", 2.0),
        options.get("extractor_seed", 0),
    )
    return rgb_spec, pc_spec, grouping


def fit_fusion_for_mode(
    mode, train, banks, net=None, rgb_spec=None, pc_spec=None, grouping=None,
    nu=0.5, lr=1e-4, steps=1000, seed=0, upsample=4, sigma=4.0,
):
    """Calibrate fusion on training samples the way inference will see them:
    hallucinated mode scores the missing modality from hallucinated features."""
    psi = {"pc": [], "rgb": []}
    pixel_rows = []
    for sample in train:
        maps = {}
        for modality in ("pc", "rgb"):
            if mode.kind == "hallucinated" and modality != mode.modality:
                main_feats = score.resolve_features(
                    sample, mode.modality, rgb_spec, pc_spec, grouping
                )
                if mode.route == "i2f":
                    raw = sample.pc if mode.modality == "pc" else sample.rgb
                    if raw is None:
                        raise DataError(
                            f"sample {sample.sample_id} has no raw {mode.modality} data"
                        )
                    feats = distill.hallucinate(net, raw, rgb_spec, pc_spec, grouping)
                else:
                    feats = distill.hallucinate(
                        net, main_feats, rgb_spec, pc_spec, grouping
                    )
            else:
                feats = score.resolve_features(
                    sample, modality, rgb_spec, pc_spec, grouping
                )
            cells, _ = score.score_cells(feats, banks[modality])
            maps[modality] = score.postprocess_map(cells, upsample, sigma)
            psi[modality].append(float(cells.max()))
        pixel_rows.append(
            np.stack([maps["pc"].reshape(-1), maps["rgb"].reshape(-1)], axis=1)
        )
    return score.fit_fusion(
        psi["pc"], psi["rgb"], np.concatenate(pixel_rows),
        nu=nu, lr=lr, steps=steps, seed=seed,
    )


def _infer_one(sample, mode, banks, fusion, net, rgb_spec, pc_spec, grouping,
               upsample, sigma):
    return score.infer(
        sample, mode, banks, fusion, net, rgb_spec, pc_spec, grouping,
        upsample, sigma,
    )


def stage_infer(
    root, classes, banks_dir, out_dir, mode,
    checkpoint=None, fusion_params=None, upsample=4, sigma=4.0,
    workers=1, render=False, extractor_options=None,
):
    """Score every test sample; writes one JSON + one map tensor per sample.

    Per-sample failures are recorded in the manifest and reported in the
    summary; healthy samples still complete.
    """
    banks_dir = Path(banks_dir)
    needed = [mode.modality] if mode.kind == "single" else ["pc", "rgb"]
    banks = {}
    for modality in needed:
        bdir = banks_dir / modality
        if not (bdir / "manifest.json").is_file():
            raise ConfigError(f"no {modality} bank under {banks_dir}")
        banks[modality] = bank_mod.load_bank(bdir)

    net = None
    if mode.kind == "hallucinated":
        if checkpoint is None:
            raise ConfigError("hallucinated mode needs a checkpoint")
        net = distill.load_checkpoint(checkpoint).net

    rgb_spec, pc_spec, grouping = _specs_from(extractor_options)
    fusion = None
    fusion_info = None
    if mode.kind != "single":
        params = fusion_params or {}
        train = _train_samples(root, classes)
        fusion = fit_fusion_for_mode(
            mode, train, banks, net, rgb_spec, pc_spec, grouping,
            nu=params.get("nu", 0.5), lr=params.get("lr", 1e-4),
            steps=params.get("steps", 1000), seed=params.get("seed", 0),
            upsample=upsample, sigma=sigma,
        )
        fusion_info = {
            "scale_pc": fusion.scale_pc,
            "scale_rgb": fusion.scale_rgb,
            "image_w": [float(v) for v in fusion.image_w],
            "image_rho": fusion.image_rho,
            "pixel_w": [float(v) for v in fusion.pixel_w],
            "pixel_rho": fusion.pixel_rho,
        }

    test = _test_samples(root, classes)
    out = Path(out_dir)
    sample_dir = out / RESULT_DIRNAME
    sample_dir.mkdir(parents=True, exist_ok=True)

    task = partial(
        _infer_one, mode=mode, banks=banks, fusion=fusion, net=net,
        rgb_spec=rgb_spec, pc_spec=pc_spec, grouping=grouping,
        upsample=upsample, sigma=sigma,
    )
    failures = []
    records = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_safe_task, [(task, s) for s in test]))
    else:
        outcomes = [_safe_task((task, s)) for s in test]
    for sample, outcome in zip(test, outcomes):
        if isinstance(outcome, str):
            failures.append({"sample": sample.sample_id, "error": outcome})
            continue
        records.append(_write_result(sample_dir, sample, outcome, render))

    io.write_json(
        out / "manifest.json",
        {
            "mode": mode.describe(),
            "classes": sorted({s.class_name for s in test}),
            "banks": {m: io.file_sha256(banks_dir / m / "bank.cmft") for m in needed},
            "checkpoint": str(checkpoint) if checkpoint else None,
            "fusion": fusion_info,
            "upsample": upsample,
            "sigma": sigma,
            "samples": [r["id"] for r in records],
            "failures": failures,
        },
    )
    return {
        "out": str(out),
        "results": records,
        "failures": failures,
    }


def _safe_task(pair):
    task, sample = pair
    try:
        return task(sample)
    except (DataError, ConfigError, ValueError) as exc:
        return f"{type(exc).__name__}: {exc}"


def _write_result(sample_dir, sample, result, render):
    map_name = f"{sample.sample_id}_map.cmft"
    io.write_feature_tensor(
        io.FeatureMap(result.pixel_map[:, :, None].astype(np.float32)),
        sample_dir / map_name,
    )
    record = {
        "id": sample.sample_id,
        "class": sample.class_name,
        "defect": sample.defect,
        "label": sample.label,
        "mode": result.mode,
        "image_score": result.image_score,
        "modality_scores": result.modality_scores,
        "cell": list(result.cell),
        "bank_index": result.bank_index,
        "map_file": map_name,
    }
    io.write_json(sample_dir / f"{sample.sample_id}.json", record)
    if render:
        lo, hi = result.pixel_map.min(), result.pixel_map.max()
        span = hi - lo if hi > lo else 1.0
        gray = np.round((result.pixel_map - lo) / span * 255.0).astype(np.uint8)
        import cv2

        cv2.imwrite(str(sample_dir / f"{sample.sample_id}_map.png"), gray)
    return record


# ---------------------------------------------------------------------------
# eval


def stage_eval(results_dir, root, classes=None, out_path=None, fpr_limit=0.3):
    """Compute image AUROC, pixel AUROC, and region-overlap area from a
    results directory, overall and per class."""
    sample_dir = Path(results_dir) / RESULT_DIRNAME
    if not sample_dir.is_dir():
        raise DataError(f"no results under {results_dir}")
    data = io.load_dataset(root, classes, load_raw=False)
    masks_by_id = {}
    for cls, splits in data.items():
        for s in splits["test"]:
            masks_by_id[(cls, s.sample_id)] = s.gt_mask

    rows = []
    for path in sorted(sample_dir.glob("*.json")):
        record = io.read_json(path)
        fmap = io.read_feature_tensor(sample_dir / record["map_file"])
        record["_map"] = fmap.data[:, :, 0].astype(np.float64)
        rows.append(record)
    if not rows:
        raise DataError(f"no per-sample records under {sample_dir}")

    def bundle(subset):
        scores = [r["image_score"] for r in subset]
        labels = [1 if r["label"] == "anomalous" else 0 for r in subset]
        maps, masks = [], []
        for r in subset:
            mask = masks_by_id.get((r["class"], r["id"]))
            if mask is None:
                if r["label"] == "anomalous":
                    raise DataError(f"no ground-truth mask for {r['id']}")
                mask = np.zeros(r["_map"].shape, dtype=np.uint8)
            if mask.shape != r["_map"].shape:
                raise DataError(
                    f"mask shape {mask.shape} != map shape {r['_map'].shape} "
                    f"for {r['id']}"
                )
            maps.append(r["_map"])
            masks.append(mask)
        try:
            return metrics.summarize(scores, labels, maps, masks, fpr_limit)
        except ValueError as exc:
            # Degenerate label sets (all-normal or all-anomalous pixels or
            # images) are a property of the supplied data, not a crash.
            raise DataError(str(exc)) from exc

    report = {"overall": bundle(rows), "per_class": {}, "mode": rows[0]["mode"]}
    for cls in sorted({r["class"] for r in rows}):
        report["per_class"][cls] = bundle([r for r in rows if r["class"] == cls])
    if out_path is not None:
        io.write_json(out_path, report)
    return report


# ---------------------------------------------------------------------------
# sweep and metric ablation


def stage_sweep(
    root, classes, checkpoints_dir, out_dir, mode,
    fraction=0.1, metric="l2", seed=0, fusion_params=None,
    upsample=4, sigma=4.0, fpr_limit=0.3, extractor_options=None,
):
    """Evaluate every checkpoint of a distillation run; pure function of
    (checkpoints, data, seeds). Picks the best image AUROC, earliest epoch
    on ties."""
    cdir = Path(checkpoints_dir)
    manifest = io.read_json(cdir / "manifest.json")
    if mode.kind != "hallucinated":
        raise ConfigError("sweep evaluates hallucinated-mode checkpoints")
    rows = []
    out = Path(out_dir)
    for entry in manifest["checkpoints"]:
        row_dir = out / "rows" / f"ep{entry['epoch']:04d}"
        stage_bank(root, classes, row_dir / "banks", fraction, metric, seed)
        stage_infer(
            root, classes, row_dir / "banks", row_dir / "results", mode,
            checkpoint=cdir / entry["dir"], fusion_params=fusion_params,
            upsample=upsample, sigma=sigma, extractor_options=extractor_options,
        )
        report = stage_eval(
            row_dir / "results", root, classes,
            row_dir / "report.json", fpr_limit,
        )
        rows.append(
            {
                "epoch": entry["epoch"],
                "train_loss": entry["loss"],
                **report["overall"],
            }
        )
    best = max(rows, key=lambda r: (r["image_auroc"], -r["epoch"]))
    sweep_report = {"rows": rows, "best_epoch": best["epoch"], "best": best}
    io.write_json(out / "sweep.json", sweep_report)
    return sweep_report


ABLATION_METRICS = ("l2", "l1", "cosine")


def stage_ablate_metric(
    root, classes, out_dir, mode, fraction=0.1, seed=0,
    checkpoint=None, fusion_params=None, upsample=4, sigma=4.0,
    fpr_limit=0.3, extractor_options=None,
):
    """Rebuild banks and evaluate under each distance metric; all three rows
    share the identical source patch sets."""
    out = Path(out_dir)
    needed = ("pc", "rgb") if mode.kind != "single" else (mode.modality,)
    patchsets = build_patchsets(root, classes, needed)
    rows = []
    for metric in ABLATION_METRICS:
        row_dir = out / "rows" / metric
        banks_from_patchsets(patchsets, row_dir / "banks", fraction, metric, seed)
        stage_infer(
            root, classes, row_dir / "banks", row_dir / "results", mode,
            checkpoint=checkpoint, fusion_params=fusion_params,
            upsample=upsample, sigma=sigma, extractor_options=extractor_options,
        )
        report = stage_eval(
            row_dir / "results", root, classes, row_dir / "report.json", fpr_limit
        )
        rows.append({"metric": metric, **report["overall"]})
    ablation = {"rows": rows}
    io.write_json(out / "ablation.json", ablation)
    return ablation
