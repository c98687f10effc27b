import shutil

import numpy as np
import pytest
from pathlib import Path

from xmad import cli, io, pipeline, preprocess
from xmad.distill import TrainConfig
from xmad.errors import DataError
from xmad.io import RgbImage, StructuredPointCloud, SynthConfig
from xmad.score import InferenceMode

PIPE_SYNTH = SynthConfig(
    n_train=8,
    n_test_normal=4,
    n_test_anomalous=4,
    grid=8,
    dim=12,
    coupling=0.9,
    anomaly_strength=3.0,
    seed=5,
)


def tree_checksums(root):
    root = Path(root)
    return {
        str(p.relative_to(root)): io.file_sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe_data")
    pipeline.stage_synth(root, "widget", PIPE_SYNTH)
    return root


@pytest.fixture(scope="module")
def banks_dir(synth_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("banks")
    pipeline.stage_bank(synth_root, None, out, fraction=0.25, seed=0)
    return out


# ---------------------------------------------------------------------------
# synth / bank / infer / eval chain


def test_stage_synth_reruns_byte_identical(tmp_path):
    pipeline.stage_synth(tmp_path / "a", "widget", PIPE_SYNTH)
    pipeline.stage_synth(tmp_path / "b", "widget", PIPE_SYNTH)
    assert tree_checksums(tmp_path / "a") == tree_checksums(tmp_path / "b")


def test_stage_bank_writes_both_modalities(banks_dir):
    manifest = io.read_json(banks_dir / "manifest.json")
    assert manifest["modalities"] == ["pc", "rgb"]
    for modality in ("pc", "rgb"):
        assert (banks_dir / modality / "bank.cmft").is_file()
        assert (banks_dir / modality / "manifest.json").is_file()


def test_infer_eval_single_mode(synth_root, banks_dir, tmp_path):
    summary = pipeline.stage_infer(
        synth_root, None, banks_dir, tmp_path / "res",
        InferenceMode("single", "pc"),
    )
    assert not summary["failures"]
    assert len(summary["results"]) == 8
    manifest = io.read_json(tmp_path / "res" / "manifest.json")
    assert set(manifest) == {
        "mode", "classes", "banks", "checkpoint", "fusion",
        "upsample", "sigma", "samples", "failures",
    }
    for record in summary["results"]:
        sdir = tmp_path / "res" / pipeline.RESULT_DIRNAME
        assert (sdir / f"{record['id']}.json").is_file()
        assert (sdir / record["map_file"]).is_file()

    report = pipeline.stage_eval(tmp_path / "res", synth_root, out_path=tmp_path / "r.json")
    assert set(report["overall"]) == {"image_auroc", "pixel_auroc", "aupro"}
    assert report["per_class"].keys() == {"widget"}
    assert report["overall"]["image_auroc"] >= 0.8
    assert (tmp_path / "r.json").is_file()


def test_infer_rerun_bitwise_identical(synth_root, banks_dir, tmp_path):
    mode = InferenceMode("dual")
    pipeline.stage_infer(synth_root, None, banks_dir, tmp_path / "a", mode)
    pipeline.stage_infer(synth_root, None, banks_dir, tmp_path / "b", mode)
    assert tree_checksums(tmp_path / "a") == tree_checksums(tmp_path / "b")


def test_infer_workers_match_serial(synth_root, banks_dir, tmp_path):
    mode = InferenceMode("single", "rgb")
    pipeline.stage_infer(synth_root, None, banks_dir, tmp_path / "serial", mode)
    pipeline.stage_infer(
        synth_root, None, banks_dir, tmp_path / "par", mode, workers=2
    )
    assert tree_checksums(tmp_path / "serial") == tree_checksums(tmp_path / "par")


def test_infer_render_writes_png(synth_root, banks_dir, tmp_path):
    summary = pipeline.stage_infer(
        synth_root, None, banks_dir, tmp_path / "res",
        InferenceMode("single", "pc"), render=True,
    )
    sdir = tmp_path / "res" / pipeline.RESULT_DIRNAME
    first = summary["results"][0]["id"]
    assert (sdir / f"{first}_map.png").is_file()


def test_eval_missing_results_dir(synth_root, tmp_path):
    with pytest.raises(DataError, match="no results"):
        pipeline.stage_eval(tmp_path / "nothing", synth_root)


def test_eval_degenerate_pixel_labels_is_data_error(synth_root, banks_dir, tmp_path):
    root = tmp_path / "data"
    shutil.copytree(synth_root, root)
    for gt in root.rglob("gt/*.png"):
        mask = preprocess.read_mask_png(gt)
        preprocess.write_mask_png(gt, np.zeros_like(mask))
    pipeline.stage_infer(
        root, None, banks_dir, tmp_path / "res", InferenceMode("single", "pc")
    )
    with pytest.raises(DataError, match="positive and one negative"):
        pipeline.stage_eval(tmp_path / "res", root)


# ---------------------------------------------------------------------------
# distill + sweep + ablation


@pytest.fixture(scope="module")
def checkpoints_dir(synth_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpts")
    cfg = TrainConfig(
        epochs=4, batch_size=32, learning_rate=2e-3, warmup_epochs=1,
        checkpoint_every=2, hidden=(8,), seed=0,
    )
    pipeline.stage_distill(synth_root, None, "f2f", "pc", cfg, out)
    return out


def test_stage_distill_writes_checkpoints(checkpoints_dir):
    manifest = io.read_json(checkpoints_dir / "manifest.json")
    assert [c["epoch"] for c in manifest["checkpoints"]] == [2, 4]
    assert manifest["route"] == "f2f" and manifest["main"] == "pc"
    assert manifest["inputs"]  # feature checksums recorded
    for row in manifest["checkpoints"]:
        assert (checkpoints_dir / row["dir"] / "manifest.json").is_file()


def test_stage_sweep_best_row_rule(synth_root, checkpoints_dir, tmp_path):
    report = pipeline.stage_sweep(
        synth_root, None, checkpoints_dir, tmp_path / "sweep",
        InferenceMode("hallucinated", "pc", "f2f"), fraction=0.25,
    )
    assert len(report["rows"]) == 2
    best = max(report["rows"], key=lambda r: (r["image_auroc"], -r["epoch"]))
    assert report["best_epoch"] == best["epoch"]
    tied = {r["image_auroc"] for r in report["rows"]}
    if len(tied) == 1:  # ties resolve to the earliest epoch
        assert report["best_epoch"] == min(r["epoch"] for r in report["rows"])
    assert (tmp_path / "sweep" / "sweep.json").is_file()


def test_stage_ablate_metric_covers_all_metrics(synth_root, tmp_path):
    report = pipeline.stage_ablate_metric(
        synth_root, None, tmp_path / "abl", InferenceMode("single", "pc"),
        fraction=0.25,
    )
    assert [r["metric"] for r in report["rows"]] == ["l2", "l1", "cosine"]
    for row in report["rows"]:
        assert 0.0 <= row["image_auroc"] <= 1.0
    assert (tmp_path / "abl" / "ablation.json").is_file()


# ---------------------------------------------------------------------------
# preprocess stage


def write_plane_sample(ddir, sid, seed, bump=False, gt=False, noise=False):
    rng = np.random.default_rng(seed)
    gx, gy = np.meshgrid(
        np.linspace(0.0, 1.0, 24, dtype=np.float32),
        np.linspace(0.0, 1.0, 24, dtype=np.float32),
    )
    if noise:
        z = rng.uniform(0.0, 1.0, (24, 24)).astype(np.float32)
    else:
        z = rng.uniform(-0.001, 0.001, (24, 24)).astype(np.float32)
        if bump:
            z[8:14, 8:14] = 0.3
    coords = np.stack([gx, gy, z], axis=2)
    (ddir / "xyz").mkdir(parents=True, exist_ok=True)
    preprocess.write_xyz_tiff(ddir / "xyz" / f"{sid}.tiff", StructuredPointCloud(coords))
    pixels = (rng.integers(0, 256, (24, 24, 3)) / 255.0).astype(np.float32)
    (ddir / "rgb").mkdir(parents=True, exist_ok=True)
    preprocess.write_rgb_png(ddir / "rgb" / f"{sid}.png", RgbImage(pixels))
    if gt:
        mask = np.zeros((24, 24), dtype=np.uint8)
        mask[8:14, 8:14] = 1
        (ddir / "gt").mkdir(parents=True, exist_ok=True)
        preprocess.write_mask_png(ddir / "gt" / f"{sid}.png", mask)


def make_raw_tree(root, with_bad=False):
    write_plane_sample(root / "part" / "train" / "good", "000", 1)
    write_plane_sample(root / "part" / "train" / "good", "001", 2)
    write_plane_sample(root / "part" / "test" / "dent", "000", 3, bump=True, gt=True)
    if with_bad:
        write_plane_sample(root / "part" / "train" / "good", "002", 4, noise=True)


def test_stage_preprocess_runs_then_skips(tmp_path):
    make_raw_tree(tmp_path / "in")
    first = pipeline.stage_preprocess(tmp_path / "in", tmp_path / "out")
    assert len(first["processed"]) == 3
    assert not first["failed"] and not first["skipped"]
    assert (tmp_path / "out" / "part" / "test" / "dent" / "gt" / "000.png").is_file()
    before = tree_checksums(tmp_path / "out")

    second = pipeline.stage_preprocess(tmp_path / "in", tmp_path / "out")
    assert len(second["skipped"]) == 3
    assert not second["processed"]
    assert tree_checksums(tmp_path / "out") == before


def test_stage_preprocess_redoes_corrupted_output(tmp_path):
    make_raw_tree(tmp_path / "in")
    pipeline.stage_preprocess(tmp_path / "in", tmp_path / "out")
    victim = tmp_path / "out" / "part" / "train" / "good" / "xyz" / "000.tiff"
    preprocess.write_xyz_tiff(
        victim, StructuredPointCloud(np.ones((24, 24, 3), dtype=np.float32))
    )
    again = pipeline.stage_preprocess(tmp_path / "in", tmp_path / "out")
    assert again["processed"] == ["part/train/good/000"]
    assert len(again["skipped"]) == 2


def test_stage_preprocess_records_failures(tmp_path):
    make_raw_tree(tmp_path / "in", with_bad=True)
    summary = pipeline.stage_preprocess(tmp_path / "in", tmp_path / "out")
    assert len(summary["processed"]) == 3
    assert len(summary["failed"]) == 1
    assert summary["failed"][0]["sample"] == "part/train/good/002"
    assert "plane" in summary["failed"][0]["error"]


def test_stage_preprocess_missing_input(tmp_path):
    with pytest.raises(DataError, match="does not exist"):
        pipeline.stage_preprocess(tmp_path / "none", tmp_path / "out")


# ---------------------------------------------------------------------------
# CLI


def test_cli_synth_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        '{"n_train": 2, "n_test_normal": 1, "n_test_anomalous": 1,'
        ' "grid": 6, "dim": 8}'
    )
    code = cli.main([
        "synth", "--config", str(cfg), "--root", str(tmp_path / "data"),
        "--grid", "5",
    ])
    assert code == 0
    manifest = io.read_json(tmp_path / "data" / "synthetic" / "synth_manifest.json")
    assert manifest["config"]["grid"] == 5  # flag beats config file
    assert manifest["config"]["dim"] == 8  # config file beats default


def test_cli_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"gird": 6}')
    code = cli.main(["synth", "--config", str(cfg), "--root", str(tmp_path / "d")])
    assert code == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_cli_root_from_environment(synth_root, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_ROOT, str(synth_root))
    code = cli.main(["bank", "--out", str(tmp_path / "banks"), "--fraction", "0.25"])
    assert code == 0
    assert (tmp_path / "banks" / "pc" / "bank.cmft").is_file()


def test_cli_missing_root_is_usage_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(cli.ENV_ROOT, raising=False)
    code = cli.main(["bank", "--out", str(tmp_path / "banks")])
    assert code == 1
    assert "dataset root" in capsys.readouterr().err


def test_cli_missing_dataset_is_data_error(tmp_path, capsys):
    code = cli.main([
        "bank", "--root", str(tmp_path / "ghost"), "--out", str(tmp_path / "banks"),
    ])
    assert code == 2
    assert "data error" in capsys.readouterr().err


def test_cli_unknown_command():
    assert cli.main(["bogus"]) == 1


def test_cli_preprocess_partial_failure_exit_code(tmp_path, capsys):
    make_raw_tree(tmp_path / "in", with_bad=True)
    code = cli.main([
        "preprocess", "--root", str(tmp_path / "in"), "--out", str(tmp_path / "out"),
    ])
    assert code == 3
    err = capsys.readouterr().err
    assert "part/train/good/002" in err

    clean = tmp_path / "clean"
    make_raw_tree(clean)
    code = cli.main([
        "preprocess", "--root", str(clean), "--out", str(tmp_path / "out2"),
    ])
    assert code == 0


def test_cli_end_to_end_infer_and_eval(synth_root, banks_dir, tmp_path, capsys):
    code = cli.main([
        "infer", "--root", str(synth_root), "--banks", str(banks_dir),
        "--out", str(tmp_path / "res"), "--mode", "single", "--modality", "pc",
        "--feat-rows", "8", "--feat-cols", "8", "--feat-dim", "12",
    ])
    assert code == 0
    assert "scored 8 samples" in capsys.readouterr().out
    code = cli.main([
        "eval", "--root", str(synth_root), "--results", str(tmp_path / "res"),
    ])
    assert code == 0
    assert "image_auroc" in capsys.readouterr().out
