"""Core data types, the binary feature-tensor format, and dataset trees.

A feature tensor on disk is little-endian: magic "CMFT", then five u32 fields
(version=1, rows, cols, dim, dtype=0 for 4-byte floats), then the row-major
float payload. Total size is 24 + 4*rows*cols*dim bytes. The format is the
wire contract with external exporters, so it is frozen.

Dataset trees mirror the MVTec 3D-AD layout:

    <root>/<class>/<split>/<defect>/rgb/<id>.png
    <root>/<class>/<split>/<defect>/xyz/<id>.tiff
    <root>/<class>/<split>/<defect>/gt/<id>.png
    <root>/<class>/<split>/<defect>/feat/<modality>/<id>.cmft (+ .json sidecar)

Raw-image decoding lives in xmad.preprocess; this module handles tensors,
sidecars, and discovery.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"CMFT"
FORMAT_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIIII")
HEADER_BYTES = _HEADER.size

MODALITIES = ("pc", "rgb")
SPLITS = ("train", "test")


def _check_finite(data):
    if not np.isfinite(data).all():
        flat = np.argmin(np.isfinite(data).reshape(-1))
        cell = np.unravel_index(flat, data.shape)
        raise ValueError(f"non-finite value at cell {tuple(int(c) for c in cell)}")


@dataclass(eq=False)
class FeatureMap:
    """A rows x cols grid of dim-dimensional cells, 4-byte floats."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"feature map must be 3-d, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"feature map dims must be >= 1, got {arr.shape}")
        _check_finite(arr)
        self.data = arr

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]

    def cells(self):
        """View as (rows*cols, dim), row-major cell order."""
        return self.data.reshape(self.rows * self.cols, self.dim)


@dataclass(eq=False)
class RgbImage:
    """H x W x 3 color image, values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"rgb image must be HxWx3, got shape {arr.shape}")
        _check_finite(arr)
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("rgb values must lie in [0, 1]")
        self.pixels = arr


@dataclass(eq=False)
class StructuredPointCloud:
    """H x W grid of xyz coordinates in meters; (0,0,0) marks background."""

    coords: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.coords, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"point cloud must be HxWx3, got shape {arr.shape}")
        _check_finite(arr)
        self.coords = arr

    def foreground_mask(self):
        """Boolean H x W mask of pixels that are not exactly (0,0,0)."""
        return np.any(self.coords != 0.0, axis=2)


@dataclass(eq=False)
class Sample:
    sample_id: str
    class_name: str = "unknown"
    split: str = "train"
    defect: str = "good"
    rgb: RgbImage | None = None
    pc: StructuredPointCloud | None = None
    rgb_features: FeatureMap | None = None
    pc_features: FeatureMap | None = None
    gt_mask: np.ndarray | None = None
    label: str | None = None

    def features(self, modality):
        fmap = self.pc_features if modality == "pc" else self.rgb_features
        if fmap is None:
            raise DataError(f"sample {self.sample_id} has no {modality} features")
        return fmap


# ---------------------------------------------------------------------------
# Binary tensor format


def write_feature_tensor(fmap, dest):
    """Write `fmap` to a path or binary sink; returns the byte count."""
    if hasattr(dest, "write"):
        return _write_stream(fmap, dest)
    with open(dest, "wb") as fh:
        return _write_stream(fmap, fh)


def _write_stream(fmap, fh):
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, fmap.rows, fmap.cols, fmap.dim, DTYPE_F32
    )
    payload = fmap.data.astype("<f4", copy=False).tobytes(order="C")
    written = 0
    try:
        fh.write(header)
        written = len(header)
        fh.write(payload)
        written += len(payload)
    except OSError as exc:
        raise OSError(f"write failed at byte offset {written}: {exc}") from exc
    return written


def read_feature_tensor(src):
    """Read a feature tensor from a path or binary source."""
    if hasattr(src, "read"):
        return _read_stream(src)
    with open(src, "rb") as fh:
        return _read_stream(fh)


def _read_stream(fh):
    header = fh.read(HEADER_BYTES)
    if len(header) < HEADER_BYTES:
        raise FormatError(
            f"truncated header: expected {HEADER_BYTES} bytes, got {len(header)}"
        )
    magic, version, rows, cols, dim, dtype = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}, expected {FORMAT_VERSION}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}, expected {DTYPE_F32}")
    if min(rows, cols, dim) < 1:
        raise FormatError(f"bad shape ({rows}, {cols}, {dim})")
    expected = 4 * rows * cols * dim
    payload = fh.read(expected)
    if len(payload) != expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols, dim).copy()
    return FeatureMap(data)


def tensor_byte_count(rows, cols, dim):
    return HEADER_BYTES + 4 * rows * cols * dim


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    """Deterministic JSON (sorted keys, fixed separators, trailing newline)."""
    text = json.dumps(obj, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# Synthetic dual-modal dataset


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 40
    n_test_normal: int = 25
    n_test_anomalous: int = 25
    grid: int = 16
    dim: int = 24
    coupling: float = 0.9
    anomaly_strength: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if self.n_test_normal < 0 or self.n_test_anomalous < 0:
            raise ValueError("test counts must be >= 0")
        if self.grid < 2:
            raise ValueError("grid must be >= 2")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")
        if self.anomaly_strength < 0.0:
            raise ValueError("anomaly_strength must be >= 0")


# The manifold that normal samples live on is fixed (independent of
# SynthConfig.seed) so datasets with different seeds share it.
_MANIFOLD_SEED = 0xC0FFEE
_LATENT = 6
# Per-cell observation noise. Kept small so a distiller trained at full
# coupling can push the regression loss well under 1e-3.
_NOISE_PC = 0.01
_NOISE_RGB = 0.01
_UNCOUPLED_SCALE = 0.5


def _manifold(grid, dim):
    rng = np.random.default_rng(np.random.SeedSequence(_MANIFOLD_SEED))
    freqs = rng.integers(0, 3, size=(_LATENT, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=_LATENT)
    mix = rng.normal(0.0, 1.0, size=(dim, _LATENT)) * (1.2 / np.sqrt(_LATENT))
    gauss = rng.normal(0.0, 1.0, size=(dim, dim))
    q, _ = np.linalg.qr(gauss)
    couple = 0.9 * q
    r = np.arange(grid)[:, None]
    c = np.arange(grid)[None, :]
    base = np.empty((_LATENT, grid, grid))
    for k in range(_LATENT):
        base[k] = 2.0 * np.pi * (freqs[k, 0] * r + freqs[k, 1] * c) / grid + phases[k]
    return base, mix, couple


def _synth_sample(cfg, base, mix, couple, stream, index, anomalous):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stream, index]))
    amp = rng.normal(0.0, 1.0, size=_LATENT)
    shift = rng.uniform(0.0, 2.0 * np.pi, size=_LATENT)
    latent = amp[:, None, None] * np.cos(base + shift[:, None, None])
    pc_core = np.tanh(np.tensordot(latent, mix, axes=([0], [1])))
    rough = rng.normal(0.0, _UNCOUPLED_SCALE, size=pc_core.shape)
    rgb_core = cfg.coupling * (pc_core @ couple.T) + (1.0 - cfg.coupling) * rough
    pc_feat = pc_core + rng.normal(0.0, _NOISE_PC, size=pc_core.shape)
    rgb_feat = rgb_core + rng.normal(0.0, _NOISE_RGB, size=rgb_core.shape)

    mask = np.zeros((4 * cfg.grid, 4 * cfg.grid), dtype=np.uint8)
    if anomalous:
        side = max(1, cfg.grid // 4)
        r0 = int(rng.integers(0, cfg.grid - side + 1))
        c0 = int(rng.integers(0, cfg.grid - side + 1))
        for target in (pc_feat, rgb_feat):
            bump = rng.normal(0.0, 1.0, size=(side, side, cfg.dim))
            norms = np.sqrt(np.sum(bump * bump, axis=2, keepdims=True))
            bump /= np.maximum(norms, 1e-12)
            target[r0 : r0 + side, c0 : c0 + side] += cfg.anomaly_strength * bump
        mask[4 * r0 : 4 * (r0 + side), 4 * c0 : 4 * (c0 + side)] = 1
    return pc_feat, rgb_feat, mask


def generate_synthetic_dataset(cfg):
    """Deterministic (train, test) sample lists; features only, no raw images.

    Point-cloud features come from a fixed smooth manifold; color features are
    coupling * (linear map of the same underlying state) plus independent
    structure. Anomalous test samples get a contiguous block in both feature
    maps perturbed by anomaly_strength, and carry a pixel ground-truth mask at
    4x the grid resolution. anomaly_strength 0 makes them ordinary normals.
    """
    base, mix, couple = _manifold(cfg.grid, cfg.dim)

    def build(stream, index, sid, split, defect, label, anomalous, with_mask):
        pc, rgb, mask = _synth_sample(cfg, base, mix, couple, stream, index, anomalous)
        return Sample(
            sample_id=sid,
            class_name="synthetic",
            split=split,
            defect=defect,
            pc_features=FeatureMap(pc),
            rgb_features=FeatureMap(rgb),
            gt_mask=mask if with_mask else None,
            label=label,
        )

    train = [
        build(0, i, f"train_{i:04d}", "train", "good", "normal", False, False)
        for i in range(cfg.n_train)
    ]
    test = [
        build(1, i, f"test_normal_{i:04d}", "test", "good", "normal", False, True)
        for i in range(cfg.n_test_normal)
    ]
    test += [
        build(2, i, f"test_anom_{i:04d}", "test", "anomaly", "anomalous", True, True)
        for i in range(cfg.n_test_anomalous)
    ]
    return train, test


# ---------------------------------------------------------------------------
# Dataset trees


def defect_dir(root, class_name, split, defect):
    return Path(root) / class_name / split / defect


def save_sample_features(ddir, sample, source="synthetic"):
    """Write a sample's feature tensors plus JSON sidecars under feat/."""
    ddir = Path(ddir)
    for modality in MODALITIES:
        fmap = sample.pc_features if modality == "pc" else sample.rgb_features
        if fmap is None:
            continue
        mdir = ddir / "feat" / modality
        mdir.mkdir(parents=True, exist_ok=True)
        tensor_path = mdir / f"{sample.sample_id}.cmft"
        write_feature_tensor(fmap, tensor_path)
        write_json(
            mdir / f"{sample.sample_id}.json",
            {
                "id": sample.sample_id,
                "modality": modality,
                "rows": fmap.rows,
                "cols": fmap.cols,
                "dim": fmap.dim,
                "source": source,
                "checksum": file_sha256(tensor_path),
            },
        )


def save_synthetic_dataset(root, class_name, cfg):
    """Generate and write a synthetic dataset tree; returns the manifest path."""
    from . import preprocess

    train, test = generate_synthetic_dataset(cfg)
    for sample in train + test:
        ddir = defect_dir(root, class_name, sample.split, sample.defect)
        save_sample_features(ddir, sample)
        if sample.gt_mask is not None:
            gt_dir = ddir / "gt"
            gt_dir.mkdir(parents=True, exist_ok=True)
            preprocess.write_mask_png(gt_dir / f"{sample.sample_id}.png", sample.gt_mask)

    class_root = Path(root) / class_name
    files = {
        str(p.relative_to(class_root)): file_sha256(p)
        for p in sorted(class_root.rglob("*"))
        if p.is_file() and p.name != "synth_manifest.json"
    }
    manifest = {
        "config": {f.name: getattr(cfg, f.name) for f in fields(cfg)},
        "class": class_name,
        "files": files,
    }
    manifest_path = class_root / "synth_manifest.json"
    write_json(manifest_path, manifest)
    return manifest_path


def _sample_ids(ddir):
    ids = set()
    for sub in ("rgb", "xyz"):
        if (ddir / sub).is_dir():
            ids.update(p.stem for p in (ddir / sub).iterdir() if p.is_file())
    for modality in MODALITIES:
        mdir = ddir / "feat" / modality
        if mdir.is_dir():
            ids.update(p.stem for p in mdir.glob("*.cmft"))
    return sorted(ids)


def load_sample(ddir, class_name, split, defect, sample_id, load_raw=True):
    from . import preprocess

    ddir = Path(ddir)
    sample = Sample(
        sample_id=sample_id,
        class_name=class_name,
        split=split,
        defect=defect,
        label="normal" if defect == "good" else "anomalous",
    )
    for modality in MODALITIES:
        tensor_path = ddir / "feat" / modality / f"{sample_id}.cmft"
        if tensor_path.is_file():
            fmap = read_feature_tensor(tensor_path)
            if modality == "pc":
                sample.pc_features = fmap
            else:
                sample.rgb_features = fmap
    if load_raw:
        rgb_path = ddir / "rgb" / f"{sample_id}.png"
        if rgb_path.is_file():
            sample.rgb = preprocess.read_rgb_png(rgb_path)
        xyz_path = ddir / "xyz" / f"{sample_id}.tiff"
        if xyz_path.is_file():
            sample.pc = preprocess.read_xyz_tiff(xyz_path)
    gt_path = ddir / "gt" / f"{sample_id}.png"
    if split == "test" and gt_path.is_file():
        sample.gt_mask = preprocess.read_mask_png(gt_path)
    return sample


def load_dataset(root, classes=None, load_raw=True):
    """Discover samples under `root`; returns {class: {split: [Sample, ...]}}.

    Sample lists are sorted by id, so iteration order is deterministic.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    if classes is None:
        classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    out = {}
    for class_name in classes:
        cdir = root / class_name
        if not cdir.is_dir():
            raise DataError(f"class directory {cdir} does not exist")
        per_split = {}
        for split in SPLITS:
            sdir = cdir / split
            samples = []
            if sdir.is_dir():
                for ddir in sorted(p for p in sdir.iterdir() if p.is_dir()):
                    for sid in _sample_ids(ddir):
                        samples.append(
                            load_sample(ddir, class_name, split, ddir.name, sid, load_raw)
                        )
            per_split[split] = samples
        out[class_name] = per_split
    return out
