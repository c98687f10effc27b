"""Feature extraction front ends.

Two kinds per modality: "precomputed" reads feature tensors exported by an
external tool from the dataset's feat/ tree, "synthetic" is a deterministic
seeded stand-in used for tests and synthetic pipelines (a fixed random linear
map plus tanh). Both produce the same shapes, so everything downstream is
agnostic to where features came from.

Color features are patch-local: the image splits into a grid of pixel
patches, one feature cell per patch. Point-cloud features go through
farthest-point sampling, k-NN grouping, per-group geometry statistics, and
inverse-distance interpolation onto the cell grid at twice the target
resolution, then a 2x2 average pool.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import preprocess
from .errors import ConfigError, DegenerateInputError
from .io import FeatureMap, read_feature_tensor

KINDS = ("precomputed", "synthetic")


@dataclass(frozen=True)
class ExtractorSpec:
    modality: str
    kind: str = "synthetic"
    out_rows: int = 56
    out_cols: int = 56
    out_dim: int = 768
    seed: int = 0
    feature_root: str | None = None

    def __post_init__(self):
        if self.modality not in ("pc", "rgb"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.kind not in KINDS:
            raise ConfigError(
                f"unknown extractor kind {self.kind!r}; valid: {', '.join(KINDS)}"
            )
        if min(self.out_rows, self.out_cols, self.out_dim) < 1:
            raise ConfigError("output shape fields must be >= 1")
        if self.kind == "precomputed" and self.feature_root is None:
            raise ConfigError("precomputed extractor needs feature_root")


@dataclass(frozen=True)
class GroupingConfig:
    n_groups: int = 1024
    group_size: int = 128
    idw_k: int = 4
    idw_power: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_groups < 1 or self.group_size < 1:
            raise ConfigError("group counts must be >= 1")
        if self.idw_k < 1:
            raise ConfigError("idw_k must be >= 1")


# Weight streams are keyed by (seed, modality) so the two synthetic
# extractors never share a matrix.
_MODALITY_TAG = {"pc": 0, "rgb": 1}
_PC_STATS = 12  # mean(3) + covariance upper triangle(6) + extent(3)


def _linear_weights(seed, modality, in_dim, out_dim):
    ss = np.random.SeedSequence([seed, _MODALITY_TAG[modality], in_dim, out_dim])
    rng = np.random.default_rng(ss)
    return rng.normal(0.0, 1.0, size=(out_dim, in_dim)) / np.sqrt(in_dim)


def patchify_image(pixels, rows, cols):
    """Split (H, W, C) into row-major per-cell patches: (rows*cols, ph*pw*C).

    H and W must divide evenly by rows and cols; returns (patches, (ph, pw)).
    """
    h, w, ch = pixels.shape
    if h % rows or w % cols:
        raise ValueError(f"image {h}x{w} does not divide into a {rows}x{cols} grid")
    ph, pw = h // rows, w // cols
    blocks = (
        pixels.reshape(rows, ph, cols, pw, ch)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, ph * pw * ch)
    )
    return blocks, (ph, pw)


def assemble_image(blocks, rows, cols, patch, channels=3):
    """Inverse of patchify_image: (rows*cols, ph*pw*C) -> (H, W, C)."""
    ph, pw = patch
    return (
        np.asarray(blocks)
        .reshape(rows, cols, ph, pw, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * ph, cols * pw, channels)
    )


def _load_precomputed(spec, sample_id):
    if sample_id is None:
        raise ConfigError("precomputed extraction needs a sample_id")
    path = Path(spec.feature_root) / spec.modality / f"{sample_id}.cmft"
    if not path.is_file():
        raise FileNotFoundError(
            f"no precomputed {spec.modality} features for {sample_id!r} at {path}"
        )
    fmap = read_feature_tensor(path)
    want = (spec.out_rows, spec.out_cols, spec.out_dim)
    if fmap.data.shape != want:
        raise ValueError(
            f"precomputed features for {sample_id!r} have shape {fmap.data.shape}, "
            f"expected {want}"
        )
    return fmap


def extract_rgb(spec, image, sample_id=None):
    """Color feature map: one cell per pixel patch.

    Synthetic kind: flattened patch through a fixed seeded linear map and
    tanh. No bias, so zeroed (background) patches give all-zero cells, and a
    cell depends only on its own patch's pixels.
    """
    if spec.modality != "rgb":
        raise ConfigError(f"extract_rgb got a {spec.modality!r} spec")
    if spec.kind == "precomputed":
        return _load_precomputed(spec, sample_id)
    blocks, (ph, pw) = patchify_image(
        image.pixels.astype(np.float64), spec.out_rows, spec.out_cols
    )
    weights = _linear_weights(spec.seed, "rgb", ph * pw * 3, spec.out_dim)
    feats = np.tanh(blocks @ weights.T)
    return FeatureMap(feats.reshape(spec.out_rows, spec.out_cols, spec.out_dim))


def group_statistics(group_points):
    """Translation-invariant geometry stats of one group, (12,) float64.

    Coordinates are taken relative to the group's center (its first point):
    mean, covariance upper triangle, and per-axis extent.
    """
    pts = np.asarray(group_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"group must be (m, 3) with m >= 1, got {pts.shape}")
    rel = pts - pts[0]
    mean = rel.mean(axis=0)
    centered = rel - mean
    cov = centered.T @ centered / pts.shape[0]
    iu = np.triu_indices(3)
    extent = rel.max(axis=0) - rel.min(axis=0)
    return np.concatenate([mean, cov[iu], extent])


def extract_pc(spec, groups, sample_id=None):
    """Per-group embeddings (n_groups, out_dim) from grouped points."""
    if spec.modality != "pc":
        raise ConfigError(f"extract_pc got a {spec.modality!r} spec")
    if spec.kind == "precomputed":
        raise ConfigError(
            "precomputed point features are read as maps; use pc_feature_map"
        )
    if len(groups) == 0:
        raise DegenerateInputError("need at least one group")
    stats = np.stack([group_statistics(g) for g in groups])
    weights = _linear_weights(spec.seed, "pc", _PC_STATS, spec.out_dim)
    return np.tanh(stats @ weights.T)


def pc_feature_map(spec, cloud, grouping=GroupingConfig(), sample_id=None):
    """Full point-cloud feature map: FPS -> k-NN groups -> stats embedding ->
    inverse-distance interpolation at 2x resolution -> 2x2 average pool."""
    if spec.modality != "pc":
        raise ConfigError(f"pc_feature_map got a {spec.modality!r} spec")
    if spec.kind == "precomputed":
        return _load_precomputed(spec, sample_id)
    points, pixels = preprocess.foreground_points(cloud)
    if points.shape[0] < grouping.n_groups:
        raise DegenerateInputError(
            f"{points.shape[0]} foreground points < {grouping.n_groups} groups"
        )
    m = min(grouping.group_size, points.shape[0])
    centers = preprocess.farthest_point_sample(points, grouping.n_groups, grouping.seed)
    groups = preprocess.knn_group(points, centers, m)
    embeddings = extract_pc(spec, [points[g] for g in groups])

    fine_shape = (2 * spec.out_rows, 2 * spec.out_cols)
    positions = preprocess.scale_grid_positions(
        pixels[centers], cloud.coords.shape[:2], fine_shape
    )
    k = min(grouping.idw_k, grouping.n_groups)
    fine = preprocess.idw_interpolate(
        positions, embeddings, fine_shape, k=k, power=grouping.idw_power
    )
    return preprocess.pool_align(FeatureMap(fine), "down2")
