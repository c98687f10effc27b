"""Memory banks: greedy max-min coresets of normal feature cells.

A bank holds a subset of training cells chosen so every training cell stays
close to the subset (k-center greedy: each pick maximizes its minimum
distance to everything already chosen). Selection can run in a sparse
random projection of the cells for speed; queries always use exact distances
in the original space.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, DegenerateInputError
from .io import (
    FeatureMap,
    file_sha256,
    read_feature_tensor,
    read_json,
    write_feature_tensor,
    write_json,
)

BANK_FORMAT = "memory-bank-v1"


def distance(a, b, metric="l2"):
    """Scalar distance between two vectors under `metric`."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    return float(kernels.dists_to_vector(a[None, :], b, metric)[0])


@dataclass
class PatchSet:
    """Stacked feature cells (n, dim) with optional (sample_id, cell) origins."""

    patches: np.ndarray
    origins: list | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.patches, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"patches must be 2-d, got shape {arr.shape}")
        if self.origins is not None and len(self.origins) != arr.shape[0]:
            raise ValueError("origins length does not match patch count")
        self.patches = arr


def collect_patches(feature_maps, sample_ids=None, skip_background=True):
    """Stack cells of many maps into one PatchSet (row-major per map).

    All-zero cells are background and excluded by default.
    """
    if not feature_maps:
        raise DegenerateInputError("no feature maps given")
    dim = feature_maps[0].dim
    rows_list, origins = [], []
    for i, fmap in enumerate(feature_maps):
        if fmap.dim != dim:
            raise ValueError(f"feature dim mismatch: {fmap.dim} != {dim}")
        cells = fmap.cells().astype(np.float64)
        keep = np.ones(cells.shape[0], dtype=bool)
        if skip_background:
            keep = np.any(cells != 0.0, axis=1)
        rows_list.append(cells[keep])
        sid = sample_ids[i] if sample_ids else str(i)
        origins.extend((sid, int(c)) for c in np.nonzero(keep)[0])
    patches = np.concatenate(rows_list)
    if patches.shape[0] == 0:
        raise DegenerateInputError("all cells are background")
    return PatchSet(patches, origins)


@dataclass
class ProjectionMatrix:
    """Sparse random projection (dense storage); entries are
    +-sqrt(1/(density*d_target)) with probability density/2 each, else 0."""

    matrix: np.ndarray
    density: float
    seed: int


def make_projection(d_in, d_target, density=None, seed=0):
    if not 1 <= d_target <= d_in:
        raise ValueError(f"d_target={d_target} must lie in [1, {d_in}]")
    if density is None:
        density = 1.0 / np.sqrt(d_in)
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density={density} must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    u = rng.random((d_in, d_target))
    scale = np.sqrt(1.0 / (density * d_target))
    matrix = np.where(u < density / 2.0, scale, np.where(u < density, -scale, 0.0))
    return ProjectionMatrix(matrix, density, seed)


def coreset_select(patches, fraction, metric="l2", projection=None, seed=0, start=None):
    """Greedy max-min subset indices of a PatchSet (or (n, d) array).

    Picks k = max(1, round(fraction * n)) rows. The first pick is a
    seeded-random row unless `start` is given; each later pick maximizes the
    minimum distance to the already-picked set, ties to the lowest index.
    With a projection, selection distances run in the projected space.
    """
    pts = patches.patches if isinstance(patches, PatchSet) else patches
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise DegenerateInputError(f"need a non-empty 2-d patch set, got {pts.shape}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction={fraction} must lie in (0, 1]")
    kernels.metric_code(metric)
    n = pts.shape[0]
    k = max(1, round(fraction * n))
    space = pts @ projection.matrix if projection is not None else pts
    space = np.ascontiguousarray(space)
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= start < n:
        raise ValueError(f"start index {start} out of range [0, {n})")

    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    min_dist = kernels.dists_to_vector(space, space[start], metric)
    min_dist[start] = -np.inf
    for i in range(1, k):
        nxt = int(np.argmax(min_dist))
        chosen[i] = nxt
        np.minimum(
            min_dist, kernels.dists_to_vector(space, space[nxt], metric), out=min_dist
        )
        min_dist[nxt] = -np.inf
    return chosen


@dataclass
class MemoryBank:
    rows: np.ndarray  # (k, dim) float64, exact (unprojected) values
    metric: str = "l2"
    modality: str | None = None
    fraction: float = 1.0
    seed: int = 0
    projection: dict | None = None  # {"d_target", "density", "seed"} if used
    source: dict | None = None  # provenance for the manifest

    def __post_init__(self):
        arr = np.ascontiguousarray(self.rows, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"bank rows must be non-empty 2-d, got {arr.shape}")
        kernels.metric_code(self.metric)
        self.rows = arr

    @property
    def dim(self):
        return self.rows.shape[1]


def build_bank(
    patches,
    fraction,
    metric="l2",
    projection=None,
    seed=0,
    modality=None,
    source=None,
):
    """Select a coreset and wrap it as a MemoryBank (exact rows kept)."""
    pset = patches if isinstance(patches, PatchSet) else PatchSet(patches)
    idx = coreset_select(pset, fraction, metric, projection, seed)
    proj_info = None
    if projection is not None:
        proj_info = {
            "d_target": int(projection.matrix.shape[1]),
            "density": float(projection.density),
            "seed": int(projection.seed),
        }
    return MemoryBank(
        pset.patches[idx],
        metric=metric,
        modality=modality,
        fraction=fraction,
        seed=seed,
        projection=proj_info,
        source=source,
    )


def nn_query(bank, vectors):
    """Nearest bank row per query vector: (distances, indices).

    Accepts one (dim,) vector or a (q, dim) stack.
    """
    arr = np.ascontiguousarray(vectors, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != bank.dim:
        raise ValueError(f"query dim {arr.shape[1]} != bank dim {bank.dim}")
    dists, idx = kernels.nn_scan(arr, bank.rows, bank.metric)
    if single:
        return float(dists[0]), int(idx[0])
    return dists, idx


def save_bank(out_dir, bank):
    """Write <out_dir>/bank.cmft plus manifest.json; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensor_path = out / "bank.cmft"
    write_feature_tensor(
        FeatureMap(bank.rows[:, :, None].astype(np.float32)), tensor_path
    )
    manifest = {
        "format": BANK_FORMAT,
        "metric": bank.metric,
        "modality": bank.modality,
        "fraction": bank.fraction,
        "seed": bank.seed,
        "rows": int(bank.rows.shape[0]),
        "dim": int(bank.dim),
        "projection": bank.projection,
        "source": bank.source,
        "checksum": file_sha256(tensor_path),
    }
    write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def load_bank(path):
    """Read a bank directory (or its manifest path) back into memory."""
    path = Path(path)
    manifest_path = path if path.is_file() else path / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no bank manifest at {manifest_path}")
    manifest = read_json(manifest_path)
    if manifest.get("format") != BANK_FORMAT:
        raise DataError(f"unsupported bank format {manifest.get('format')!r}")
    tensor = read_feature_tensor(manifest_path.parent / "bank.cmft")
    return MemoryBank(
        tensor.data[:, :, 0].astype(np.float64),
        metric=manifest["metric"],
        modality=manifest.get("modality"),
        fraction=manifest.get("fraction", 1.0),
        seed=manifest.get("seed", 0),
        projection=manifest.get("projection"),
        source=manifest.get("source"),
    )
