"""Anomaly scoring and modality fusion.

A cell's score is the distance to its nearest memory-bank row; all-zero
(background) cells score 0. The image score is the maximum cell score.
Pixel maps are bilinearly upsampled and Gaussian-smoothed before any fusion.

Fusion first rescales each modality by the reciprocal of its mean training
image score, then applies a linear one-class model fit by seeded SGD; the
fused anomaly score is its decision value (higher = more anomalous). Image
level and pixel level get separately fit models.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import bank as bank_mod
from . import distill, extractor
from .errors import ConfigError, DataError, DegenerateInputError

# ---------------------------------------------------------------------------
# Cell and image scores


def score_cells(features, bank):
    """Per-cell nearest-bank distances: (scores (r, c), bank indices (r, c)).

    Background (all-zero) cells score 0 with index -1 and are never queried.
    """
    cells = features.cells().astype(np.float64)
    if cells.shape[1] != bank.dim:
        raise ValueError(f"feature dim {cells.shape[1]} != bank dim {bank.dim}")
    keep = np.any(cells != 0.0, axis=1)
    scores = np.zeros(cells.shape[0])
    indices = np.full(cells.shape[0], -1, dtype=np.int64)
    if keep.any():
        dists, idx = bank_mod.nn_query(bank, cells[keep])
        scores[keep] = dists
        indices[keep] = idx
    shape = (features.rows, features.cols)
    return scores.reshape(shape), indices.reshape(shape)


@dataclass(frozen=True)
class ImageScore:
    score: float
    cell: tuple  # (row, col) of the maximal cell, row-major first on ties
    bank_index: int  # nearest bank row of that cell, -1 if background


def image_score(features, bank):
    """Maximum cell score with its argmax cell and nearest bank row."""
    scores, indices = score_cells(features, bank)
    flat = int(np.argmax(scores))
    cell = np.unravel_index(flat, scores.shape)
    return ImageScore(
        float(scores[cell]), (int(cell[0]), int(cell[1])), int(indices[cell])
    )


# ---------------------------------------------------------------------------
# Map post-processing


def upsample_bilinear(grid, factor):
    """Bilinear upsampling by an integer factor with half-pixel centers."""
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {arr.shape}")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    rows, cols = arr.shape
    out_r, out_c = rows * factor, cols * factor
    src_r = np.clip((np.arange(out_r) + 0.5) / factor - 0.5, 0.0, rows - 1.0)
    src_c = np.clip((np.arange(out_c) + 0.5) / factor - 0.5, 0.0, cols - 1.0)
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    r1 = np.minimum(r0 + 1, rows - 1)
    c1 = np.minimum(c0 + 1, cols - 1)
    fr = (src_r - r0)[:, None]
    fc = (src_c - c0)[None, :]
    top = arr[np.ix_(r0, c0)] * (1.0 - fc) + arr[np.ix_(r0, c1)] * fc
    bot = arr[np.ix_(r1, c0)] * (1.0 - fc) + arr[np.ix_(r1, c1)] * fc
    return top * (1.0 - fr) + bot * fr


def postprocess_map(grid, upsample=4, sigma=4.0):
    """Upsample then smooth; sigma 0 skips smoothing."""
    out = upsample_bilinear(grid, upsample)
    if sigma > 0.0:
        out = gaussian_filter(out, sigma)
    return out


# ---------------------------------------------------------------------------
# Calibration and one-class fusion


def fit_scale(train_scores):
    """Reciprocal of the mean training score (1.0 if the mean is 0)."""
    arr = np.asarray(train_scores, dtype=np.float64)
    if arr.size == 0:
        raise DegenerateInputError("no training scores")
    if not np.isfinite(arr).all() or (arr < 0.0).any():
        raise ValueError("training scores must be finite and >= 0")
    mean = float(arr.mean())
    return 1.0 if mean == 0.0 else 1.0 / mean


def one_class_fit(points, nu=0.5, lr=1e-4, steps=1000, seed=0):
    """Linear one-class model via seeded SGD; returns (w, rho).

    Per-sample objective: (nu/2)|w|^2 + nu*rho + max(0, -(w.x - rho)).
    Sampling uses floor(u * n) on the unit stream, so duplicating every point
    adjacently leaves the sampled sequence unchanged.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise DegenerateInputError(f"need >= 2 training points, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("training points must be finite")
    if steps < 1 or lr <= 0.0 or nu <= 0.0:
        raise ConfigError("steps must be >= 1, lr > 0, nu > 0")
    n = pts.shape[0]
    rng = np.random.default_rng(seed)
    w = np.zeros(pts.shape[1])
    rho = 0.0
    for _ in range(steps):
        i = min(int(rng.random() * n), n - 1)
        x = pts[i]
        active = (w @ x - rho) <= 0.0
        if active:
            w = w - lr * (nu * w - x)
            rho = rho - lr * (nu + 1.0)
        else:
            w = w - lr * (nu * w)
            rho = rho - lr * nu
    return w, rho


def decision_values(w, rho, points):
    """Anomaly scores of the linear one-class model (higher = more anomalous)."""
    return np.asarray(points, dtype=np.float64) @ w - rho


@dataclass
class FusionModel:
    """Modality rescaling plus image- and pixel-level one-class fusers."""

    scale_pc: float
    scale_rgb: float
    image_w: np.ndarray
    image_rho: float
    pixel_w: np.ndarray
    pixel_rho: float

    def fuse_image(self, psi_pc, psi_rgb):
        x = np.array([self.scale_pc * psi_pc, self.scale_rgb * psi_rgb])
        return float(x @ self.image_w - self.image_rho)

    def fuse_pixel_maps(self, map_pc, map_rgb):
        a = np.asarray(map_pc, dtype=np.float64)
        b = np.asarray(map_rgb, dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
        return (
            self.scale_pc * a * self.pixel_w[0]
            + self.scale_rgb * b * self.pixel_w[1]
            - self.pixel_rho
        )


PIXEL_FIT_CAP = 100_000


def fit_fusion(
    psi_pc,
    psi_rgb,
    pixel_pairs,
    nu=0.5,
    lr=1e-4,
    steps=1000,
    seed=0,
    pixel_cap=PIXEL_FIT_CAP,
):
    """Fit scales and both one-class fusers from training-set scores.

    psi_pc / psi_rgb: per-training-image scores (same length).
    pixel_pairs: (m, 2) raw per-pixel score pairs; a seeded subsample of at
    most pixel_cap rows feeds the pixel-level fit.
    """
    psi_pc = np.asarray(psi_pc, dtype=np.float64)
    psi_rgb = np.asarray(psi_rgb, dtype=np.float64)
    if psi_pc.shape != psi_rgb.shape:
        raise ValueError("modality score lists differ in length")
    scale_pc = fit_scale(psi_pc)
    scale_rgb = fit_scale(psi_rgb)
    image_pairs = np.stack([scale_pc * psi_pc, scale_rgb * psi_rgb], axis=1)
    image_w, image_rho = one_class_fit(
        image_pairs, nu, lr, steps, seed=np.random.SeedSequence([seed, 0])
    )
    pixels = np.asarray(pixel_pairs, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValueError(f"pixel_pairs must be (m, 2), got {pixels.shape}")
    if pixels.shape[0] > pixel_cap:
        pick = np.random.default_rng(np.random.SeedSequence([seed, 2])).choice(
            pixels.shape[0], size=pixel_cap, replace=False
        )
        pixels = pixels[np.sort(pick)]
    scaled = pixels * np.array([scale_pc, scale_rgb])
    pixel_w, pixel_rho = one_class_fit(
        scaled, nu, lr, steps, seed=np.random.SeedSequence([seed, 1])
    )
    return FusionModel(scale_pc, scale_rgb, image_w, image_rho, pixel_w, pixel_rho)


# ---------------------------------------------------------------------------
# Inference


@dataclass(frozen=True)
class InferenceMode:
    """single: one modality, fusion bypassed. dual: both real modalities.
    hallucinated: `modality` is present, the other is predicted via `route`."""

    kind: str
    modality: str = "pc"
    route: str | None = None

    def __post_init__(self):
        if self.kind not in ("single", "dual", "hallucinated"):
            raise ConfigError(f"unknown inference kind {self.kind!r}")
        if self.modality not in ("pc", "rgb"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.kind == "hallucinated":
            if self.route not in distill.ROUTES:
                raise ConfigError(
                    f"hallucinated mode needs a route from {distill.ROUTES}"
                )
        elif self.route is not None:
            raise ConfigError(f"{self.kind} mode takes no route")

    def describe(self):
        if self.kind == "single":
            return f"single({self.modality})"
        if self.kind == "dual":
            return "dual"
        return f"hallucinated({self.route}, main={self.modality})"


@dataclass
class AnomalyResult:
    sample_id: str
    mode: str
    image_score: float
    pixel_map: np.ndarray
    modality_scores: dict  # raw per-modality image scores
    cell: tuple  # argmax cell of the driving modality
    bank_index: int
    label: str | None = None


def resolve_features(sample, modality, rgb_spec=None, pc_spec=None, grouping=None):
    """A sample's feature map for `modality`: stored if present, else
    extracted from the raw data with the given extractor spec."""
    stored = sample.pc_features if modality == "pc" else sample.rgb_features
    if stored is not None:
        return stored
    if modality == "rgb":
        if sample.rgb is not None and rgb_spec is not None:
            return extractor.extract_rgb(rgb_spec, sample.rgb, sample.sample_id)
    elif sample.pc is not None and pc_spec is not None:
        return extractor.pc_feature_map(
            pc_spec, sample.pc, grouping or extractor.GroupingConfig(), sample.sample_id
        )
    raise DataError(f"sample {sample.sample_id} has no {modality} features")


def _hallucinated_features(sample, mode, net, rgb_spec, pc_spec, grouping, main_feats):
    if net is None:
        raise ConfigError("hallucinated mode needs a distiller net")
    if net.route != mode.route or net.source != mode.modality:
        raise ConfigError(
            f"net is ({net.route}, source={net.source}), mode wants "
            f"({mode.route}, source={mode.modality})"
        )
    if mode.route == "i2f":
        raw = sample.pc if mode.modality == "pc" else sample.rgb
        if raw is None:
            raise DataError(f"sample {sample.sample_id} has no raw {mode.modality} data")
        return distill.hallucinate(net, raw, rgb_spec, pc_spec, grouping)
    return distill.hallucinate(net, main_feats, rgb_spec, pc_spec, grouping)


def infer(
    sample,
    mode,
    banks,
    fusion=None,
    net=None,
    rgb_spec=None,
    pc_spec=None,
    grouping=None,
    upsample=4,
    sigma=4.0,
):
    """Score one sample under an inference mode.

    banks: {modality: MemoryBank} (single needs its one modality, the other
    modes need both). fusion: FusionModel, required unless mode is single.
    net: trained distiller for hallucinated mode.
    """
    def bank_for(modality):
        if modality not in banks or banks[modality] is None:
            raise ConfigError(f"no memory bank for modality {modality!r}")
        return banks[modality]

    if mode.kind == "single":
        feats = resolve_features(sample, mode.modality, rgb_spec, pc_spec, grouping)
        cells, _ = score_cells(feats, bank_for(mode.modality))
        top = image_score(feats, bank_for(mode.modality))
        return AnomalyResult(
            sample_id=sample.sample_id,
            mode=mode.describe(),
            image_score=top.score,
            pixel_map=postprocess_map(cells, upsample, sigma),
            modality_scores={mode.modality: top.score},
            cell=top.cell,
            bank_index=top.bank_index,
            label=sample.label,
        )

    if fusion is None:
        raise ConfigError(f"{mode.kind} mode needs a fitted fusion model")

    if mode.kind == "dual":
        feats_pc = resolve_features(sample, "pc", rgb_spec, pc_spec, grouping)
        feats_rgb = resolve_features(sample, "rgb", rgb_spec, pc_spec, grouping)
    else:
        main = mode.modality
        main_feats = resolve_features(sample, main, rgb_spec, pc_spec, grouping)
        other = _hallucinated_features(
            sample, mode, net, rgb_spec, pc_spec, grouping, main_feats
        )
        feats_pc = main_feats if main == "pc" else other
        feats_rgb = main_feats if main == "rgb" else other

    cells_pc, _ = score_cells(feats_pc, bank_for("pc"))
    cells_rgb, _ = score_cells(feats_rgb, bank_for("rgb"))
    top_pc = image_score(feats_pc, bank_for("pc"))
    top_rgb = image_score(feats_rgb, bank_for("rgb"))
    map_pc = postprocess_map(cells_pc, upsample, sigma)
    map_rgb = postprocess_map(cells_rgb, upsample, sigma)
    fused = fusion.fuse_image(top_pc.score, top_rgb.score)
    driver = top_pc if top_pc.score >= top_rgb.score else top_rgb
    return AnomalyResult(
        sample_id=sample.sample_id,
        mode=mode.describe(),
        image_score=fused,
        pixel_map=fusion.fuse_pixel_maps(map_pc, map_rgb),
        modality_scores={"pc": top_pc.score, "rgb": top_rgb.score},
        cell=driver.cell,
        bank_index=driver.bank_index,
        label=sample.label,
    )
