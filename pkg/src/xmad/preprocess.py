"""Scene preprocessing: plane removal, sampling, grouping, interpolation.

Point clouds arrive as structured H x W xyz grids where exactly-zero triples
mark invalid pixels. The dominant plane (the surface the object sits on) is
found with RANSAC and zeroed out of both modalities before feature work.
"""

from dataclasses import dataclass

import cv2
import numpy as np

from . import kernels
from .errors import DataError, DegenerateInputError, NoPlaneError
from .io import FeatureMap, RgbImage, StructuredPointCloud

# ---------------------------------------------------------------------------
# Raw file IO (OpenCV handles PNG and multi-channel float TIFF)


def read_rgb_png(path):
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DataError(f"cannot read image {path}")
    rgb = bgr[:, :, ::-1].astype(np.float32) / 255.0
    return RgbImage(rgb)


def write_rgb_png(path, image):
    arr = np.round(image.pixels * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), arr[:, :, ::-1]):
        raise OSError(f"cannot write image {path}")


def read_xyz_tiff(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"cannot read point grid {path}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise DataError(f"point grid {path} must have 3 channels, got {raw.shape}")
    # OpenCV loads 3-channel images channel-reversed; flip back to xyz.
    return StructuredPointCloud(raw[:, :, ::-1].astype(np.float32))


def write_xyz_tiff(path, cloud):
    if not cv2.imwrite(str(path), cloud.coords[:, :, ::-1]):
        raise OSError(f"cannot write point grid {path}")


def read_mask_png(path):
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise DataError(f"cannot read mask {path}")
    return (raw > 127).astype(np.uint8)


def write_mask_png(path, mask):
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"cannot write mask {path}")


# ---------------------------------------------------------------------------
# Plane fitting and background removal


@dataclass(frozen=True)
class Plane:
    """Unit-normal plane: points p with |p . normal - offset| == 0."""

    normal: tuple
    offset: float

    def distances(self, points):
        n = np.asarray(self.normal, dtype=np.float64)
        return np.abs(np.asarray(points, dtype=np.float64) @ n - self.offset)


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    threshold: float = 0.005
    min_inlier_fraction: float = 0.3
    seed: int = 0


def _canonical_sign(normal, offset):
    for axis in (2, 1, 0):
        if normal[axis] != 0.0:
            if normal[axis] < 0.0:
                return -normal, -offset
            break
    return normal, offset


def _lsq_plane(points):
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[2]
    normal = normal / np.sqrt(normal @ normal)
    offset = float(normal @ centroid)
    normal, offset = _canonical_sign(normal, offset)
    return Plane(tuple(normal), offset)


def fit_background_plane(cloud, cfg=RansacConfig()):
    """RANSAC plane over the non-zero points, refined by least squares.

    Inliers are strictly closer than cfg.threshold. The hypothesis with the
    most inliers wins (first hypothesis kept on ties); if its inlier fraction
    is below cfg.min_inlier_fraction the scene has no usable plane.
    """
    if isinstance(cloud, StructuredPointCloud):
        points = cloud.coords[cloud.foreground_mask()]
    else:
        points = np.asarray(cloud)
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {points.shape}")
    n_points = points.shape[0]
    if n_points < 3:
        raise DegenerateInputError(f"plane fit needs >= 3 points, got {n_points}")

    rng = np.random.default_rng(cfg.seed)
    best_count = 0
    best_inliers = None
    for _ in range(cfg.iterations):
        pick = rng.choice(n_points, size=3, replace=False)
        p0, p1, p2 = points[pick]
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.sqrt(normal @ normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        offset = normal @ p0
        close = np.abs(points @ normal - offset) < cfg.threshold
        count = int(close.sum())
        if count > best_count:
            best_count = count
            best_inliers = close

    if best_count / n_points < cfg.min_inlier_fraction:
        raise NoPlaneError(
            f"best plane covers {best_count}/{n_points} points, below "
            f"min_inlier_fraction={cfg.min_inlier_fraction}"
        )
    return _lsq_plane(points[best_inliers])


def remove_background(cloud, image, plane, threshold=0.005):
    """Zero plane-adjacent pixels in both modalities; returns copies.

    Pixels already at (0,0,0) stay zeroed, so the operation is idempotent
    under the same plane.
    """
    coords = cloud.coords
    if image is not None and image.pixels.shape[:2] != coords.shape[:2]:
        raise ValueError(
            f"modality shapes differ: {coords.shape[:2]} vs {image.pixels.shape[:2]}"
        )
    background = ~cloud.foreground_mask()
    near = plane.distances(coords.reshape(-1, 3)).reshape(coords.shape[:2])
    background |= near < threshold
    new_coords = coords.copy()
    new_coords[background] = 0.0
    new_cloud = StructuredPointCloud(new_coords)
    if image is None:
        return new_cloud, None
    new_pixels = image.pixels.copy()
    new_pixels[background] = 0.0
    return new_cloud, RgbImage(new_pixels)


# ---------------------------------------------------------------------------
# Sampling, grouping, interpolation


def foreground_points(cloud):
    """(points (n,3) float64, pixel (row,col) coords (n,2) float64)."""
    mask = cloud.foreground_mask()
    rows, cols = np.nonzero(mask)
    points = cloud.coords[rows, cols].astype(np.float64)
    pixels = np.stack([rows, cols], axis=1).astype(np.float64)
    return points, pixels


def farthest_point_sample(points, n, seed=0, start=None):
    """Greedy max-min (farthest point) sampling; returns int64 indices.

    The first index is a seeded-random start unless `start` is given; each
    later pick maximizes the minimum L2 distance to everything already
    chosen, ties to the lowest index.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"points must be 2-d, got shape {pts.shape}")
    count = pts.shape[0]
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if count == 0:
        raise DegenerateInputError("cannot sample from an empty point set")
    if n > count:
        raise ValueError(f"cannot pick {n} of {count} points")
    if start is None:
        start = int(np.random.default_rng(seed).integers(count))
    elif not 0 <= start < count:
        raise ValueError(f"start index {start} out of range [0, {count})")

    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    min_dist = kernels.dists_to_vector(pts, pts[start], "l2")
    min_dist[start] = -np.inf
    for i in range(1, n):
        nxt = int(np.argmax(min_dist))
        chosen[i] = nxt
        np.minimum(min_dist, kernels.dists_to_vector(pts, pts[nxt], "l2"), out=min_dist)
        min_dist[nxt] = -np.inf
    return chosen


def knn_group(points, center_indices, m):
    """For each center, its m nearest points (center first, ties by index)."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    count = pts.shape[0]
    if m < 1:
        raise ValueError("group size must be >= 1")
    if m > count:
        raise ValueError(f"group size {m} exceeds point count {count}")
    groups = []
    for center in np.asarray(center_indices, dtype=np.int64):
        dist = kernels.dists_to_vector(pts, pts[center], "l2")
        dist[center] = -1.0
        order = np.argsort(dist, kind="stable")
        groups.append(order[:m].astype(np.int64))
    return groups


def idw_interpolate(positions, values, out_shape, k=4, power=2.0):
    """Inverse-distance-weighted scattered interpolation onto a grid.

    positions: (g, 2) sample coordinates in output-grid units.
    values:    (g, d) sample values.
    A cell closer than 1e-12 to a sample copies that sample exactly (lowest
    index on ties); otherwise it blends the k nearest samples with weights
    distance^-power. Returns (rows, cols, d) float64.
    """
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    vals = np.ascontiguousarray(values, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ValueError(f"positions must be (g, 2), got {pos.shape}")
    if vals.ndim != 2 or vals.shape[0] != pos.shape[0]:
        raise ValueError(f"values shape {vals.shape} does not match positions")
    g = pos.shape[0]
    if g == 0:
        raise DegenerateInputError("need at least one sample position")
    if not 1 <= k <= g:
        raise ValueError(f"k={k} must lie in [1, {g}]")
    rows, cols = out_shape
    if rows < 1 or cols < 1:
        raise ValueError(f"bad output shape {out_shape}")

    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    cells = np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1).astype(np.float64)
    dr = cells[:, 0:1] - pos[None, :, 0]
    dc = cells[:, 1:2] - pos[None, :, 1]
    dist = np.sqrt(dr * dr + dc * dc)

    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    near = np.take_along_axis(dist, order, axis=1)
    out = np.empty((rows * cols, vals.shape[1]))
    snap = near[:, 0] < 1e-12
    if snap.any():
        out[snap] = vals[order[snap, 0]]
    free = ~snap
    if free.any():
        w = near[free] ** (-power)
        picked = vals[order[free]]
        acc = w[:, 0, None] * picked[:, 0]
        for j in range(1, k):
            acc = acc + w[:, j, None] * picked[:, j]
        out[free] = acc / w.sum(axis=1)[:, None]
    return out.reshape(rows, cols, vals.shape[1])


def scale_grid_positions(pixel_coords, in_shape, out_shape):
    """Map (row, col) pixel coords onto a coarser grid via half-pixel centers."""
    coords = np.asarray(pixel_coords, dtype=np.float64)
    scale_r = out_shape[0] / in_shape[0]
    scale_c = out_shape[1] / in_shape[1]
    out = np.empty_like(coords)
    out[:, 0] = (coords[:, 0] + 0.5) * scale_r - 0.5
    out[:, 1] = (coords[:, 1] + 0.5) * scale_c - 0.5
    return out


def pool_align(fmap, mode):
    """Resolution alignment: "up2" duplicates cells 2x2, "down2" averages 2x2.

    down2(up2(m)) reproduces m exactly (the 2x2 sum of equal values and the
    divide by 4 are both exact in 4-byte floats).
    """
    data = fmap.data
    if mode == "up2":
        return FeatureMap(np.repeat(np.repeat(data, 2, axis=0), 2, axis=1))
    if mode == "down2":
        if data.shape[0] % 2 or data.shape[1] % 2:
            raise ValueError(f"down2 needs even dims, got {data.shape[:2]}")
        a = data[0::2, 0::2]
        b = data[0::2, 1::2]
        c = data[1::2, 0::2]
        d = data[1::2, 1::2]
        return FeatureMap(((a + b) + (c + d)) / 4.0)
    raise ValueError(f"unknown pool mode {mode!r}; valid options: up2, down2")
