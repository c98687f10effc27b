"""Detection metrics: image/pixel AUROC and the per-region-overlap curve.

AUROC uses trapezoidal integration with tied scores grouped into single ROC
steps, which equals the Mann-Whitney U statistic with half credit for ties.

The region-overlap curve (aupro) sweeps thresholds from high to low; at each
threshold it plots mean per-component recall (fraction of each ground-truth
component covered) against global false-positive rate, integrates up to
fpr_limit, and normalizes by the limit. Components use 8-connectivity.
"""

import numpy as np
from scipy import ndimage

MAX_THRESHOLDS = 50_000


def auroc(scores, labels):
    """Area under the ROC curve; labels are 1 = anomalous, 0 = normal."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must match, 1-d")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_scores = s[order]
    boundaries = np.flatnonzero(sorted_scores[1:] != sorted_scores[:-1]) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [s.size]])
    for lo, hi in zip(starts, ends):
        ranks[order[lo:hi]] = 0.5 * (lo + hi - 1) + 1.0
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pixel_auroc(score_maps, gt_masks, valid_masks=None):
    """AUROC over all pixels of many maps; optional per-map validity masks
    restrict the pool (used to exclude background pixels)."""
    if len(score_maps) != len(gt_masks) or not score_maps:
        raise ValueError("need matching, non-empty map and mask lists")
    scores, labels = [], []
    for i, (smap, mask) in enumerate(zip(score_maps, gt_masks)):
        smap = np.asarray(smap, dtype=np.float64)
        mask = np.asarray(mask)
        if smap.shape != mask.shape:
            raise ValueError(f"map {i}: shape {smap.shape} != mask {mask.shape}")
        keep = np.ones(smap.shape, dtype=bool)
        if valid_masks is not None:
            keep = np.asarray(valid_masks[i], dtype=bool)
        scores.append(smap[keep].reshape(-1))
        labels.append((mask[keep] != 0).astype(np.int64).reshape(-1))
    return auroc(np.concatenate(scores), np.concatenate(labels))


def connected_components(mask):
    """8-connected components of a binary mask, as flat-index arrays.

    Components are ordered by their smallest flat (row-major) index.
    """
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {arr.shape}")
    labeled, count = ndimage.label(arr != 0, structure=np.ones((3, 3), dtype=np.int64))
    flat = labeled.reshape(-1)
    comps = [np.flatnonzero(flat == lbl) for lbl in range(1, count + 1)]
    comps.sort(key=lambda c: int(c[0]))
    return comps


def aupro(score_maps, gt_masks, fpr_limit=0.3, max_thresholds=MAX_THRESHOLDS):
    """Normalized area under the per-region-overlap curve up to fpr_limit.

    Needs at least one ground-truth component and one negative pixel across
    the set. When distinct scores exceed max_thresholds, the sweep uses that
    many quantile-spaced thresholds instead.
    """
    if len(score_maps) != len(gt_masks) or not score_maps:
        raise ValueError("need matching, non-empty map and mask lists")
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit={fpr_limit} must lie in (0, 1]")

    comp_sizes = []
    comp_ids = []  # per map, pixel -> component id (-1 outside)
    neg_flags = []
    all_scores = []
    for i, (smap, mask) in enumerate(zip(score_maps, gt_masks)):
        smap = np.asarray(smap, dtype=np.float64)
        mask = np.asarray(mask)
        if smap.shape != mask.shape:
            raise ValueError(f"map {i}: shape {smap.shape} != mask {mask.shape}")
        if not np.isfinite(smap).all():
            raise ValueError(f"map {i}: scores must be finite")
        ids = np.full(mask.size, -1, dtype=np.int64)
        for comp in connected_components(mask):
            ids[comp] = len(comp_sizes)
            comp_sizes.append(comp.size)
        comp_ids.append(ids)
        neg_flags.append((mask == 0).reshape(-1))
        all_scores.append(smap.reshape(-1))

    if not comp_sizes:
        raise ValueError("ground truth contains no anomalous component")
    scores = np.concatenate(all_scores)
    negatives = np.concatenate(neg_flags)
    comp_of_pixel = np.concatenate(comp_ids)
    n_neg = int(negatives.sum())
    if n_neg == 0:
        raise ValueError("ground truth contains no negative pixel")

    uniq = np.unique(scores)[::-1]
    if uniq.size > max_thresholds:
        qs = np.linspace(0.0, 1.0, max_thresholds)
        thresholds = np.unique(np.quantile(scores, qs))[::-1]
    else:
        thresholds = uniq

    order = np.argsort(scores, kind="mergesort")[::-1]
    sorted_scores = scores[order]
    comp_sizes = np.asarray(comp_sizes, dtype=np.float64)
    hits = np.zeros(len(comp_sizes))
    fp = 0
    ptr = 0
    fprs = [0.0]
    pros = [0.0]
    for t in thresholds:
        while ptr < order.size and sorted_scores[ptr] >= t:
            pix = order[ptr]
            if negatives[pix]:
                fp += 1
            cid = comp_of_pixel[pix]
            if cid >= 0:
                hits[cid] += 1.0
            ptr += 1
        fprs.append(fp / n_neg)
        pros.append(float(np.mean(hits / comp_sizes)))

    fprs = np.asarray(fprs)
    pros = np.asarray(pros)
    area = 0.0
    for i in range(1, fprs.size):
        lo, hi = fprs[i - 1], fprs[i]
        if hi <= fpr_limit:
            area += 0.5 * (pros[i - 1] + pros[i]) * (hi - lo)
            if hi == fpr_limit:
                break
        else:
            if hi > lo:
                frac = (fpr_limit - lo) / (hi - lo)
                pro_at = pros[i - 1] + frac * (pros[i] - pros[i - 1])
                area += 0.5 * (pros[i - 1] + pro_at) * (fpr_limit - lo)
            break
    return area / fpr_limit


def summarize(image_scores, image_labels, score_maps, gt_masks, fpr_limit=0.3):
    """Bundle the three detection numbers into one report dict."""
    return {
        "image_auroc": auroc(image_scores, image_labels),
        "pixel_auroc": pixel_auroc(score_maps, gt_masks),
        "aupro": aupro(score_maps, gt_masks, fpr_limit=fpr_limit),
    }
