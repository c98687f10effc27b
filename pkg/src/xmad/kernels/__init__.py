"""Distance kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when importable; set XMAD_PURE_KERNELS=1
to force the numpy path (used by the benchmark and backend-parity tests).
Both backends are bitwise interchangeable.
"""

import os

import numpy as np

from . import _purepy

try:
    from . import _distcore as _native
except ImportError:
    _native = None

if _native is None or os.environ.get("XMAD_PURE_KERNELS", "") not in ("", "0"):
    _impl = _purepy
    BACKEND = "python"
else:
    _impl = _native
    BACKEND = "native"

METRICS = ("l2", "l1", "cosine")
_METRIC_CODES = {"l2": 0, "l1": 1, "cosine": 2}


def metric_code(metric):
    try:
        return _METRIC_CODES[metric]
    except KeyError:
        raise ValueError(
            f"unknown metric {metric!r}; valid options: {', '.join(METRICS)}"
        ) from None


def _as_matrix(arr, name):
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {out.shape}")
    return out


def _reject_zero_rows(arr, what):
    if arr.size == 0 or not np.all(np.any(arr != 0.0, axis=-1)):
        raise ValueError(f"cosine distance is undefined for zero vectors ({what})")


def dists_to_vector(points, vector, metric="l2"):
    """Distance from every row of `points` to `vector` under `metric`.

    Cosine distance is undefined for zero vectors and raises ValueError.
    """
    code = metric_code(metric)
    pts = _as_matrix(points, "points")
    vec = np.ascontiguousarray(vector, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != pts.shape[1]:
        raise ValueError(
            f"vector shape {vec.shape} does not match points dim {pts.shape[1]}"
        )
    if code == 2:
        _reject_zero_rows(pts, "points")
        _reject_zero_rows(vec, "vector")
    return _impl.dists_to_vector(pts, vec, code)


def nn_scan(queries, bank, metric="l2"):
    """Nearest bank row per query row: (distances, int64 indices).

    Ties resolve to the lowest bank index.
    """
    code = metric_code(metric)
    qs = _as_matrix(queries, "queries")
    bk = _as_matrix(bank, "bank")
    if qs.shape[1] != bk.shape[1]:
        raise ValueError(
            f"query dim {qs.shape[1]} does not match bank dim {bk.shape[1]}"
        )
    if bk.shape[0] == 0:
        raise ValueError("bank must contain at least one row")
    if code == 2:
        _reject_zero_rows(qs, "queries")
        _reject_zero_rows(bk, "bank")
    return _impl.nn_scan(qs, bk, code)
