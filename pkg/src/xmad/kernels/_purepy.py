"""Numpy fallback for the compiled distance kernels.

Every accumulation walks the coordinate axis sequentially (vectorized over
rows), which makes the results bitwise identical to the scalar loops in
_distcore.pyx and to a naive per-pair oracle.
"""

import numpy as np

# Cap on rows*bank_rows per chunk; chunking over queries never changes
# per-pair arithmetic.
_CHUNK_CELLS = 4_000_000


def dists_to_vector(points, vector, metric):
    n, d = points.shape
    if metric == 0:
        acc = np.zeros(n)
        tmp = np.empty(n)
        for j in range(d):
            np.subtract(points[:, j], vector[j], out=tmp)
            tmp *= tmp
            acc += tmp
        np.sqrt(acc, out=acc)
        return acc
    if metric == 1:
        acc = np.zeros(n)
        tmp = np.empty(n)
        for j in range(d):
            np.subtract(points[:, j], vector[j], out=tmp)
            np.abs(tmp, out=tmp)
            acc += tmp
        return acc
    dot = np.zeros(n)
    na2 = np.zeros(n)
    nb2 = 0.0
    for j in range(d):
        dot += points[:, j] * vector[j]
        na2 += points[:, j] * points[:, j]
        nb2 += vector[j] * vector[j]
    with np.errstate(invalid="ignore", divide="ignore"):
        return 1.0 - dot / (np.sqrt(na2) * np.sqrt(nb2))


def _dist_matrix(queries, bank, metric):
    q, d = queries.shape
    k = bank.shape[0]
    if metric == 2:
        dot = np.zeros((q, k))
        qa2 = np.zeros(q)
        kb2 = np.zeros(k)
        for j in range(d):
            dot += queries[:, j, None] * bank[None, :, j]
            qa2 += queries[:, j] * queries[:, j]
            kb2 += bank[:, j] * bank[:, j]
        with np.errstate(invalid="ignore", divide="ignore"):
            return 1.0 - dot / (np.sqrt(qa2)[:, None] * np.sqrt(kb2)[None, :])
    acc = np.zeros((q, k))
    tmp = np.empty((q, k))
    for j in range(d):
        np.subtract(queries[:, j, None], bank[None, :, j], out=tmp)
        if metric == 0:
            tmp *= tmp
        else:
            np.abs(tmp, out=tmp)
        acc += tmp
    if metric == 0:
        np.sqrt(acc, out=acc)
    return acc


def nn_scan(queries, bank, metric):
    q = queries.shape[0]
    k = bank.shape[0]
    dist_out = np.empty(q)
    idx_out = np.empty(q, dtype=np.int64)
    step = max(1, _CHUNK_CELLS // max(1, k))
    for lo in range(0, q, step):
        hi = min(q, lo + step)
        dmat = _dist_matrix(queries[lo:hi], bank, metric)
        idx = np.argmin(dmat, axis=1)
        dist_out[lo:hi] = dmat[np.arange(hi - lo), idx]
        idx_out[lo:hi] = idx
    return dist_out, idx_out
