# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled brute-force distance kernels.

Accumulation runs sequentially over the coordinate axis, matching the numpy
fallback in xmad.kernels._purepy bit for bit. Metric codes: 0 = l2, 1 = l1,
2 = cosine. Cosine against a zero vector yields nan (0/0); callers turn that
into an error.
"""

from libc.math cimport INFINITY, fabs, sqrt

import numpy as np


def dists_to_vector(const double[:, ::1] points, const double[::1] vector, int metric):
    """Distances from every row of `points` to `vector`, shape (n,)."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double s, diff, dot, na2, nb2, nb

    with nogil:
        if metric == 0:
            for i in range(n):
                s = 0.0
                for j in range(d):
                    diff = points[i, j] - vector[j]
                    s += diff * diff
                out[i] = sqrt(s)
        elif metric == 1:
            for i in range(n):
                s = 0.0
                for j in range(d):
                    s += fabs(points[i, j] - vector[j])
                out[i] = s
        else:
            nb2 = 0.0
            for j in range(d):
                nb2 += vector[j] * vector[j]
            nb = sqrt(nb2)
            for i in range(n):
                dot = 0.0
                na2 = 0.0
                for j in range(d):
                    dot += points[i, j] * vector[j]
                    na2 += points[i, j] * points[i, j]
                out[i] = 1.0 - dot / (sqrt(na2) * nb)
    return out_arr


def nn_scan(const double[:, ::1] queries, const double[:, ::1] bank, int metric):
    """Nearest bank row per query: (distances (q,), indices (q,) int64).

    Ties keep the lowest bank index (strict < comparison).
    """
    cdef Py_ssize_t q = queries.shape[0]
    cdef Py_ssize_t k = bank.shape[0]
    cdef Py_ssize_t d = queries.shape[1]
    dist_arr = np.empty(q, dtype=np.float64)
    idx_arr = np.empty(q, dtype=np.int64)
    cdef double[::1] dist_out = dist_arr
    cdef long long[::1] idx_out = idx_arr
    norm_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] bank_norm = norm_arr
    cdef Py_ssize_t i, j, t
    cdef double s, diff, best, dot, qa2, qa, val
    cdef Py_ssize_t best_idx

    with nogil:
        if metric == 2:
            for t in range(k):
                s = 0.0
                for j in range(d):
                    s += bank[t, j] * bank[t, j]
                bank_norm[t] = sqrt(s)
        for i in range(q):
            best = INFINITY
            best_idx = 0
            if metric == 0:
                for t in range(k):
                    s = 0.0
                    for j in range(d):
                        diff = queries[i, j] - bank[t, j]
                        s += diff * diff
                    val = sqrt(s)
                    if val < best:
                        best = val
                        best_idx = t
            elif metric == 1:
                for t in range(k):
                    s = 0.0
                    for j in range(d):
                        s += fabs(queries[i, j] - bank[t, j])
                    if s < best:
                        best = s
                        best_idx = t
            else:
                qa2 = 0.0
                for j in range(d):
                    qa2 += queries[i, j] * queries[i, j]
                qa = sqrt(qa2)
                for t in range(k):
                    dot = 0.0
                    for j in range(d):
                        dot += queries[i, j] * bank[t, j]
                    val = 1.0 - dot / (qa * bank_norm[t])
                    if val < best:
                        best = val
                        best_idx = t
            dist_out[i] = best
            idx_out[i] = best_idx
    return dist_arr, idx_arr
