# cython: boundscheck=False, wraparound=False, cdivision=True
"""Brute-force nearest-neighbor kernels over 3D point sets.

Exact squared Euclidean distances, ties broken by lower reference index.
The pure-Python fallback in ``_kernels_py`` implements the same contract;
``kernels`` picks whichever is importable.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

COMPILED = True


def nn1(cnp.float64_t[:, ::1] query, cnp.float64_t[:, ::1] ref):
    """For each query point return (index, squared distance) of its nearest
    reference point. Ties resolve to the lowest reference index."""
    cdef Py_ssize_t n = query.shape[0]
    cdef Py_ssize_t m = ref.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d2 = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, d, best
    cdef Py_ssize_t best_j
    for i in range(n):
        best = -1.0
        best_j = -1
        for j in range(m):
            dx = query[i, 0] - ref[j, 0]
            dy = query[i, 1] - ref[j, 1]
            dz = query[i, 2] - ref[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if best_j < 0 or d < best:
                best = d
                best_j = j
        idx[i] = best_j
        d2[i] = best
    return idx, d2


def knn(cnp.float64_t[:, ::1] query, cnp.float64_t[:, ::1] ref, Py_ssize_t k):
    """k nearest reference points per query point, sorted by (distance, index).

    Returns (idx, d2) of shape (n, k). Requires k <= len(ref)."""
    cdef Py_ssize_t n = query.shape[0]
    cdef Py_ssize_t m = ref.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds reference size {m}")
    cdef cnp.ndarray[cnp.int64_t, ndim=2] idx = np.empty((n, k), dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d2 = np.empty((n, k), dtype=np.float64)
    cdef Py_ssize_t i, j, h, p
    cdef double dx, dy, dz, d
    cdef Py_ssize_t filled
    for i in range(n):
        filled = 0
        for j in range(m):
            dx = query[i, 0] - ref[j, 0]
            dy = query[i, 1] - ref[j, 1]
            dz = query[i, 2] - ref[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if filled == k and d >= d2[i, k - 1]:
                # equal distance cannot displace: existing entry has lower index
                continue
            # insertion sort into the current k-best list
            h = filled if filled < k else k - 1
            while h > 0 and d < d2[i, h - 1]:
                if h < k:
                    d2[i, h] = d2[i, h - 1]
                    idx[i, h] = idx[i, h - 1]
                h -= 1
            if h < k:
                d2[i, h] = d
                idx[i, h] = j
            if filled < k:
                filled += 1
    return idx, d2


def chamfer_sums(cnp.float64_t[:, ::1] a, cnp.float64_t[:, ::1] b):
    """Directional nearest-neighbor sums: (sum over a of min d2 to b,
    sum over b of min d2 to a)."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, d, best
    cdef double sum_ab = 0.0, sum_ba = 0.0
    for i in range(n):
        best = -1.0
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if best < 0.0 or d < best:
                best = d
        sum_ab += best
    for j in range(m):
        best = -1.0
        for i in range(n):
            dx = b[j, 0] - a[i, 0]
            dy = b[j, 1] - a[i, 1]
            dz = b[j, 2] - a[i, 2]
            d = dx * dx + dy * dy + dz * dz
            if best < 0.0 or d < best:
                best = d
        sum_ba += best
    return sum_ab, sum_ba
