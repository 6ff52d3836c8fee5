# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: nearest-code search, EMA statistics, within-set kNN."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def nearest_codes(const double[:, ::1] z, const double[:, ::1] codebook):
    """Index and squared distance of the nearest codebook row for each row of z.

    Ties resolve to the lowest code index.
    """
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t k = codebook.shape[0]
    cdef Py_ssize_t d = z.shape[1]
    if codebook.shape[1] != d:
        raise ValueError(f"dimension mismatch: z has {d}, codebook has {codebook.shape[1]}")
    if k == 0:
        raise ValueError("empty codebook")
    idx_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, j, c
    cdef double acc, diff, best
    cdef long long best_j
    with nogil:
        for i in range(n):
            best = 0.0
            best_j = -1
            for j in range(k):
                acc = 0.0
                for c in range(d):
                    diff = z[i, c] - codebook[j, c]
                    acc = acc + diff * diff
                if best_j < 0 or acc < best:
                    best = acc
                    best_j = j
            idx[i] = best_j
            dist[i] = best
    return idx_arr, dist_arr


def code_statistics(const long long[::1] idx, const double[:, ::1] z, Py_ssize_t k):
    """Per-code assignment counts and summed assigned rows (EMA inputs)."""
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t d = z.shape[1]
    counts_arr = np.zeros(k, dtype=np.float64)
    sums_arr = np.zeros((k, d), dtype=np.float64)
    cdef double[::1] counts = counts_arr
    cdef double[:, ::1] sums = sums_arr
    cdef Py_ssize_t i, c
    cdef long long j
    for i in range(n):
        j = idx[i]
        if j < 0 or j >= k:
            raise IndexError(f"code index {j} out of range for {k} codes")
        counts[j] += 1.0
        for c in range(d):
            sums[j, c] += z[i, c]
    return counts_arr, sums_arr


def knn_within(const double[:, ::1] x, Py_ssize_t k):
    """k nearest other rows of x by Euclidean distance; ties by lower row index."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    if k < 1 or k > n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    out_arr = np.empty((n, k), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    cdef double[::1] dist = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j, c, m, pos
    cdef double acc, diff
    cdef long long[::1] order = np.empty(k, dtype=np.int64)
    cdef double[::1] best = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t filled
    for i in range(n):
        filled = 0
        for j in range(n):
            if j == i:
                continue
            acc = 0.0
            for c in range(d):
                diff = x[i, c] - x[j, c]
                acc = acc + diff * diff
            # insertion into the sorted top-k buffer; strict < keeps earlier rows first
            if filled < k:
                pos = filled
                filled += 1
            elif acc < best[k - 1]:
                pos = k - 1
            else:
                continue
            while pos > 0 and acc < best[pos - 1]:
                best[pos] = best[pos - 1]
                order[pos] = order[pos - 1]
                pos -= 1
            best[pos] = acc
            order[pos] = j
        for m in range(k):
            out[i, m] = order[m]
    return out_arr
