"""Numpy implementations of the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

import numpy as np


def nearest_codes(z: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.ascontiguousarray(z, dtype=np.float64)
    codebook = np.ascontiguousarray(codebook, dtype=np.float64)
    if codebook.shape[1] != z.shape[1]:
        raise ValueError(
            f"dimension mismatch: z has {z.shape[1]}, codebook has {codebook.shape[1]}"
        )
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    # chunked so the (rows, codes, dim) temporary stays small
    n = z.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    step = max(1, 2**20 // max(1, codebook.size))
    for start in range(0, n, step):
        diff = z[start:start + step, None, :] - codebook[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        # argmin returns the first minimum, i.e. the lowest code index on ties
        j = np.argmin(d2, axis=1)
        idx[start:start + step] = j
        dist[start:start + step] = d2[np.arange(len(j)), j]
    return idx, dist


def code_statistics(idx: np.ndarray, z: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise IndexError(f"code index out of range for {k} codes")
    counts = np.bincount(idx, minlength=k).astype(np.float64)
    sums = np.zeros((k, z.shape[1]), dtype=np.float64)
    np.add.at(sums, idx, z)
    return counts, sums


def knn_within(x: np.ndarray, k: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    diff = x[:, None, :] - x[None, :, :]
    d2 = np.einsum("ijd,ijd->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps the lower row index first among equal distances
    return np.argsort(d2, axis=1, kind="stable")[:, :k].astype(np.int64)
