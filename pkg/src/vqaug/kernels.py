"""Hot-loop kernels, compiled when available.

The Cython extension ``vqaug._kernels`` is used if it was built; otherwise the
numpy versions in ``vqaug._kernels_py`` are used. Set ``VQAUG_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the implementation in use.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_compiled = None
if not os.environ.get("VQAUG_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled  # type: ignore[no-redef]
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _kernels_py


def nearest_codes(z: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(indices, squared_distances)`` of the nearest code per row."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    codebook = np.ascontiguousarray(codebook, dtype=np.float64)
    if z.ndim != 2 or codebook.ndim != 2:
        raise ValueError("nearest_codes expects 2-D arrays")
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    return _impl.nearest_codes(z, codebook)


def code_statistics(idx: np.ndarray, z: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Return per-code counts and per-code sums of the rows assigned to each code."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    return _impl.code_statistics(idx, z, int(k))


def knn_within(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other rows for every row of ``x``."""
    return _impl.knn_within(np.ascontiguousarray(x, dtype=np.float64), int(k))


def pure_python():
    """The numpy fallback module, regardless of which backend is active."""
    return _kernels_py
