"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best wall time per call for both backends and checks that
they agree on the result.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from vqaug import _kernels_py, kernels

try:
    from vqaug import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng: np.random.Generator):
    for n, k, d in [(1024, 64, 4), (8192, 256, 8), (8192, 1024, 16)]:
        z, book = rng.normal(size=(n, d)), rng.normal(size=(k, d))
        yield f"nearest_codes n={n} K={k} d={d}", "nearest_codes", (z, book)
    for n, k, d in [(8192, 64, 4), (65536, 1024, 16)]:
        idx, z = rng.integers(0, k, n), rng.normal(size=(n, d))
        yield f"code_statistics n={n} K={k} d={d}", "code_statistics", (idx, z, k)
    for n, d in [(500, 16), (2000, 32)]:
        yield f"knn_within n={n} d={d} k=5", "knn_within", (rng.random((n, d)), 5)


def best_time(fn, args, repeat: int) -> float:
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    opts = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'kernel':<38}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  agree")
    for name, fn, args in cases(np.random.default_rng(opts.seed)):
        # go through the public wrapper's argument coercion, then call each backend directly
        args = tuple(np.ascontiguousarray(a, dtype=np.int64 if a.dtype.kind == "i" else np.float64) if isinstance(a, np.ndarray) else a for a in args)
        t_py = best_time(getattr(_kernels_py, fn), args, opts.repeat)
        if compiled is None:
            print(f"{name:<38}{1e3 * t_py:>10.2f}{'-':>11}{'-':>9}  -")
            continue
        t_c = best_time(getattr(compiled, fn), args, opts.repeat)
        a, b = getattr(_kernels_py, fn)(*args), getattr(compiled, fn)(*args)
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        agree = all(np.allclose(u, v) for u, v in zip(a, b))
        print(f"{name:<38}{1e3 * t_py:>10.2f}{1e3 * t_c:>11.2f}{t_py / t_c:>8.1f}x  {agree}")
    print(f"active backend: {kernels.BACKEND}")


if __name__ == "__main__":
    main()
