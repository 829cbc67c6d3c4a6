"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from cdcl.kernels import load_backend


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def cases(rng):
    for B in (32, 64, 256):
        Z = unit_rows(rng, 2 * B, 16)
        labels = rng.integers(0, 4, 2 * B)
        mask = np.ones((2 * B, 2 * B), dtype=np.uint8)
        mask[:B, :B] = mask[B:, B:] = 0
        yield f"contrastive_rows B={B}", "contrastive_rows", (Z @ Z.T, labels, labels, mask, 0.05)
    for N, M in ((400, 4), (2000, 12), (10000, 12)):
        Z, C = unit_rows(rng, N, 16), unit_rows(rng, M, 16)
        yield f"spherical_kmeans N={N} M={M}", "spherical_kmeans", (Z, C, 100, 0.0)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    py = load_backend("python")
    try:
        cy = load_backend("cython")
    except ImportError:
        print("compiled kernels not built; only the fallback is timed")
        cy = None
    print(f"{'case':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn, argv in cases(np.random.default_rng(0)):
        t_py = min(timeit.repeat(lambda: getattr(py, fn)(*argv), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:32s} {t_py:10.3f}")
            continue
        t_cy = min(timeit.repeat(lambda: getattr(cy, fn)(*argv), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
