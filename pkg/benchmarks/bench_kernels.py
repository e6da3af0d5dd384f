"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 3]

Each kernel is called once per backend before timing so JIT compilation is
excluded; the outputs of both backends are compared as a sanity check.
"""
import argparse
import time

import numpy as np

from cocyclelab import _kernels as K


def cases(rng):
    mats3 = np.linalg.qr(rng.standard_normal((4, 3, 3)))[0] @ np.diag([2.0, 1.0, 0.5])
    idx = rng.integers(0, 4, size=(32, 20_000))
    letters = rng.integers(0, 4, size=(2000, 400))
    yield "qr_sweep d=3, 32 x 2e4", lambda b: K.qr_sweep(mats3, idx, backend=b)[0]
    yield "product d=3, 32 x 2e4", lambda b: K.product(mats3, idx, backend=b)[1]
    yield "free_walk F2, 2000 x 400", lambda b: K.free_walk(letters, backend=b)[1]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<28}{'numba s':>10}{'numpy s':>10}{'speedup':>9}")
    for name, fn in cases(np.random.default_rng(0)):
        a, b = fn("numba"), fn("numpy")
        np.testing.assert_allclose(a, b, rtol=1e-9)
        tn = best_of(lambda: fn("numba"), args.repeat)
        tp = best_of(lambda: fn("numpy"), args.repeat)
        print(f"{name:<28}{tn:>10.4f}{tp:>10.4f}{tp / tn:>8.1f}x")


if __name__ == "__main__":
    main()
