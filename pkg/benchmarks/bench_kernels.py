"""Time the compiled and pure-Python kernel backends on registration-sized inputs.

Usage: python benchmarks/bench_kernels.py [--size 64] [--repeat 5]

Prints one line per kernel with the best-of-N time for each backend, the
speedup and the max absolute difference between the two outputs.
"""
import argparse
import time

import numpy as np

from fdreg import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b) if x is not None and x.dtype != bool)
    return float(np.max(np.abs(a - b)))


def cases(n, dtype):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((3, n, n, n)).astype(dtype)
    grid = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij")).reshape(3, -1)
    coords = (grid + rng.normal(0, 1.5, grid.shape)).astype(dtype)
    grad = rng.standard_normal((3, coords.shape[1])).astype(dtype)
    taps = np.exp(-np.arange(-6, 7) ** 2 / 8.0).astype(dtype)
    moments = rng.standard_normal((20, n, n, n)).astype(dtype)
    nout = len(range(1, n, 3))
    g = rng.standard_normal((20, n, nout, n)).astype(dtype)
    return {
        "trilinear_sample": lambda k: k.trilinear_sample(data, coords, False),
        "trilinear_sample(border)": lambda k: k.trilinear_sample(data, coords, True),
        "trilinear_adjoint": lambda k: k.trilinear_adjoint(data, coords, grad, True),
        "strided_correlate": lambda k: k.strided_correlate(moments, taps, 2, 3, 1),
        "strided_correlate_adjoint": lambda k: k.strided_correlate_adjoint(g, taps, 2, 3, 1, n),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = p.parse_args(argv)

    py = kernels.python_backend
    cy = kernels.cython_backend
    if cy is None:
        print("compiled backend not built; only the Python fallback is available")
        return 1
    print(f"size {args.size}^3, dtype {args.dtype}, best of {args.repeat}")
    print(f"{'kernel':28s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases(args.size, np.dtype(args.dtype)).items():
        t_cy, out_cy = best_of(lambda: fn(cy), args.repeat)
        t_py, out_py = best_of(lambda: fn(py), args.repeat)
        print(f"{name:28s} {t_cy * 1e3:10.2f} {t_py * 1e3:10.2f} {t_py / t_cy:8.1f} "
              f"{_maxdiff(out_cy, out_py):10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
