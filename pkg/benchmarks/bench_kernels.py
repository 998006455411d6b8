"""Compiled vs numpy mean-field kernels.

    python benchmarks/bench_kernels.py [--patches 64 256 512] [--repeat 5]
"""
import argparse
import statistics
import time

import numpy as np

from crfgan import _kernels_py

try:
    from crfgan import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def make_problem(n, batch, dim, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(batch, n))
    x = rng.normal(size=(batch, n, dim))
    d2 = ((x[:, :, None, :] - x[:, None, :, :]) ** 2).sum(-1)
    K = np.exp(-d2 / (2.0 * dim))
    for k in K:
        np.fill_diagonal(k, 0.0)
    return a, K, rng.normal(size=(batch, n))


def time_backend(mod, a, K, g, sweeps, repeat):
    fwd, bwd = [], []
    for _ in range(repeat):
        t0 = time.perf_counter()
        q, _, hist = mod.meanfield_forward(a, K, 0.01, sweeps)
        t1 = time.perf_counter()
        mod.meanfield_backward(K, 0.01, q, hist, g)
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
    return statistics.median(fwd), statistics.median(bwd)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--patches", type=int, nargs="+", default=[64, 256, 512])
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--sweeps", type=int, default=5)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()

    backends = [("numpy", _kernels_py)] + ([("cython", _kernels_c)] if _kernels_c else [])
    if _kernels_c is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'N':>5} {'backend':>8} {'forward ms':>11} {'backward ms':>12} {'speedup':>8}")
    for n in args.patches:
        a, K, g = make_problem(n, args.batch, args.dim, seed=n)
        base = None
        for name, mod in backends:
            f, b = time_backend(mod, a, K, g, args.sweeps, args.repeat)
            base = base or f + b
            print(f"{n:>5} {name:>8} {1e3 * f:>11.2f} {1e3 * b:>12.2f} {base / (f + b):>7.1f}x")
        if _kernels_c is not None:
            qp = _kernels_py.meanfield_forward(a, K, 0.01, args.sweeps)[0]
            qc = _kernels_c.meanfield_forward(a, K, 0.01, args.sweeps)[0]
            assert np.allclose(qp, qc, atol=1e-12), "backends disagree"


if __name__ == "__main__":
    main()
