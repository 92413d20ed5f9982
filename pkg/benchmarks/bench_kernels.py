"""Time the numba kernels against their numpy twins.

Usage: ``python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]``.
Prints the best-of-``repeat`` wall time per kernel and path, and checks
that both paths agree (bit for bit for the random draws, to 1e-12
for the demeaned matrix).
"""
import argparse
import timeit

import numpy as np

from homophily_lab import kernels
from homophily_lab._accel import HAS_NUMBA
from homophily_lab.model import arrival_threshold


def cases(n):
    rng = np.random.default_rng(0)
    i = rng.integers(0, 5000, n).astype(np.int64)
    j = i + 1 + rng.integers(0, 5000, n).astype(np.int64)
    rep = np.zeros(n, dtype=np.int64)
    q = np.full(n, arrival_threshold(0.5, 1.0, 1.0, 0.25))
    mu = np.ones(n)
    X = rng.normal(size=(n, 4))
    # two fixed-effect dimensions, as for ego and alter
    codes = np.stack([rng.integers(0, max(2, n // 50), n), rng.integers(0, max(2, n // 80), n)]).astype(np.int64)
    counts = [np.bincount(g).astype(np.float64) for g in codes]
    return {
        "keyed_uniform": (kernels.keyed_uniform_numpy, kernels.keyed_uniform_numba, (7, rep, i, j, 0)),
        "draw_sides": (kernels.draw_sides_numpy, kernels.draw_sides_numba, (7, rep, i, j, 0.5, q, mu)),
        "demean_sweep": (_on_copy(kernels.demean_sweep_numpy), _on_copy(kernels.demean_sweep_numba),
                         (X, codes, counts)),
    }


def _on_copy(sweep):
    # sweeps work in place; return the demeaned copy for comparison
    def run(X, codes, counts):
        out = X.copy()
        sweep(out, codes, counts)
        return out
    return run


def same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    # uniforms and side draws must match bit for bit; demeaned floats may differ in summation order
    return all(np.allclose(x, y, rtol=0, atol=1e-12) if x.dtype == np.float64 and x.ndim == 2
               else np.array_equal(x, y) for x, y in zip(a, b))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=1_000_000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<15}{'numpy s':>10}{'numba s':>10}{'speedup':>9}  match")
    for name, (np_fn, nb_fn, fn_args) in cases(args.n).items():
        nb_fn(*fn_args)  # compile
        t_np = min(timeit.repeat(lambda: np_fn(*fn_args), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: nb_fn(*fn_args), number=1, repeat=args.repeat))
        ok = same(np_fn(*fn_args), nb_fn(*fn_args))
        print(f"{name:<15}{t_np:>10.4f}{t_nb:>10.4f}{t_np / t_nb:>8.1f}x  {ok}")


if __name__ == "__main__":
    main()
