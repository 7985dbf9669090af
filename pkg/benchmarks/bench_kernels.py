"""Compare the compiled and numpy Uniform-convolved-Normal score kernels.

Run: python benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from thermobound import kernels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=0.05, help="noise std of the marginal")
    args = ap.parse_args(argv)

    x = np.random.default_rng(0).uniform(-1.0, 2.0, size=args.n)
    impls = {"numpy": kernels.python_impl}
    if kernels.compiled_impl is not None:
        impls["cython"] = kernels.compiled_impl
    else:
        print("compiled extension not built; timing the numpy kernel only")

    ref = kernels.python_impl.uniform_score_terms(x, args.scale)
    times = {}
    for name, mod in impls.items():
        out = mod.uniform_score_terms(x, args.scale)
        err = max(float(np.max(np.abs(out[0] - ref[0]))), float(np.max(np.abs(out[1] - ref[1]))))
        best = min(timeit.repeat(lambda: mod.uniform_score_terms(x, args.scale), number=1, repeat=args.repeat))
        times[name] = best
        print(f"{name:>7}: {best * 1e3:8.2f} ms for {args.n} points ({args.n / best / 1e6:6.1f} Mpts/s), "
              f"max |diff vs numpy| = {err:.2e}")
    if "cython" in times:
        print(f"speed-up: {times['numpy'] / times['cython']:.2f}x")


if __name__ == "__main__":
    main()
