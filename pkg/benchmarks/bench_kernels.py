"""Compare the compiled and numpy kernel backends.

Times each kernel in isolation on random inputs, then a full backfitting
fit on a simulated sparse table with each backend swapped in, and checks
that both backends return the same fitted values.

Usage: python3 benchmarks/bench_kernels.py [--cells N] [--repeat R]
"""
import argparse
import time

import numpy as np

from hanova import _kernels
from hanova.evaluation import SimSpec, simulate
from hanova.solver import fit_hanova

NAMES = ("margin_sum", "block_update", "gather_add", "wpls_objective")


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(n, size, rng):
    key = rng.integers(0, size, n).astype(np.int64)
    w = rng.uniform(0.5, 2.0, n)
    y = rng.normal(size=n)
    mu = rng.normal(size=n)
    prior = rng.normal(size=n)
    u = np.bincount(key, weights=w * y, minlength=size)
    z = np.bincount(key, weights=w, minlength=size)
    beta = np.zeros(size)

    return {
        "margin_sum": lambda mod: mod.margin_sum(key, y, size),
        "block_update": lambda mod: mod.block_update(key, w, u, z, beta.copy(), mu.copy()),
        "gather_add": lambda mod: mod.gather_add(mu.copy(), u, key),
        "wpls_objective": lambda mod: mod.wpls_objective(y, w, mu, prior, 0.7),
    }


def with_backend(mod, fn):
    saved = {nm: getattr(_kernels, nm) for nm in NAMES}
    try:
        for nm in NAMES:
            setattr(_kernels, nm, getattr(mod, nm))
        return fn()
    finally:
        for nm, f in saved.items():
            setattr(_kernels, nm, f)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=1_000_000, help="array length for kernel timings")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = [("numpy", _kernels.python_backend)]
    if _kernels.compiled_backend is not None:
        backends.append(("cython", _kernels.compiled_backend))
    else:
        print("compiled kernels not built; timing the numpy backend only")

    rng = np.random.default_rng(0)
    cases = kernel_cases(args.cells, max(10, args.cells // 50), rng)
    print(f"{'kernel':<16}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'speedup':>10}")
    for nm, fn in cases.items():
        ts = [best_of(lambda: fn(mod), args.repeat) for _, mod in backends]
        speed = f"{ts[0] / ts[-1]:>9.2f}x" if len(ts) > 1 else ""
        print(f"{nm:<16}" + "".join(f"{t * 1e3:>10.2f}ms" for t in ts) + speed)

    inst = simulate(SimSpec((30, 30, 20, 10), (1.0, 0.7, 0.3, 0.0, 1.0), weights="ratio",
                            observation_rate=0.1, seed=1))
    table = inst.table
    lam = [0.5, 2.0, 5.0, 20.0]
    results = []
    print(f"\nfull fit: {len(table)} cells, 4 factors, orders 1..4")
    for name, mod in backends:
        t = best_of(lambda: with_backend(mod, lambda: fit_hanova(table, lam)), max(1, args.repeat // 2))
        fit = with_backend(mod, lambda: fit_hanova(table, lam))
        results.append(fit.fitted())
        sweeps = [f.sweeps for f in fit.order_fits]
        print(f"  {name:<8} {t:8.3f} s  sweeps {sweeps}")
    if len(results) > 1:
        print(f"  max |difference| between backends: {np.max(np.abs(results[0] - results[1])):.2e}")


if __name__ == "__main__":
    main()
