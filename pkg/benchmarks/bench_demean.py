"""Benchmark the demeaning kernel: compiled extension vs NumPy fallback.

The alternating weighted demeaning inside IRLS is the hot loop of the
whole pipeline (it runs once per IRLS step, per fit, per GE iteration),
so this is the comparison that matters.

Usage: python benchmarks/bench_demean.py [--repeats 5]
"""

import argparse
import time

import numpy as np

import geppml._demean_py as demean_py
from geppml import FeSpec, fit_ppml, synth_world
from geppml.demean import HAVE_COMPILED

try:
    import geppml._demean as demean_c
except ImportError:
    demean_c = None


def kernel_case(n_obs, n_cols, level_sizes, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_obs, n_cols))
    w = rng.uniform(0.2, 5.0, size=n_obs)
    codes = np.column_stack(
        [rng.integers(0, size, size=n_obs) for size in level_sizes]
    ).astype(np.int64)
    return x, w, codes, np.asarray(level_sizes, dtype=np.int64)


def time_kernel(mod, x, w, codes, sizes, repeats):
    best = np.inf
    for _ in range(repeats):
        buf = x.copy()
        t0 = time.perf_counter()
        mod.demean(buf, w, codes, sizes, 1e-10, 100_000)
        best = min(best, time.perf_counter() - t0)
    return best


def time_fit(n_countries, years, repeats):
    panel, truth = synth_world(n_countries, years, 0.4, 7.0, seed=3, noise_cv=0.2)
    pairs = panel.pair_labels()
    latest = max(panel.years)
    fes = [
        FeSpec("exporter-year", list(zip(panel.exporter, panel.year)), (truth.reference, latest)),
        FeSpec("importer-year", list(zip(panel.importer, panel.year)), (truth.reference, latest)),
        FeSpec("pair", pairs),
    ]
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fit_ppml(panel.flow, covariates={"FTA": panel.fta.astype(float)}, fes=fes)
        best = min(best, time.perf_counter() - t0)
    return panel.n_obs, best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if demean_c is None:
        print("compiled kernel unavailable; showing the fallback only\n")

    print(f"{'kernel case':<38} {'compiled':>10} {'numpy':>10} {'speedup':>8}")
    cases = [
        (5_000, 2, (40, 40, 400)),
        (50_000, 2, (120, 120, 3_600)),
        (200_000, 5, (300, 300, 10_000)),
    ]
    for n_obs, n_cols, sizes in cases:
        x, w, codes, nl = kernel_case(n_obs, n_cols, sizes)
        t_py = time_kernel(demean_py, x, w, codes, nl, args.repeats)
        label = f"n={n_obs:,} cols={n_cols} dims={list(sizes)}"
        if demean_c is not None:
            t_c = time_kernel(demean_c, x, w, codes, nl, args.repeats)
            print(f"{label:<38} {t_c*1e3:9.2f}ms {t_py*1e3:9.2f}ms {t_py/t_c:7.1f}x")
        else:
            print(f"{label:<38} {'-':>10} {t_py*1e3:9.2f}ms {'-':>8}")

    print(f"\nend-to-end three-way PPML fit (backend: {'compiled' if HAVE_COMPILED else 'numpy'})")
    for n_countries, years in [(15, [1990, 1994, 1998]), (30, [1990, 1994, 1998])]:
        n_obs, t = time_fit(n_countries, years, max(1, args.repeats // 2))
        print(f"  {n_countries} countries x {len(years)} years ({n_obs:,} obs): {t*1e3:.1f} ms")


if __name__ == "__main__":
    main()
