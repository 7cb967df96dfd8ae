"""Pure NumPy fallback for the weighted alternating demeaning kernel.

Mirrors ``geppml._demean`` exactly: ``np.bincount`` accumulates in
observation order, the same order the compiled loop uses, so results of
the two backends coincide to the last bit.
"""

import numpy as np


def demean(x, w, codes, n_levels, tol, max_sweeps):
    """Sweep weighted group means out of every column of ``x`` in place.

    Same contract as the compiled kernel: returns the sweep count,
    raises RuntimeError if ``max_sweeps`` is exhausted.
    """
    n, k = x.shape
    d = codes.shape[1]
    wsum = [np.bincount(codes[:, j], weights=w, minlength=n_levels[j]) for j in range(d)]
    scales = np.maximum(1.0, np.max(np.abs(x), axis=0)) if n else np.ones(k)

    delta = np.inf
    for sweep in range(1, max_sweeps + 1):
        delta = 0.0
        for j in range(d):
            cj = codes[:, j]
            means = np.empty((n_levels[j], k))
            for c in range(k):
                sums = np.bincount(cj, weights=w * x[:, c], minlength=n_levels[j])
                means[:, c] = sums / wsum[j]
            delta = max(delta, float(np.max(np.abs(means) / scales)))
            x -= means[cj]
        if delta <= tol:
            return sweep

    raise RuntimeError(
        f"demeaning did not reach tol={tol:g} within {max_sweeps} sweeps "
        f"(last relative mean {delta:g})"
    )
