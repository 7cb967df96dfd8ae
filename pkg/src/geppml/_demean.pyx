# cython: language_level=3
"""Compiled kernel for weighted alternating within-group demeaning.

Semantics must stay identical to ``geppml._demean_py`` (the pure NumPy
fallback): both accumulate group sums in observation order, so the two
backends agree bit-for-bit on the same inputs.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def demean(double[:, ::1] x, double[::1] w, long long[:, ::1] codes,
           long long[::1] n_levels, double tol, int max_sweeps):
    """Sweep weighted group means out of every column of ``x`` in place.

    Alternates over the fixed-effect dimensions in ``codes`` until the
    largest subtracted group mean falls below ``tol`` relative to the
    initial column scale. Returns the number of sweeps used; raises
    RuntimeError when ``max_sweeps`` is exhausted.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t k = x.shape[1]
    cdef Py_ssize_t d = codes.shape[1]
    cdef Py_ssize_t max_l = 0
    cdef Py_ssize_t i, j, c, g, sweep
    cdef double m, delta, scale

    for j in range(d):
        if n_levels[j] > max_l:
            max_l = n_levels[j]

    sums_arr = np.zeros((max_l, k), dtype=np.float64)
    wsum_arr = np.zeros((d, max_l), dtype=np.float64)
    scale_arr = np.empty(k, dtype=np.float64)
    cdef double[:, ::1] sums = sums_arr
    cdef double[:, ::1] wsum = wsum_arr
    cdef double[::1] scales = scale_arr

    # group weight totals are fixed for the whole call
    for j in range(d):
        for i in range(n):
            wsum[j, codes[i, j]] += w[i]

    for c in range(k):
        scale = 1.0
        for i in range(n):
            m = x[i, c]
            if m < 0:
                m = -m
            if m > scale:
                scale = m
        scales[c] = scale

    for sweep in range(1, max_sweeps + 1):
        delta = 0.0
        for j in range(d):
            for g in range(n_levels[j]):
                for c in range(k):
                    sums[g, c] = 0.0
            for i in range(n):
                g = codes[i, j]
                for c in range(k):
                    sums[g, c] += w[i] * x[i, c]
            for g in range(n_levels[j]):
                for c in range(k):
                    m = sums[g, c] / wsum[j, g]
                    sums[g, c] = m
                    if m < 0:
                        m = -m
                    m = m / scales[c]
                    if m > delta:
                        delta = m
            for i in range(n):
                g = codes[i, j]
                for c in range(k):
                    x[i, c] -= sums[g, c]
        if delta <= tol:
            return sweep

    raise RuntimeError(
        f"demeaning did not reach tol={tol:g} within {max_sweeps} sweeps "
        f"(last relative mean {delta:g})"
    )
