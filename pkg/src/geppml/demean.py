"""Backend selection for the demeaning kernel.

The compiled Cython kernel is preferred; the NumPy implementation is the
fallback when the extension is unavailable or when the environment
variable ``GEPPML_PURE_PYTHON`` is set to a non-empty value. Both
backends implement the same contract and produce identical results.
"""

import os

import numpy as np

if os.environ.get("GEPPML_PURE_PYTHON"):
    from . import _demean_py as _kernel

    HAVE_COMPILED = False
else:
    try:
        from . import _demean as _kernel  # type: ignore[attr-defined]

        HAVE_COMPILED = True
    except ImportError:
        from . import _demean_py as _kernel

        HAVE_COMPILED = False

BACKEND = "compiled" if HAVE_COMPILED else "python"


def demean_columns(x, w, codes, n_levels, tol=1e-10, max_sweeps=100_000):
    """Residualize the columns of ``x`` on the fixed-effect groups.

    Parameters
    ----------
    x : (n, k) float array
        Columns to demean. Not modified; a copy is returned.
    w : (n,) float array
        Strictly positive observation weights.
    codes : (n, d) int64 array
        Integer group codes, one column per fixed-effect dimension.
    n_levels : (d,) int64 array
        Number of groups in each dimension.
    tol : float
        Convergence tolerance on subtracted group means, relative to the
        initial column scale.

    Returns
    -------
    (out, sweeps) : demeaned copy of ``x`` and the sweep count.
    """
    out = np.ascontiguousarray(x, dtype=np.float64).copy()
    if out.ndim != 2:
        raise ValueError("x must be 2-dimensional")
    w = np.ascontiguousarray(w, dtype=np.float64)
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    n_levels = np.ascontiguousarray(n_levels, dtype=np.int64)
    sweeps = _kernel.demean(out, w, codes, n_levels, float(tol), int(max_sweeps))
    return out, sweeps
