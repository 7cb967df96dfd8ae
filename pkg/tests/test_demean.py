import numpy as np
import pytest

import geppml._demean_py as demean_py
from geppml.demean import HAVE_COMPILED, demean_columns


def _problem(seed, n=800, k=3, dims=(11, 6, 9)):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5.0, size=(n, k))
    w = rng.uniform(0.1, 4.0, size=n)
    codes = np.column_stack([rng.integers(0, d, size=n) for d in dims]).astype(np.int64)
    return x, w, codes, np.array(dims, dtype=np.int64)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_group_means_removed(seed):
    x, w, codes, dims = _problem(seed)
    out, _ = demean_columns(x, w, codes, dims, tol=1e-12)
    for d in range(codes.shape[1]):
        wsum = np.bincount(codes[:, d], weights=w, minlength=dims[d])
        for c in range(x.shape[1]):
            means = np.bincount(codes[:, d], weights=w * out[:, c], minlength=dims[d]) / wsum
            assert np.max(np.abs(means)) < 1e-10


def test_idempotent():
    x, w, codes, dims = _problem(3)
    once, _ = demean_columns(x, w, codes, dims, tol=1e-13)
    twice, _ = demean_columns(once, w, codes, dims, tol=1e-13)
    assert np.allclose(once, twice, rtol=0, atol=1e-12)


def test_input_not_mutated():
    x, w, codes, dims = _problem(4)
    x_orig = x.copy()
    demean_columns(x, w, codes, dims)
    assert np.array_equal(x, x_orig)


def test_single_dimension_exact():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(200, 2))
    w = rng.uniform(0.5, 2.0, size=200)
    codes = rng.integers(0, 7, size=(200, 1)).astype(np.int64)
    out, sweeps = demean_columns(x, w, codes, np.array([7], dtype=np.int64))
    assert sweeps <= 2
    wsum = np.bincount(codes[:, 0], weights=w, minlength=7)
    means = np.bincount(codes[:, 0], weights=w * out[:, 0], minlength=7) / wsum
    assert np.max(np.abs(means)) < 1e-14


def test_sweep_budget_exhausted():
    x, w, codes, dims = _problem(6)
    with pytest.raises(RuntimeError, match="sweeps"):
        demean_columns(x, w, codes, dims, tol=1e-12, max_sweeps=1)


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled kernel unavailable")
def test_backends_agree_bitwise():
    x, w, codes, dims = _problem(7)
    compiled, s_c = demean_columns(x, w, codes, dims, tol=1e-11)
    buf = np.ascontiguousarray(x, dtype=np.float64).copy()
    s_p = demean_py.demean(buf, w, codes, dims, 1e-11, 100_000)
    assert s_c == s_p
    assert np.array_equal(compiled, buf)
