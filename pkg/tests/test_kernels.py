import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from h2kit import _kernels_py, kernels

BACKENDS = kernels.available_backends()


def impl(name):
    prev = kernels.BACKEND
    kernels.use_backend(name)
    return prev


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = impl(request.param)
    yield request.param
    kernels.use_backend(prev)


def test_python_backend_always_available():
    assert "python" in BACKENDS
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


shapes = st.tuples(st.integers(0, 6), st.integers(1, 9), st.integers(0, 7), st.integers(1, 4))


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2**32 - 1))
def test_batched_products_match_numpy(shape, seed):
    b, m, k, nv = shape
    r = np.random.default_rng(seed)
    A = r.standard_normal((b, m, k))
    X = r.standard_normal((b, m, nv))
    Y = r.standard_normal((b, k, nv))
    for name in BACKENDS:
        prev = impl(name)
        try:
            assert np.allclose(kernels.batched_tn(A, X), np.matmul(A.transpose(0, 2, 1), X), atol=1e-12)
            assert np.allclose(kernels.batched_nn(A, Y), np.matmul(A, Y), atol=1e-12)
        finally:
            kernels.use_backend(prev)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_scatter_matches_sequential(n, n_dest, seed):
    r = np.random.default_rng(seed)
    idx = r.integers(0, n_dest, n)
    grp = r.integers(0, 4, n)
    src = r.standard_normal((n, 3, 2))
    ref = np.zeros((n_dest, 3, 2))
    for g in range(4):
        for i in np.flatnonzero(grp == g):
            ref[idx[i]] += src[i]
    for name in BACKENDS:
        prev = impl(name)
        try:
            out = kernels.scatter_add_ordered(np.zeros((n_dest, 3, 2)), idx, src, grp)
            assert np.array_equal(out, ref)
        finally:
            kernels.use_backend(prev)


def test_pairwise_distance(backend, rng):
    X, Y = rng.standard_normal((3, 5, 2)), rng.standard_normal((3, 4, 2))
    ref = np.linalg.norm(X[:, :, None, :] - Y[:, None, :, :], axis=-1)
    assert np.allclose(kernels.pairwise_distance(X, Y), ref, atol=1e-14)


def test_backend_deterministic(backend, rng):
    A, X = rng.standard_normal((50, 64, 16)), rng.standard_normal((50, 64, 4))
    assert np.array_equal(kernels.batched_tn(A, X), kernels.batched_tn(A, X))


def test_fallback_module_is_pure_numpy():
    assert _kernels_py.__file__.endswith(".py")
