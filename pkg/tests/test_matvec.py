import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from h2kit.construct import kernel_matrix
from h2kit.geometry import StructureError
from h2kit.h2core import BasisTree, CouplingLevel, VectorTree, expand_basis, to_dense, to_leaf_layout
from h2kit.matvec import (dense_multiply, downsweep, h2_matvec, h2_sampled_error, matvec_flops, tree_multiply,
                          upsweep)

from conftest import exp2d, rel


def random_basis(rng, q, m, k):
    return BasisTree(rng.standard_normal((2**q, m, k)), [None] + [rng.standard_normal((2**l, k, k))
                                                               for l in range(1, q + 1)])


def test_upsweep_zero_input(rng):
    B = random_basis(rng, 2, 5, 3)
    xh = upsweep(B, np.zeros((4, 5, 2)))
    assert all(not np.any(xh[l]) for l in range(3))


def test_upsweep_identity_leaf(rng):
    B = BasisTree(np.eye(4)[None], [None])
    x = rng.standard_normal((1, 4, 2))
    assert np.array_equal(upsweep(B, x)[0], x)


def test_upsweep_matches_expanded_basis(rng):
    B = random_basis(rng, 2, 6, 3)
    x = rng.standard_normal((4, 6, 2))
    xh = upsweep(B, x)
    for level in range(3):
        E = expand_basis(B, level)
        ref = np.matmul(E.transpose(0, 2, 1), x.reshape(2**level, -1, 2))
        assert np.allclose(xh[level], ref, rtol=1e-13, atol=1e-13)


def test_upsweep_shape_mismatch(rng):
    with pytest.raises(StructureError):
        upsweep(random_basis(rng, 2, 6, 3), np.zeros((4, 5, 1)))


def test_tree_multiply_empty_and_single(rng):
    k = 3
    empty = [CouplingLevel.empty(k, k) for _ in range(3)]
    xh = VectorTree([rng.standard_normal((2**l, k, 1)) for l in range(3)])
    yh = tree_multiply(empty, xh)
    assert all(not np.any(yh[l]) for l in range(3))
    S = rng.standard_normal((1, k, k))
    one = list(empty)
    one[2] = CouplingLevel([1], [3], S)
    y2 = tree_multiply(one, xh)[2]
    assert np.allclose(y2[1], S[0] @ xh[2][3]) and not np.any(np.delete(y2, 1, axis=0))


def test_tree_multiply_matches_naive_loop():
    A = exp2d(2048)[0]
    rng = np.random.default_rng(5)
    xh = upsweep(A.V, rng.standard_normal((A.V.leaves.shape[0], A.leaf_size, 2)))
    yh = tree_multiply(A.couplings, xh)
    for level, c in enumerate(A.couplings):
        ref = np.zeros_like(yh[level])
        for t, s, S in zip(c.rows, c.cols, c.blocks):
            ref[t] += S @ xh[level][s]
        assert np.allclose(yh[level], ref, rtol=1e-13, atol=1e-13 * np.abs(ref).max())


def test_downsweep_zero_and_root_only(rng):
    B = random_basis(rng, 1, 4, 2)
    zero = VectorTree([np.zeros((1, 2, 1)), np.zeros((2, 2, 1))])
    assert not np.any(downsweep(B, zero))
    root = rng.standard_normal((1, 2, 1))
    out = downsweep(B, VectorTree([root.copy(), np.zeros((2, 2, 1))]))
    assert np.allclose(out.reshape(-1), (expand_basis(B, 0)[0] @ root[0]).ravel(), rtol=1e-13)


def test_lowrank_part_matches_dense_assembly():
    A = exp2d(2048)[0]
    x = np.random.default_rng(2).standard_normal(2048)
    xl = to_leaf_layout(A.col_tree, A.leaf_size, x)
    yl = downsweep(A.U, tree_multiply(A.couplings, upsweep(A.V, xl)))
    ref = to_dense(A, include_dense=False) @ x
    assert rel(yl.reshape(-1), ref) <= 1e-12


def test_dense_multiply_identity_and_zero(rng):
    I = CouplingLevel(np.arange(4), np.arange(4), np.broadcast_to(np.eye(3), (4, 3, 3)).copy())
    x = rng.standard_normal((4, 3, 2))
    assert np.array_equal(dense_multiply(I, x, np.zeros_like(x)), x)
    Z = CouplingLevel(np.arange(4), np.arange(4), np.zeros((4, 3, 3)))
    assert not np.any(dense_multiply(Z, x, np.zeros_like(x)))


def test_dense_multiply_matches_scatter_oracle():
    A = exp2d(1024)[0]
    x = np.random.default_rng(1).standard_normal((16, 64, 1))
    out = dense_multiply(A.dense, x, np.zeros_like(x))
    ref = to_dense(A, include_lowrank=False) @ x.reshape(-1)
    assert rel(out.reshape(-1), ref) <= 1e-14


def test_alpha_zero_scales_y(rng):
    A = exp2d(1024)[0]
    y = rng.standard_normal(1024)
    assert np.array_equal(h2_matvec(A, rng.standard_normal(1024), alpha=0.0, beta=3.0, y=y), 3.0 * y)


def test_alpha_beta_combination(rng):
    A = exp2d(1024)[0]
    x, y = rng.standard_normal(1024), rng.standard_normal(1024)
    assert np.allclose(h2_matvec(A, x, 2.0, -1.0, y), 2 * h2_matvec(A, x) - y, rtol=1e-14, atol=1e-12)


def test_multivector_equals_columnwise():
    A = exp2d(2048)[0]
    X = np.random.default_rng(4).standard_normal((2048, 64))
    Y = h2_matvec(A, X)
    cols = np.stack([h2_matvec(A, X[:, j]) for j in range(64)], axis=1)
    assert np.abs(Y - cols).max() <= 1e-13 * np.abs(cols).max()


def test_shape_mismatch_raises():
    with pytest.raises(StructureError):
        h2_matvec(exp2d(1024)[0], np.ones(1000))


def test_accuracy_against_dense_kernel_matrix():
    A, kern, pts = exp2d(4096)
    x = np.random.default_rng(0).uniform(size=4096)
    rows = np.random.default_rng(1).choice(4096, 409, replace=False)
    exact = kernel_matrix(kern, pts[rows], pts) @ x
    assert rel(h2_matvec(A, x)[rows], exact) <= 1e-6
    assert h2_sampled_error(A, kern, pts) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    A = exp2d(1024)[0]
    r = np.random.default_rng(seed)
    x1, x2 = r.standard_normal(1024), r.standard_normal(1024)
    lhs = h2_matvec(A, a * x1 + b * x2)
    rhs = a * h2_matvec(A, x1) + b * h2_matvec(A, x2)
    scale = abs(a) * np.linalg.norm(h2_matvec(A, x1)) + abs(b) * np.linalg.norm(h2_matvec(A, x2))
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * scale


def test_symmetric_kernel_is_symmetric(rng):
    A = exp2d(2048)[0]
    x, y = rng.standard_normal(2048), rng.standard_normal(2048)
    norm_est = np.linalg.norm(h2_matvec(A, x)) / np.linalg.norm(x)
    assert abs(y @ h2_matvec(A, x) - x @ h2_matvec(A, y)) <= 1e-10 * np.linalg.norm(x) * np.linalg.norm(y) * norm_est


def test_flop_count_linear():
    f = [matvec_flops(exp2d(n)[0]) for n in (4096, 8192, 16384, 32768)]
    assert all(b / a <= 2.3 for a, b in zip(f, f[1:]))


def test_deterministic_repeat(rng):
    A = exp2d(4096)[0]
    x = rng.standard_normal((4096, 3))
    assert np.array_equal(h2_matvec(A, x), h2_matvec(A, x))
