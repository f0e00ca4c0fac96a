"""Single-rank H2 matrix-vector products.

Accumulation order is fixed: children in index order during the upsweep,
block ordinals within each block row during the tree multiply, and the
downsweep transfer term after the level's own coupling sum. The distributed
product reproduces this order exactly.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .h2core import (BasisTree, CouplingLevel, H2Matrix, VectorTree, from_leaf_layout,
                     marshal_downsweep_level, marshal_tree_multiply_level, marshal_upsweep_level,
                     to_leaf_layout)
from .geometry import StructureError


def leaf_coefficients(leaves, xl):
    """x_hat at the leaves: V_t^T x_t for each leaf."""
    return kernels.batched_tn(leaves, xl)


def upsweep_level(transfers, child, n_parents):
    """Parent coefficients from one level of child coefficients."""
    plan = marshal_upsweep_level(transfers, child.shape[0])
    out = np.zeros((n_parents, transfers.shape[2], child.shape[2]))
    return plan.execute(transfers, child, out)


def upsweep(V: BasisTree, xl, top=0):
    """Coefficient tree x_hat for leaf-layout input ``xl`` (n_leaves, m, nv).

    Levels above ``top`` are left empty (None).
    """
    if xl.shape[:2] != V.leaves.shape[:2]:
        raise StructureError(f"input layout {xl.shape[:2]} does not match basis {V.leaves.shape[:2]}")
    q = V.depth
    levels = [None] * (q + 1)
    levels[q] = leaf_coefficients(V.leaves, xl)
    for level in range(q, top, -1):
        levels[level - 1] = upsweep_level(V.transfers[level], levels[level], 2 ** (level - 1))
    return VectorTree(levels)


def multiply_level(level: CouplingLevel, xhat, n_rows, nv):
    out = np.zeros((n_rows, level.blocks.shape[1], nv))
    return marshal_tree_multiply_level(level).execute(level.blocks, xhat, out)


def tree_multiply(couplings, xhat: VectorTree, top=0):
    nv = xhat[len(couplings) - 1].shape[2]
    levels = [None] * len(couplings)
    for level in range(top, len(couplings)):
        levels[level] = multiply_level(couplings[level], xhat[level], 2**level, nv)
    return VectorTree(levels)


def downsweep_level(transfers, parent, child):
    """child += E_i @ parent[i // 2] (in place)."""
    plan = marshal_downsweep_level(child.shape[0])
    return plan.execute(transfers, parent, child)


def downsweep(U: BasisTree, yhat: VectorTree, top=0):
    """Push coefficients from ``top`` to the leaves; returns leaf-layout output."""
    q = U.depth
    for level in range(top + 1, q + 1):
        downsweep_level(U.transfers[level], yhat[level - 1], yhat[level])
    return kernels.batched_nn(U.leaves, yhat[q])


def dense_multiply(dense: CouplingLevel, xl, yl):
    """Block-sparse leaf product accumulated into ``yl`` in ordinal order."""
    return marshal_tree_multiply_level(dense).execute(dense.blocks, xl, yl)


def h2_multiply_leaf_layout(A: H2Matrix, xl):
    """A @ x for leaf-layout input; the reference accumulation order."""
    xhat = upsweep(A.V, xl)
    yhat = tree_multiply(A.couplings, xhat)
    yl = downsweep(A.U, yhat)
    return dense_multiply(A.dense, xl, yl)


def prepare_input(col_tree, m, x, ordering="original"):
    """Validate and convert an input vector to leaf layout; returns (xl, was_1d)."""
    x = np.asarray(x, dtype=np.float64)
    vec = x.ndim == 1
    X = x[:, None] if vec else x
    if X.shape[0] != col_tree.size:
        raise StructureError(f"input has {X.shape[0]} rows, matrix has {col_tree.size} columns")
    if ordering not in ("original", "tree"):
        raise ValueError("ordering must be 'original' or 'tree'")
    if ordering == "original":
        X = X[col_tree.permutation]
    return to_leaf_layout(col_tree, m, X), vec


def finish_output(row_tree, m, yl, nv, alpha, beta, y, ordering, vec):
    """Scale, reorder and combine a leaf-layout product with ``beta * y``."""
    if yl is None:
        out = np.zeros((row_tree.size, nv))
    else:
        flat = from_leaf_layout(row_tree, m, yl)
        out = alpha * flat if alpha != 1 else flat
    if ordering == "original":
        res = np.empty_like(out)
        res[row_tree.permutation] = out
        out = res
    if beta != 0 and y is not None:
        Y = np.asarray(y, dtype=np.float64)
        out = out + beta * (Y[:, None] if Y.ndim == 1 else Y)
    return out[:, 0] if vec else out


def h2_matvec(A: H2Matrix, x, alpha=1.0, beta=0.0, y=None, ordering="original"):
    """``alpha * A @ x + beta * y`` for an (N,) or (N, nv) input.

    ``ordering="original"`` uses the caller's point numbering; ``"tree"``
    takes vectors already permuted into cluster-tree order.
    """
    m = A.leaf_size
    xl, vec = prepare_input(A.col_tree, m, x, ordering)
    yl = h2_multiply_leaf_layout(A, xl) if alpha != 0 else None
    return finish_output(A.row_tree, m, yl, xl.shape[2], alpha, beta, y, ordering, vec)


def matvec_flops(A: H2Matrix, nv=1):
    """Multiply-add count (2 flops each) of one product with ``nv`` vectors."""
    ku, kv = A.U.ranks, A.V.ranks
    q = A.depth
    m = A.leaf_size
    nl = 2**q
    f = 2 * nl * m * kv[q] + 2 * nl * m * ku[q]
    for level in range(1, q + 1):
        f += 2 * 2**level * kv[level] * kv[level - 1]
        f += 2 * 2**level * ku[level] * ku[level - 1]
    for level, c in enumerate(A.couplings):
        f += 2 * len(c) * ku[level] * kv[level]
    f += 2 * len(A.dense) * m * m
    return f * nv


def sampled_relative_error(apply_exact_rows, y_approx, x, rows):
    """``||A x - y||/||A x||`` restricted to ``rows``; the exact rows are computed by the callback."""
    exact = apply_exact_rows(rows, x)
    approx = np.asarray(y_approx)[rows]
    return float(np.linalg.norm(exact - approx) / np.linalg.norm(exact))


def sample_rows(n, fraction=0.1, rng=None):
    rng = np.random.default_rng(rng)
    k = max(1, int(round(fraction * n)))
    return np.sort(rng.choice(n, size=k, replace=False))


def kernel_rows_product(kernel, points, rows, x, chunk=256):
    """Exact ``(K x)[rows]`` by direct kernel evaluation in row chunks."""
    X = np.asarray(x, dtype=float)
    X2 = X[:, None] if X.ndim == 1 else X
    out = np.empty((len(rows), X2.shape[1]))
    for a in range(0, len(rows), chunk):
        r = rows[a:a + chunk]
        Kr = kernel(points[None, r], points[None])[0]
        out[a:a + chunk] = Kr @ X2
    return out[:, 0] if X.ndim == 1 else out


def h2_sampled_error(A: H2Matrix, kernel, points, x=None, fraction=0.1, seed=0):
    """Sampled relative error of ``A x`` against direct kernel sums (original order)."""
    rng = np.random.default_rng(seed)
    n = A.shape[1]
    if x is None:
        x = rng.uniform(size=n)
    rows = sample_rows(A.shape[0], fraction, rng)
    y = h2_matvec(A, x)
    return sampled_relative_error(lambda r, v: kernel_rows_product(kernel, points, r, v), y, x, rows)
