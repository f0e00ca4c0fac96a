"""Kernel-based H2 construction with tensor Chebyshev interpolation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import BoundingBox, ClusterTree, PointCloud, build_cluster_tree, dual_tree_traversal
from .h2core import BasisTree, ConstructionError, CouplingLevel, H2Matrix, to_leaf_layout

_CHUNK_ELEMS = 1 << 22


# ---------------------------------------------------------------------------
# kernels


class Kernel:
    """Batched kernel: ``k(X, Y)`` maps (B, m, d) x (B, n, d) to (B, m, n)."""

    symmetric = True
    name = "kernel"

    def __call__(self, X, Y):
        raise NotImplementedError

    def params(self):
        return {}

    def evaluate(self, x, y):
        """Scalar convenience wrapper."""
        x = np.asarray(x, dtype=float).reshape(1, 1, -1)
        y = np.asarray(y, dtype=float).reshape(1, 1, -1)
        return float(self(x, y)[0, 0, 0])


class ExponentialKernel(Kernel):
    name = "exp"

    def __init__(self, length=0.1):
        self.length = float(length)

    def __call__(self, X, Y):
        return np.exp(-kernels.pairwise_distance(X, Y) / self.length)

    def params(self):
        return {"length": self.length}


def bump(x, c, ell):
    """``exp(-1 / (1 - r^2))`` with ``r = (x - c) / (ell / 2)``; zero for ``|r| >= 1``."""
    r = (np.asarray(x, dtype=float) - c) / (0.5 * ell)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def bump_diffusivity(pts):
    """kappa(x) = 1 + f(x1; 0, 1.5) f(x2; 0, 2); values in [1, 1 + e^-2]."""
    pts = np.asarray(pts, dtype=float)
    return 1.0 + bump(pts[..., 0], 0.0, 1.5) * bump(pts[..., 1], 0.0, 2.0)


def unit_diffusivity(pts):
    return np.ones(np.asarray(pts).shape[:-1])


DIFFUSIVITY_FIELDS = {"bump": bump_diffusivity, "unit": unit_diffusivity}


class FractionalKernel(Kernel):
    """``sign * 2 sqrt(kappa(x) kappa(y)) / |x - y|^(2 + 2 beta)``, zero at x = y."""

    name = "frac"

    def __init__(self, beta=0.75, kappa="bump", sign=-1.0):
        if not 0 < beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        self.beta = float(beta)
        self.kappa_name = kappa if isinstance(kappa, str) else getattr(kappa, "__name__", "custom")
        self.kappa = DIFFUSIVITY_FIELDS[kappa] if isinstance(kappa, str) else kappa
        self.sign = float(sign)

    def __call__(self, X, Y):
        r = kernels.pairwise_distance(X, Y)
        a = np.sqrt(self.kappa(X))[:, :, None] * np.sqrt(self.kappa(Y))[:, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.sign * 2.0 * a / r ** (2.0 + 2.0 * self.beta)
        out[r == 0] = 0.0
        return out

    def params(self):
        return {"beta": self.beta, "kappa": self.kappa_name, "sign": self.sign}

    def point_factor(self, pts):
        """``sqrt(kappa)``: the kernel equals ``w(x) w(y)`` times the unit-diffusivity kernel."""
        return np.sqrt(self.kappa(pts))

    def unit(self):
        return FractionalKernel(self.beta, "unit", self.sign)


class FunctionKernel(Kernel):
    """Wrap a scalar-pair function ``f(x, y)`` vectorized over trailing coordinates."""

    name = "function"

    def __init__(self, fn, symmetric=True):
        self.fn = fn
        self.symmetric = symmetric

    def __call__(self, X, Y):
        return np.asarray(self.fn(X[:, :, None, :], Y[:, None, :, :]), dtype=float) * np.ones(
            (X.shape[0], X.shape[1], Y.shape[1]))


KERNELS = {"exp": ExponentialKernel, "frac": FractionalKernel}


def kernel_from_meta(name, params):
    if name not in KERNELS:
        raise ValueError(f"cannot rebuild kernel {name!r}")
    return KERNELS[name](**params)


# ---------------------------------------------------------------------------
# Chebyshev grids


def cheb_reference(p):
    if p < 1:
        raise ValueError("interpolation order must be >= 1")
    i = np.arange(p)
    return np.cos(np.pi * (2 * i + 1) / (2 * p))


@dataclass
class ChebGrid:
    order: int
    box: BoundingBox
    axes: np.ndarray  # (dim, p) 1D nodes per axis

    @property
    def dim(self):
        return self.axes.shape[0]

    @property
    def rank(self):
        return self.order**self.dim

    @property
    def nodes(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


def cheb_nodes(p, box: BoundingBox) -> ChebGrid:
    """Tensor grid of first-kind Chebyshev points mapped into ``box``.

    Zero-extent dimensions collapse all nodes onto the box center.
    """
    ref = cheb_reference(p)
    c = np.asarray(box.center, dtype=float)
    half = 0.5 * (np.asarray(box.hi, dtype=float) - np.asarray(box.lo, dtype=float))
    return ChebGrid(p, box, c[:, None] + half[:, None] * ref[None, :])


def _lagrange_reference(t, p):
    """1D Lagrange values at reference coordinates ``t``; shape t.shape + (p,)."""
    ref = cheb_reference(p)
    diff = t[..., None] - ref
    out = np.empty(t.shape + (p,))
    for j in range(p):
        num = np.ones(t.shape)
        den = 1.0
        for i in range(p):
            if i != j:
                num = num * diff[..., i]
                den *= ref[j] - ref[i]
        out[..., j] = num / den
    return out


def _lagrange_in_boxes(pts, lo, hi, p):
    """Tensor Lagrange values of points (B, n, d) w.r.t. grids in boxes (B, d)."""
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    flat = half <= 0
    safe = np.where(flat, 1.0, half)
    t = (pts - c[:, None, :]) / safe[:, None, :]
    L = _lagrange_reference(t, p)  # (B, n, d, p)
    if flat.any():
        deg = np.zeros(p)
        deg[0] = 1.0
        fb, fd = np.nonzero(flat)
        L[fb, :, fd, :] = deg
    B, n, d, _ = L.shape
    out = L[:, :, 0, :]
    for k in range(1, d):
        out = (out[:, :, :, None] * L[:, :, k, None, :]).reshape(B, n, -1)
    return out


def _grid_nodes(lo, hi, p):
    """Tensor Chebyshev nodes for boxes (B, d) -> (B, p**d, d)."""
    ref = cheb_reference(p)
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    axes = c[:, :, None] + half[:, :, None] * ref  # (B, d, p)
    d = lo.shape[1]
    grids = np.meshgrid(*([np.arange(p)] * d), indexing="ij")
    idx = [g.ravel() for g in grids]
    return np.stack([axes[:, k, idx[k]] for k in range(d)], axis=2)


def leaf_basis(points, grid: ChebGrid):
    """Rows of tensor Lagrange polynomials evaluated at ``points`` (m, d)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lo = np.asarray(grid.box.lo, dtype=float)[None]
    hi = np.asarray(grid.box.hi, dtype=float)[None]
    return _lagrange_in_boxes(pts[None], lo, hi, grid.order)[0]


def transfer_matrix(child: ChebGrid, parent: ChebGrid):
    """Parent Lagrange polynomials evaluated at the child nodes (k_child x k_parent)."""
    lo = np.asarray(parent.box.lo, dtype=float)[None]
    hi = np.asarray(parent.box.hi, dtype=float)[None]
    return _lagrange_in_boxes(child.nodes[None], lo, hi, parent.order)[0]


def coupling_matrix(kernel, row: ChebGrid, col: ChebGrid):
    S = kernel(row.nodes[None], col.nodes[None])[0]
    if not np.all(np.isfinite(S)):
        raise ConstructionError("kernel is not finite at some interpolation node pair")
    return S


# ---------------------------------------------------------------------------
# whole-matrix construction


def interpolation_basis(tree: ClusterTree, p):
    """Leaf bases and transfers of the Chebyshev basis tree."""
    q = tree.depth
    m = tree.leaf_size
    pts = to_leaf_layout(tree, m, tree.tree_points())  # (nl, m, d)
    sl = tree.level_slice(q)
    leaves = _lagrange_in_boxes(pts, tree.lo[sl], tree.hi[sl], p)
    b, e = tree.ranges(q)
    pad = np.arange(m)[None, :] >= (e - b)[:, None]
    leaves[pad] = 0.0
    transfers = [None]
    for level in range(1, q + 1):
        cs = tree.level_slice(level)
        ps = tree.level_slice(level - 1)
        nodes = _grid_nodes(tree.lo[cs], tree.hi[cs], p)
        parent = np.repeat(np.arange(2 ** (level - 1)), 2) + ps.start
        transfers.append(_lagrange_in_boxes(nodes, tree.lo[parent], tree.hi[parent], p))
    return BasisTree(np.ascontiguousarray(leaves), transfers)


def _evaluate_blocks(kernel, Xs, Ys, rows, cols, rmask=None, cmask=None):
    n = len(rows)
    out = np.empty((n, Xs.shape[1], Ys.shape[1]))
    step = max(1, _CHUNK_ELEMS // max(1, Xs.shape[1] * Ys.shape[1]))
    for a in range(0, n, step):
        r = rows[a:a + step]
        c = cols[a:a + step]
        blk = kernel(Xs[r], Ys[c])
        if rmask is not None:
            blk = blk * rmask[r][:, :, None] * cmask[c][:, None, :]
        out[a:a + step] = blk
    if not np.all(np.isfinite(out)):
        raise ConstructionError("kernel produced non-finite values")
    return out


def coupling_levels(kernel, row_tree, col_tree, structure, p):
    levels = []
    for level, pairs in enumerate(structure.lowrank):
        k = p ** row_tree.dim
        if len(pairs) == 0:
            levels.append(CouplingLevel.empty(k, p ** col_tree.dim))
            continue
        sl = row_tree.level_slice(level)
        Xs = _grid_nodes(row_tree.lo[sl], row_tree.hi[sl], p)
        Ys = _grid_nodes(col_tree.lo[sl], col_tree.hi[sl], p)
        blocks = _evaluate_blocks(kernel, Xs, Ys, pairs[:, 0], pairs[:, 1])
        levels.append(CouplingLevel(pairs[:, 0], pairs[:, 1], blocks))
    return levels


def dense_layer(kernel, row_tree, col_tree, pairs):
    m = row_tree.leaf_size
    Xs = to_leaf_layout(row_tree, m, row_tree.tree_points())
    Ys = to_leaf_layout(col_tree, m, col_tree.tree_points())
    rb, re = row_tree.ranges(row_tree.depth)
    cb, ce = col_tree.ranges(col_tree.depth)
    rmask = (np.arange(m)[None, :] < (re - rb)[:, None]).astype(float)
    cmask = (np.arange(m)[None, :] < (ce - cb)[:, None]).astype(float)
    ragged = rmask.min() < 1 or cmask.min() < 1
    if len(pairs) == 0:
        return CouplingLevel.empty(m, m)
    blocks = _evaluate_blocks(kernel, Xs, Ys, pairs[:, 0], pairs[:, 1],
                              rmask if ragged else None, cmask if ragged else None)
    return CouplingLevel(pairs[:, 0], pairs[:, 1], blocks)


def construct_h2(points, kernel, m=64, eta=0.9, p=8, row_mask=None, tree=None, factored=True) -> H2Matrix:
    """Interpolation-based H2 approximation of the kernel matrix on ``points``.

    ``row_mask`` (per-level node masks of the row tree) skips block rows that
    are not needed; those rows of the result are zero. Kernels with a
    ``point_factor`` are interpolated without it and the factor is applied
    exactly to the leaf bases and dense blocks (unless ``factored=False``).
    """
    if tree is None:
        tree = build_cluster_tree(PointCloud(points), m)
    structure = dual_tree_traversal(tree, tree, eta, row_mask=row_mask)
    scaled = factored and hasattr(kernel, "point_factor")
    base = kernel.unit() if scaled else kernel
    U = interpolation_basis(tree, p)
    V = U if base.symmetric else interpolation_basis(tree, p)
    dense = dense_layer(base, tree, tree, structure.dense)
    if scaled:
        w = to_leaf_layout(tree, tree.leaf_size, kernel.point_factor(tree.tree_points()))[:, :, 0]
        U = BasisTree(U.leaves * w[:, :, None], U.transfers)
        V = U if base.symmetric else BasisTree(V.leaves * w[:, :, None], V.transfers)
        dense.blocks *= w[dense.rows][:, :, None] * w[dense.cols][:, None, :]
    return H2Matrix(
        tree, tree, U, V,
        coupling_levels(base, tree, tree, structure, p),
        dense,
        meta={"kernel": kernel.name, "params": kernel.params(), "eta": float(eta), "p": int(p)},
    )


def kernel_matrix(kernel, X, Y=None):
    """Dense kernel matrix between point sets (rows of X and Y)."""
    Y = X if Y is None else Y
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    out = np.empty((len(X), len(Y)))
    step = max(1, _CHUNK_ELEMS // max(1, len(Y)))
    for a in range(0, len(X), step):
        out[a:a + step] = kernel(X[None, a:a + step], Y[None])[0]
    return out
