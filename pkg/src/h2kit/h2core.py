"""H2 data model: nested basis trees, block-sparse coupling levels, the dense
leaf layer, per-level coefficient trees and the batched marshaling plans."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import BlockStructure, ClusterTree, StructureError, ordinals

ITEMSIZE = 8


class ConstructionError(RuntimeError):
    """Kernel evaluation produced unusable values."""


@dataclass
class BasisTree:
    """Leaf bases plus one transfer array per level.

    ``leaves`` has shape (2**q, m, k_q); rows beyond a ragged leaf's size are
    zero. ``transfers[l]`` has shape (2**l, k_l, k_{l-1}) for l >= 1 and
    ``transfers[0]`` is None.
    """

    leaves: np.ndarray
    transfers: list

    @property
    def depth(self):
        return len(self.transfers) - 1

    @property
    def ranks(self):
        q = self.depth
        ks = [0] * (q + 1)
        ks[q] = self.leaves.shape[2]
        for level in range(q, 0, -1):
            ks[level] = self.transfers[level].shape[1]
            ks[level - 1] = self.transfers[level].shape[2]
        return ks

    def validate(self):
        ks = self.ranks
        q = self.depth
        if self.leaves.shape[0] != 2**q:
            raise StructureError("leaf count does not match depth")
        for level in range(1, q + 1):
            t = self.transfers[level]
            if t.shape != (2**level, ks[level], ks[level - 1]):
                raise StructureError(f"transfer shape mismatch at level {level}: {t.shape}")
        if ks[q] != self.leaves.shape[2]:
            raise StructureError("leaf rank does not match the level rank")

    def copy(self):
        return BasisTree(self.leaves.copy(), [None] + [t.copy() for t in self.transfers[1:]])

    def nbytes(self):
        return ITEMSIZE * (self.leaves.size + sum(t.size for t in self.transfers[1:]))


@dataclass
class CouplingLevel:
    """Block-sparse k_U x k_V couplings of one level, sorted by (row, col)."""

    rows: np.ndarray
    cols: np.ndarray
    blocks: np.ndarray
    ordinal: np.ndarray = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        if self.ordinal is None:
            self.ordinal = ordinals(self.rows)

    @classmethod
    def empty(cls, ku, kv):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros((0, ku, kv)))

    def __len__(self):
        return len(self.rows)

    def sparsity(self):
        return int(self.ordinal.max()) + 1 if len(self.rows) else 0

    def copy(self):
        return CouplingLevel(self.rows.copy(), self.cols.copy(), self.blocks.copy(), self.ordinal.copy())


@dataclass
class H2Matrix:
    row_tree: ClusterTree
    col_tree: ClusterTree
    U: BasisTree
    V: BasisTree
    couplings: list
    dense: CouplingLevel
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return (self.row_tree.size, self.col_tree.size)

    @property
    def depth(self):
        return self.row_tree.depth

    @property
    def leaf_size(self):
        return self.U.leaves.shape[1]

    def structure(self):
        return BlockStructure(
            self.depth,
            [np.stack([c.rows, c.cols], 1) for c in self.couplings],
            np.stack([self.dense.rows, self.dense.cols], 1),
        )

    def sparsity_constant(self):
        return self.structure().sparsity_constant()

    def validate(self):
        self.U.validate()
        self.V.validate()
        ku, kv = self.U.ranks, self.V.ranks
        if len(self.couplings) != self.depth + 1:
            raise StructureError("one coupling level per tree level required")
        for level, c in enumerate(self.couplings):
            if c.blocks.shape[1:] != (ku[level], kv[level]):
                raise StructureError(f"coupling shape mismatch at level {level}")
            if len(c) and (c.rows.max() >= 2**level or c.cols.max() >= 2**level):
                raise StructureError(f"coupling node id out of range at level {level}")

    def copy(self):
        return H2Matrix(self.row_tree, self.col_tree, self.U.copy(), self.V.copy(),
                        [c.copy() for c in self.couplings], self.dense.copy(), dict(self.meta))


def memory_report(A: H2Matrix):
    """Exact byte counts of the stored arrays (padding included)."""
    dense = ITEMSIZE * A.dense.blocks.size
    bases = A.U.nbytes() + A.V.nbytes()
    coup = ITEMSIZE * sum(c.blocks.size for c in A.couplings)
    return {
        "dense_bytes": dense,
        "basis_bytes": bases,
        "coupling_bytes": coup,
        "lowrank_bytes": bases + coup,
        "total_bytes": dense + bases + coup,
    }


# ---------------------------------------------------------------------------
# coefficient trees


@dataclass
class VectorTree:
    levels: list

    @classmethod
    def zeros(cls, ranks, nv):
        return cls([np.zeros((2**l, k, nv)) for l, k in enumerate(ranks)])

    @property
    def nv(self):
        return self.levels[0].shape[2]

    def __getitem__(self, level):
        return self.levels[level]


# ---------------------------------------------------------------------------
# marshaling


@dataclass
class BatchPlan:
    """Flat list of small products ``dest[d] += op(mat[o]) @ src[s]``.

    Entries of one conflict group never share a destination; groups are
    applied in ascending order, entries within a group in stored order.
    """

    op: np.ndarray
    src: np.ndarray
    dest: np.ndarray
    group: np.ndarray
    transpose: bool = False

    def __len__(self):
        return len(self.op)

    @property
    def n_groups(self):
        return int(self.group.max()) + 1 if len(self.group) else 0

    def groups(self):
        return [np.flatnonzero(self.group == g) for g in range(self.n_groups)]

    def check(self):
        for idx in self.groups():
            d = self.dest[idx]
            if len(np.unique(d)) != len(d):
                raise StructureError("conflict group writes the same destination twice")

    def products(self, mats, src):
        a = mats if len(self.op) == len(mats) and np.array_equal(self.op, np.arange(len(mats))) else mats[self.op]
        x = src[self.src]
        return kernels.batched_tn(a, x) if self.transpose else kernels.batched_nn(a, x)

    def execute(self, mats, src, dest):
        """Apply the plan, accumulating into ``dest`` in place."""
        if len(self):
            kernels.scatter_add_ordered(dest, self.dest, self.products(mats, src), self.group)
        return dest


def _as_index(a):
    return np.asarray(a, dtype=np.int64)


def marshal_upsweep_level(transfers, n_children, k_child=None, k_parent=None):
    """Plan for ``xhat[l-1][i//2] += F[i].T @ xhat[l][i]`` over one level."""
    if transfers is not None and n_children:
        if transfers.shape[0] != n_children:
            raise StructureError("transfer count does not match node count")
        if k_child is not None and transfers.shape[1] != k_child:
            raise StructureError("transfer rows do not match child rank")
        if k_parent is not None and transfers.shape[2] != k_parent:
            raise StructureError("transfer columns do not match parent rank")
    i = np.arange(n_children, dtype=np.int64)
    return BatchPlan(i, i, i // 2, i % 2, transpose=True)


def marshal_downsweep_level(n_children):
    """Plan for ``yhat[l][i] += E[i] @ yhat[l-1][i//2]``; one group suffices."""
    i = np.arange(n_children, dtype=np.int64)
    return BatchPlan(i, i // 2, i, np.zeros(n_children, dtype=np.int64))


def marshal_tree_multiply_level(level: CouplingLevel):
    """Plan for ``yhat[t] += S_ts @ xhat[s]``; the batch index is the block ordinal."""
    n = len(level)
    return BatchPlan(np.arange(n, dtype=np.int64), _as_index(level.cols), _as_index(level.rows),
                     _as_index(level.ordinal))


# ---------------------------------------------------------------------------
# explicit expansion


def expand_basis(B: BasisTree, level):
    """Explicit basis of every node at ``level`` as an (n_nodes, rows, k_l) array."""
    cur = B.leaves
    for l in range(B.depth, level, -1):
        t = B.transfers[l]
        prod = np.matmul(cur, t)
        cur = prod.reshape(2 ** (l - 1), 2 * prod.shape[1], prod.shape[2])
    return cur


def to_dense(A: H2Matrix, include_dense=True, include_lowrank=True):
    """Assemble the represented matrix in tree order (small sizes only)."""
    m = A.leaf_size
    q = A.depth
    n_rows = 2**q * m
    out = np.zeros((n_rows, 2**q * A.V.leaves.shape[1]))
    if include_lowrank:
        for level, c in enumerate(A.couplings):
            if not len(c):
                continue
            Ul = expand_basis(A.U, level)
            Vl = expand_basis(A.V, level)
            w = Ul.shape[1]
            for t, s, S in zip(c.rows, c.cols, c.blocks):
                out[t * w:(t + 1) * w, s * w:(s + 1) * w] += Ul[t] @ S @ Vl[s].T
    if include_dense:
        for t, s, blk in zip(A.dense.rows, A.dense.cols, A.dense.blocks):
            out[t * m:(t + 1) * m, s * m:(s + 1) * m] += blk
    rows = padded_positions(A.row_tree, m)
    cols = padded_positions(A.col_tree, m)
    return out[np.ix_(rows, cols)]


def padded_positions(tree: ClusterTree, m):
    """Positions of tree-ordered indices inside the zero-padded leaf layout."""
    b, e = tree.ranges(tree.depth)
    return np.concatenate([np.arange(i * m, i * m + (hi - lo)) for i, (lo, hi) in enumerate(zip(b, e))])


def to_leaf_layout(tree: ClusterTree, m, x):
    """Tree-ordered (N, nv) -> padded (n_leaves, m, nv)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if tree.size == tree.n_nodes(tree.depth) * m:
        return np.ascontiguousarray(x).reshape(-1, m, x.shape[1])
    out = np.zeros((tree.n_nodes(tree.depth) * m, x.shape[1]))
    out[padded_positions(tree, m)] = x
    return out.reshape(-1, m, x.shape[1])


def from_leaf_layout(tree: ClusterTree, m, xl):
    flat = xl.reshape(-1, xl.shape[2])
    if tree.size == flat.shape[0]:
        return flat
    return flat[padded_positions(tree, m)]
