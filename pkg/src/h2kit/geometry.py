"""Point sets, kd cluster trees, admissibility and block-structure generation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class StructureError(ValueError):
    """Inconsistent tree, block or plan structure."""


@dataclass
class PointCloud:
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[0] == 0:
            raise StructureError("point cloud must contain at least one point")
        if not np.all(np.isfinite(c)):
            raise StructureError("point coordinates must be finite")
        self.coords = c

    @property
    def dim(self):
        return self.coords.shape[1]

    def __len__(self):
        return self.coords.shape[0]


@dataclass(frozen=True)
class BoundingBox:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def of_points(cls, pts):
        pts = np.atleast_2d(pts)
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.hi - self.lo))


def admissible(t: BoundingBox, s: BoundingBox, eta: float) -> bool:
    """True iff ``eta * |C_t - C_s| >= (D_t + D_s) / 2`` with distinct centers."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    dist = float(np.linalg.norm(t.center - s.center))
    return dist > 0 and eta * dist >= 0.5 * (t.diameter + s.diameter)


def _admissible_batch(lo_t, hi_t, lo_s, hi_s, eta):
    dist = np.linalg.norm(0.5 * (lo_t + hi_t) - 0.5 * (lo_s + hi_s), axis=1)
    diam = np.linalg.norm(hi_t - lo_t, axis=1) + np.linalg.norm(hi_s - lo_s, axis=1)
    return (dist > 0) & (eta * dist >= 0.5 * diam)


@dataclass
class ClusterTree:
    """Complete binary kd-tree over point indices.

    Nodes are numbered level by level: node ``i`` of level ``l`` has global id
    ``2**l - 1 + i``. ``begin``/``end`` delimit the node's contiguous range in
    tree order, i.e. positions into ``permutation``.
    """

    permutation: np.ndarray
    depth: int
    leaf_size: int
    begin: np.ndarray
    end: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    points: np.ndarray = field(repr=False, default=None)

    @property
    def size(self):
        return len(self.permutation)

    @property
    def dim(self):
        return self.lo.shape[1]

    def level_slice(self, level):
        return slice(2**level - 1, 2 ** (level + 1) - 1)

    def n_nodes(self, level):
        return 2**level

    def box(self, level, i):
        g = 2**level - 1 + i
        return BoundingBox(self.lo[g], self.hi[g])

    def node(self, level, i):
        g = 2**level - 1 + i
        return {
            "range": (int(self.begin[g]), int(self.end[g])),
            "level": level,
            "parent": None if level == 0 else (level - 1, i // 2),
            "children": [] if level == self.depth else [(level + 1, 2 * i), (level + 1, 2 * i + 1)],
            "box": self.box(level, i),
        }

    def ranges(self, level):
        sl = self.level_slice(level)
        return self.begin[sl], self.end[sl]

    @property
    def leaf_ptr(self):
        b, e = self.ranges(self.depth)
        return np.append(b, e[-1]).astype(np.int64)

    def tree_points(self):
        return self.points[self.permutation]

    def node_mask(self, indices):
        """Per level, which nodes contain at least one of ``indices`` (original ids)."""
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.size)
        hit = np.zeros(self.size + 1, dtype=np.int64)
        hit[1:] = np.cumsum(np.bincount(inv[np.asarray(indices)], minlength=self.size))
        out = []
        for level in range(self.depth + 1):
            b, e = self.ranges(level)
            out.append(hit[e] > hit[b])
        return out


def tree_depth(n_points, leaf_size):
    q = 0
    while leaf_size * 2**q < n_points:
        q += 1
    return q


def build_cluster_tree(points, m: int, depth: int | None = None) -> ClusterTree:
    """Balanced kd-tree by median splits along the longest box extent.

    Each split sends the first ``ceil(n/2)`` points (stable order along the
    split axis) to the left child, so all leaves sit at depth
    ``ceil(log2(N/m))`` and hold at most ``m`` points.
    """
    if not isinstance(points, PointCloud):
        points = PointCloud(points)
    if m < 1:
        raise ValueError("leaf size must be >= 1")
    pts = points.coords
    n, dim = pts.shape
    q = tree_depth(n, m) if depth is None else depth
    nn = 2 ** (q + 1) - 1
    begin = np.zeros(nn, dtype=np.int64)
    end = np.zeros(nn, dtype=np.int64)
    lo = np.zeros((nn, dim))
    hi = np.zeros((nn, dim))
    perm = np.arange(n)
    end[0] = n
    for level in range(q + 1):
        for i in range(2**level):
            g = 2**level - 1 + i
            b, e = begin[g], end[g]
            idx = perm[b:e]
            if e > b:
                sub = pts[idx]
                lo[g] = sub.min(axis=0)
                hi[g] = sub.max(axis=0)
            else:
                # empty node of a ragged tree: degenerate box at the parent's center
                p = (g - 1) // 2
                lo[g] = hi[g] = 0.5 * (lo[p] + hi[p])
            if level == q:
                continue
            half = (e - b + 1) // 2
            if e - b > 1:
                axis = int(np.argmax(hi[g] - lo[g]))
                order = np.argsort(pts[idx, axis], kind="stable")
                perm[b:e] = idx[order]
            c = 2 * g + 1
            begin[c], end[c] = b, b + half
            begin[c + 1], end[c + 1] = b + half, e
    return ClusterTree(perm, q, m, begin, end, lo, hi, pts)


@dataclass
class BlockStructure:
    """Per-level admissible pairs plus leaf-level dense pairs.

    Pairs are sorted by (row, col); a block's ordinal is its position within
    its block row.
    """

    depth: int
    lowrank: list
    dense: np.ndarray

    def sparsity_constant(self):
        c = 0
        for pairs in self.lowrank + [self.dense]:
            if len(pairs):
                c = max(c, int(np.bincount(pairs[:, 0]).max()))
        return c

    def level_sparsity(self):
        out = []
        for pairs in self.lowrank:
            out.append(int(np.bincount(pairs[:, 0]).max()) if len(pairs) else 0)
        return out

    def n_lowrank(self):
        return sum(len(p) for p in self.lowrank)


def _sorted_pairs(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return pairs
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def ordinals(rows):
    """Position of each entry within its run of equal (sorted) rows."""
    rows = np.asarray(rows)
    if len(rows) == 0:
        return np.zeros(0, dtype=np.int64)
    starts = np.r_[0, np.flatnonzero(np.diff(rows)) + 1]
    first = np.repeat(starts, np.diff(np.r_[starts, len(rows)]))
    return np.arange(len(rows)) - first


def dual_tree_traversal(row_tree: ClusterTree, col_tree: ClusterTree, eta: float,
                        row_mask=None, start_level=0, start_pairs=None) -> BlockStructure:
    """Simultaneous descent of both trees.

    Admissible pairs become low-rank blocks on their level, inadmissible leaf
    pairs become dense blocks, everything else is refined into its four child
    pairs. ``row_mask`` (per-level boolean arrays) prunes row clusters that are
    not needed; ``start_pairs`` seeds the descent at ``start_level``.
    """
    if row_tree.depth != col_tree.depth:
        raise StructureError(f"tree depth mismatch: {row_tree.depth} != {col_tree.depth}")
    if eta <= 0:
        raise ValueError("eta must be positive")
    q = row_tree.depth
    lowrank = [np.zeros((0, 2), dtype=np.int64) for _ in range(q + 1)]
    if start_pairs is None:
        cand = np.zeros((1, 2), dtype=np.int64)
    else:
        cand = np.asarray(start_pairs, dtype=np.int64).reshape(-1, 2)
    dense = np.zeros((0, 2), dtype=np.int64)
    for level in range(start_level, q + 1):
        if row_mask is not None and len(cand):
            cand = cand[row_mask[level][cand[:, 0]]]
        if len(cand) == 0:
            break
        off = 2**level - 1
        gt, gs = cand[:, 0] + off, cand[:, 1] + off
        adm = _admissible_batch(row_tree.lo[gt], row_tree.hi[gt], col_tree.lo[gs], col_tree.hi[gs], eta)
        lowrank[level] = _sorted_pairs(cand[adm])
        rest = cand[~adm]
        if level == q:
            dense = _sorted_pairs(rest)
            break
        t = 2 * rest[:, 0]
        s = 2 * rest[:, 1]
        cand = np.stack(
            [np.stack([t, s], 1), np.stack([t, s + 1], 1), np.stack([t + 1, s], 1), np.stack([t + 1, s + 1], 1)],
            axis=1,
        ).reshape(-1, 2)
    return BlockStructure(q, lowrank, dense)


def split_traversal(row_tree, col_tree, eta, n_ranks, row_mask=None):
    """Root traversal above the C-level followed by independent per-rank traversals.

    Returns ``(root_structure, node_lists, rank_structures)`` where
    ``node_lists[p]`` holds the level-C column nodes that rank ``p`` must
    refine against, and ``rank_structures[p]`` contains rank ``p``'s block rows
    on levels >= C (global node numbering).
    """
    c = int(np.log2(n_ranks))
    if 2**c != n_ranks:
        raise StructureError("number of ranks must be a power of two")
    if row_tree.depth < c:
        raise StructureError("tree too shallow for this many ranks")
    q = row_tree.depth
    full = dual_tree_traversal(row_tree, col_tree, eta, row_mask=row_mask)
    root_lowrank = [full.lowrank[l] if l < c else np.zeros((0, 2), dtype=np.int64) for l in range(q + 1)]
    # level C candidates: children of inadmissible level C-1 pairs (or the root pair)
    frontier = _frontier(row_tree, col_tree, eta, c, row_mask)
    node_lists = []
    rank_structs = []
    for p in range(n_ranks):
        lp = np.unique(frontier[frontier[:, 0] == p, 1])
        node_lists.append(lp)
        st = dual_tree_traversal(row_tree, col_tree, eta, row_mask=row_mask, start_level=c,
                                 start_pairs=np.stack([np.full(len(lp), p), lp], 1))
        rank_structs.append(st)
    return BlockStructure(q, root_lowrank, np.zeros((0, 2), dtype=np.int64)), node_lists, rank_structs


def _frontier(row_tree, col_tree, eta, c, row_mask):
    cand = np.zeros((1, 2), dtype=np.int64)
    for level in range(c):
        if row_mask is not None and len(cand):
            cand = cand[row_mask[level][cand[:, 0]]]
        off = 2**level - 1
        gt, gs = cand[:, 0] + off, cand[:, 1] + off
        adm = _admissible_batch(row_tree.lo[gt], row_tree.hi[gt], col_tree.lo[gs], col_tree.hi[gs], eta)
        rest = cand[~adm]
        t, s = 2 * rest[:, 0], 2 * rest[:, 1]
        cand = np.stack(
            [np.stack([t, s], 1), np.stack([t, s + 1], 1), np.stack([t + 1, s], 1), np.stack([t + 1, s + 1], 1)],
            axis=1,
        ).reshape(-1, 2)
    return cand


# ---------------------------------------------------------------------------
# point sets


def grid_points(n_points, dim=2, side=1.0):
    """Regular grid with ``n_points`` points and spacing ``side / (n1 - 1)``.

    Perfect powers give a cube of side ``side``; otherwise the first axis gets
    the largest power-of-two-friendly extent and later axes are shorter.
    """
    n1 = int(round(n_points ** (1.0 / dim)))
    if n1**dim == n_points:
        shape = [n1] * dim
    else:
        # split the exponent as evenly as possible (powers of two)
        e = int(round(np.log2(n_points)))
        if 2**e != n_points:
            raise ValueError("grid size must be a perfect power or a power of two")
        base, extra = divmod(e, dim)
        shape = [2 ** (base + (1 if i < extra else 0)) for i in range(dim)]
    h = side / (max(shape) - 1) if max(shape) > 1 else 1.0
    axes = [np.arange(s) * h for s in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def load_points(path):
    """Read one point per line, whitespace or comma separated."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(v) for v in line.replace(",", " ").split()])
    return PointCloud(np.array(rows)).coords
