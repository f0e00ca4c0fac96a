"""Basis orthogonalization and algebraic recompression.

Each stage is split into level-wise steps over plain arrays so the
distributed driver can run the same arithmetic on its own node subsets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import StructureError, ordinals
from .h2core import BasisTree, CouplingLevel, H2Matrix


class PreconditionError(ValueError):
    """Input does not satisfy the operation's precondition."""


# ---------------------------------------------------------------------------
# sign-fixed factorizations


_STACK_BUDGET = 1 << 27  # bytes of temporary stacks per batched call


def qr_sign_fixed(M):
    """Batched reduced QR with non-negative R diagonal; R is padded to (k, k)."""
    M = np.asarray(M, dtype=np.float64)
    n, h, k = M.shape
    if n == 0 or k == 0:
        return np.zeros((n, h, k)), np.zeros((n, k, k))
    Q, R = np.linalg.qr(M)
    d = np.sign(np.diagonal(R, axis1=1, axis2=2))
    d[d == 0] = 1.0
    Q = Q * d[:, None, :]
    R = R * d[:, :, None]
    r = R.shape[1]
    if r < k:
        Q = np.concatenate([Q, np.zeros((n, h, k - r))], axis=2)
        R = np.concatenate([R, np.zeros((n, k - r, k))], axis=1)
    return Q, R


def r_factor_sign_fixed(M):
    """R of :func:`qr_sign_fixed` without forming Q."""
    M = np.asarray(M, dtype=np.float64)
    n, h, k = M.shape
    if n == 0 or k == 0:
        return np.zeros((n, k, k))
    R = np.linalg.qr(M, mode="r")
    d = np.sign(np.diagonal(R, axis1=1, axis2=2))
    d[d == 0] = 1.0
    R = R * d[:, :, None]
    if R.shape[1] < k:
        R = np.concatenate([R, np.zeros((n, k - R.shape[1], k))], axis=1)
    return R


def svd_sign_fixed(M):
    """Batched thin SVD; each left singular vector has its largest-magnitude entry positive."""
    W, s, Zt = np.linalg.svd(M, full_matrices=False)
    if W.size:
        idx = np.argmax(np.abs(W), axis=1)
        pick = np.take_along_axis(W, idx[:, None, :], axis=1)[:, 0, :]
        sgn = np.where(pick < 0, -1.0, 1.0)
        W = W * sgn[:, None, :]
        Zt = Zt * sgn[:, :, None]
    return W, s, Zt


def _t(a):
    return np.swapaxes(a, 1, 2)


def parent_index(n_children):
    return np.arange(n_children) // 2


# ---------------------------------------------------------------------------
# orthogonalization


def orthogonalize_leaves(leaves):
    """Q, R of every leaf basis."""
    return qr_sign_fixed(leaves)


def orthogonalize_level(R_children, transfers):
    """Stack ``R_c E_c`` of sibling pairs, factor, split Q into new transfers.

    Returns (new transfers, parent R factors).
    """
    n, kc, kp = transfers.shape
    if n == 0:
        return transfers.copy(), np.zeros((0, kp, kp))
    RE = np.matmul(R_children, transfers)  # (n, kc, kp)
    Q, R = qr_sign_fixed(RE.reshape(n // 2, 2 * kc, kp))
    return np.ascontiguousarray(Q.reshape(n, kc, kp)), R


def orthogonalize_basis(B: BasisTree):
    """Orthonormal basis tree plus the per-level R factors (old = new R)."""
    q = B.depth
    R = [None] * (q + 1)
    Q, R[q] = orthogonalize_leaves(B.leaves)
    transfers = [None] * (q + 1)
    for level in range(q, 0, -1):
        transfers[level], R[level - 1] = orthogonalize_level(R[level], B.transfers[level])
    return BasisTree(Q, transfers), R


def apply_factors(blocks, rows, cols, RU, RV):
    """``R^U_t S R^V_s^T`` for every block."""
    out = np.empty((len(blocks), RU.shape[1], RV.shape[1]))
    step = max(1, _STACK_BUDGET // max(1, 8 * RU.shape[1] * max(RU.shape[2], RV.shape[1])))
    for a in range(0, len(blocks), step):
        b = a + step
        out[a:b] = np.matmul(np.matmul(RU[rows[a:b]], blocks[a:b]), _t(RV[cols[a:b]]))
    return out


def orthogonalize(A: H2Matrix) -> H2Matrix:
    """Same operator with orthonormal nested bases on both sides."""
    U, RU = orthogonalize_basis(A.U)
    if A.V is A.U:
        V, RV = U, RU
    else:
        V, RV = orthogonalize_basis(A.V)
    couplings = [
        CouplingLevel(c.rows, c.cols, apply_factors(c.blocks, c.rows, c.cols, RU[l], RV[l]), c.ordinal)
        for l, c in enumerate(A.couplings)
    ]
    return H2Matrix(A.row_tree, A.col_tree, U, V, couplings, A.dense, dict(A.meta))


def basis_orthogonality_error(B: BasisTree):
    """Max deviation of explicit V^T V from a 0/1 diagonal over all levels."""
    from .h2core import expand_basis

    worst = 0.0
    for level in range(B.depth + 1):
        Vl = expand_basis(B, level)
        G = np.matmul(_t(Vl), Vl)
        d = np.diagonal(G, axis1=1, axis2=2)
        target = np.where(d > 0.5, 1.0, 0.0)
        dev = G.copy()
        idx = np.arange(G.shape[1])
        dev[:, idx, idx] -= target
        worst = max(worst, float(np.abs(dev).max()) if dev.size else 0.0)
    return worst


def _local_orthogonality_error(B: BasisTree):
    """Orthogonality check using only leaves and sibling transfer stacks."""
    def dev(M):
        G = np.matmul(_t(M), M)
        d = np.diagonal(G, axis1=1, axis2=2)
        idx = np.arange(G.shape[1])
        G[:, idx, idx] -= np.where(d > 0.5, 1.0, 0.0)
        return float(np.abs(G).max()) if G.size else 0.0

    worst = dev(B.leaves)
    for level in range(1, B.depth + 1):
        t = B.transfers[level]
        worst = max(worst, dev(t.reshape(t.shape[0] // 2, 2 * t.shape[1], t.shape[2])))
    return worst


# ---------------------------------------------------------------------------
# reweighing


def column_ordinals(level: CouplingLevel):
    """Order of the blocks of each block column (by row) and their ordinal."""
    order = np.argsort(level.cols, kind="stable")
    ords = np.empty(len(level), dtype=np.int64)
    ords[order] = ordinals(level.cols[order])
    return ords


def side_view(level: CouplingLevel, side):
    """(owner node, stack position, block as it enters the owner's stack)."""
    if side == "row":
        return level.rows, level.ordinal, _t(level.blocks)
    return level.cols, column_ordinals(level), level.blocks


def reweigh_level(top, owner, position, stack_blocks, n_nodes, k, slots):
    """R factors of one level from stacks ``[top; block_1; ...; block_slots]``.

    ``top`` holds ``R_parent E^T`` per node (None at the root). ``slots``
    fixes the stack height so every node's factorization sees the same shape
    regardless of how the level is split among ranks.
    """
    kp = 0 if top is None else top.shape[1]
    kb = stack_blocks.shape[1]
    height = kp + slots * kb
    # stacks are factored in node chunks to bound the workspace
    step = max(1, _STACK_BUDGET // max(1, height * k * 8))
    R = np.empty((n_nodes, k, k))
    slot_of = [position == g for g in range(slots)]
    for a in range(0, n_nodes, step):
        b = min(n_nodes, a + step)
        Z = np.zeros((b - a, height, k))
        if kp:
            Z[:, :kp, :] = top[a:b]
        for g in range(slots):
            sel = slot_of[g] & (owner >= a) & (owner < b)
            if sel.any():
                Z[owner[sel] - a, kp + g * kb:kp + (g + 1) * kb, :] = stack_blocks[sel]
        R[a:b] = r_factor_sign_fixed(Z)
    return R


def inherited_weights(R_parent, transfers):
    """``R_parent E_i^T`` for every child i."""
    return np.matmul(R_parent[parent_index(transfers.shape[0])], _t(transfers))


def _level_slots(c: CouplingLevel, side):
    if not len(c):
        return 0
    _, pos, _ = side_view(c, side)
    return int(pos.max()) + 1


def reweigh_downsweep(A: H2Matrix, side="row", check=True):
    """Per-level R factors exposing each node's far-field block row (or column)."""
    B = A.U if side == "row" else A.V
    if check and _local_orthogonality_error(B) > 1e-8:
        raise PreconditionError("reweighing needs an orthogonal basis; call orthogonalize first")
    ks = B.ranks
    R = []
    for level, c in enumerate(A.couplings):
        owner, pos, blocks = side_view(c, side)
        top = None if level == 0 else inherited_weights(R[level - 1], B.transfers[level])
        R.append(reweigh_level(top, owner, pos, blocks, 2**level, ks[level], _level_slots(c, side)))
    return R


# ---------------------------------------------------------------------------
# truncation


def retained_rank(s, threshold, tau):
    """Number of singular values kept: all for tau = 0, otherwise s >= threshold and s > 0."""
    if tau == 0:
        return np.full(s.shape[0], s.shape[1], dtype=np.int64)
    keep = (s >= threshold[:, None]) & (s > 0)
    return keep.sum(axis=1).astype(np.int64)


def thresholds(s, tau, scale=None):
    smax = s[:, 0] if s.shape[1] else np.zeros(s.shape[0])
    if scale is None:
        return tau * smax
    return np.full_like(smax, tau * scale)


@dataclass
class TruncationStep:
    """Unpadded SVD result of one level; ``finalize`` pads to the level rank."""

    W: np.ndarray
    M: np.ndarray  # matrix whose range is being truncated (before weighting)
    ranks: np.ndarray

    @property
    def level_rank(self):
        return int(self.ranks.max()) if len(self.ranks) else 0


def truncate_leaves_step(leaves, R, tau, scale=None):
    W, s, _ = svd_sign_fixed(np.matmul(leaves, _t(R)))
    return TruncationStep(W, leaves, retained_rank(s, thresholds(s, tau, scale), tau))


def truncate_level_step(T_children, transfers, R, tau, scale=None):
    """SVD of ``stack(T_c1 E_c1; T_c2 E_c2) R^T`` for every parent."""
    n, kp = transfers.shape[0], transfers.shape[2]
    TE = np.matmul(T_children, transfers)  # (n, r_l, k_{l-1})
    M = TE.reshape(n // 2, 2 * TE.shape[1], kp)
    W, s, _ = svd_sign_fixed(np.matmul(M, _t(R)))
    return TruncationStep(W, M, retained_rank(s, thresholds(s, tau, scale), tau))


def finalize_step(step: TruncationStep, rank):
    """Padded new basis (leaves or stacked transfers) and maps T = W_r^T M."""
    n, h, _ = step.W.shape
    keep = np.arange(step.W.shape[2])[None, :] < step.ranks[:, None]
    W = step.W * keep[:, None, :]
    if W.shape[2] >= rank:
        W = W[:, :, :rank]
    else:
        W = np.concatenate([W, np.zeros((n, h, rank - W.shape[2]))], axis=2)
    W = np.ascontiguousarray(W)
    T = np.matmul(_t(W), step.M)
    return W, T


def split_transfers(W_stacked):
    """(n/2, 2 r_l, r_{l-1}) stacked sibling transfers -> (n, r_l, r_{l-1})."""
    n2, h, r = W_stacked.shape
    return np.ascontiguousarray(W_stacked.reshape(2 * n2, h // 2, r))


def truncate_upsweep(B: BasisTree, R, tau, scale=None, node_ranks=None):
    """New basis tree, per-level maps T and the new level ranks.

    If ``node_ranks`` is a list it receives the unpadded rank of every node,
    level by level.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    q = B.depth
    T = [None] * (q + 1)
    transfers = [None] * (q + 1)
    kept = [None] * (q + 1)
    step = truncate_leaves_step(B.leaves, R[q], tau, scale)
    kept[q] = step.ranks
    leaves, T[q] = finalize_step(step, step.level_rank)
    for level in range(q, 0, -1):
        step = truncate_level_step(T[level], B.transfers[level], R[level - 1], tau, scale)
        kept[level - 1] = step.ranks
        W, T[level - 1] = finalize_step(step, step.level_rank)
        transfers[level] = split_transfers(W)
    if node_ranks is not None:
        node_ranks.extend(kept)
    newB = BasisTree(leaves, transfers)
    return newB, T, newB.ranks


def project_couplings(A: H2Matrix, TU, TV, U=None, V=None) -> H2Matrix:
    """Couplings ``T^U_t S T^V_s^T`` in the truncated bases; dense layer untouched."""
    if len(TU) != len(A.couplings) or len(TV) != len(A.couplings):
        raise StructureError("a truncation map is required for every level")
    couplings = []
    for level, c in enumerate(A.couplings):
        if TU[level] is None or TV[level] is None:
            raise StructureError(f"missing truncation map at level {level}")
        couplings.append(CouplingLevel(c.rows, c.cols, apply_factors(c.blocks, c.rows, c.cols, TU[level], TV[level]),
                                       c.ordinal))
    return H2Matrix(A.row_tree, A.col_tree, U if U is not None else A.U, V if V is not None else A.V,
                    couplings, A.dense, dict(A.meta))


def global_scale(R):
    """Largest spectral norm among all R factors of one side."""
    best = 0.0
    for r in R:
        if r is not None and r.size:
            best = max(best, float(np.linalg.norm(r, ord=2, axis=(1, 2)).max()))
    return best


def compression_pass(A: H2Matrix, tau, threshold="node"):
    """One orthogonalize/reweigh/truncate/project sweep; also returns per-node ranks."""
    B = orthogonalize(A)
    RU = reweigh_downsweep(B, "row", check=False)
    RV = reweigh_downsweep(B, "col", check=False)
    su = global_scale(RU) if threshold == "global" else None
    sv = global_scale(RV) if threshold == "global" else None
    ranks_u, ranks_v = [], []
    U, TU, _ = truncate_upsweep(B.U, RU, tau, su, ranks_u)
    V, TV, _ = truncate_upsweep(B.V, RV, tau, sv, ranks_v)
    return project_couplings(B, TU, TV, U, V), ranks_u + ranks_v


def _same_ranks(a, b):
    return a is not None and len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def compress(A: H2Matrix, tau, threshold="node", max_sweeps=8) -> H2Matrix:
    """Recompress to relative accuracy ``tau``.

    ``threshold="node"`` keeps singular values above ``tau`` times the node's
    largest one; ``"global"`` compares against ``tau`` times the largest block
    row norm of the whole basis instead.

    Truncating one side perturbs the other side's singular values, so a
    single sweep can leave values just under the threshold for the next
    call. Sweeps are repeated until no node changes rank. The last sweep then
    projects onto the full span of each basis, which makes ``compress``
    idempotent.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if threshold not in ("node", "global"):
        raise ValueError("threshold must be 'node' or 'global'")
    if sum(len(c) for c in A.couplings) == 0:
        return A.copy()
    out, ranks = compression_pass(A, tau, threshold)
    sweeps = 1
    while tau > 0 and sweeps < max_sweeps:
        nxt, nranks = compression_pass(out, tau, threshold)
        sweeps += 1
        stable = _same_ranks(ranks, nranks)
        out, ranks = nxt, nranks
        if stable:
            break
    out.meta["tau"] = float(tau)
    out.meta["sweeps"] = sweeps
    return out
