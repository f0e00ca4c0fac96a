"""Variable-diffusivity integral fractional diffusion on a regular 2D grid.

The discrete system is ``h^2 (D + K + C) u = b`` on the cell centers of
``[-1, 1]^2`` with ``u = 0`` on the surrounding band ``[-3, 3]^2``. ``K`` is
an H2 matrix of the (negative) fractional kernel between interior points,
``D`` is the row sum of the positive kernel over the whole extended grid
(computed as an H2 product with the ones vector) and ``C`` is a sparse
5-point diffusion correction. The system is solved with preconditioned CG;
the multigrid preconditioner works on the diffusion part.

Solver vectors are kept in cluster-tree order of the interior points; the
grid operators (``C`` and multigrid) use the natural ``i * n + j`` ordering.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .basisops import compress
from .construct import DIFFUSIVITY_FIELDS, FractionalKernel, construct_h2, kernel_matrix
from .dist.distribute import DistributedH2, ExchangePlan, distribute, local_range
from .dist.dmatvec import dist_matvec, finish_exchange, matvec_program, post_exchange
from .dist.simcomm import SimComm
from .geometry import PointCloud, build_cluster_tree
from .h2core import H2Matrix, padded_positions
from .matvec import h2_matvec

TAG_HALO = 6000


class NotPositiveDefiniteError(ArithmeticError):
    """A probe or CG step found a non-positive curvature ``v^T A v``."""


@dataclass
class FracProblem:
    """Grid, fractional order and diffusivity of one problem instance.

    ``corr_scale`` multiplies the correction stencil. The default
    ``pi^beta / (2 - 2 beta)`` is the second-order Taylor estimate of the
    kernel integral over a disc with the area of one grid cell.
    """

    n: int
    beta: float = 0.75
    kappa: str = "bump"
    corr_scale: float | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("grid side must be at least 2")
        if not 0.5 < self.beta < 1:
            raise ValueError("fractional order must satisfy 0.5 < beta < 1")
        if self.kappa not in DIFFUSIVITY_FIELDS:
            raise ValueError(f"unknown diffusivity field {self.kappa!r}")
        if self.corr_scale is None:
            self.corr_scale = np.pi**self.beta / (2.0 - 2.0 * self.beta)

    @property
    def h(self):
        return 2.0 / self.n

    @property
    def size(self):
        return self.n * self.n

    def axis(self, extended=False):
        if extended:
            return -3.0 + (np.arange(3 * self.n) + 0.5) * self.h
        return -1.0 + (np.arange(self.n) + 0.5) * self.h

    def points(self, extended=False):
        g = self.axis(extended)
        X, Y = np.meshgrid(g, g, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def interior_index(self):
        """Positions of the interior points inside the extended grid."""
        n = self.n
        i, j = np.meshgrid(np.arange(n) + n, np.arange(n) + n, indexing="ij")
        return (i * 3 * n + j).ravel()

    def diffusivity(self, pts):
        return DIFFUSIVITY_FIELDS[self.kappa](pts)

    def kernel(self, sign=-1.0):
        return FractionalKernel(self.beta, self.kappa, sign=sign)

    def rhs(self):
        return np.ones(self.size)


# ---------------------------------------------------------------------------
# operators


def _full_leaf_size(n_points, m):
    """Smallest leaf size >= m that fills every leaf exactly, if one exists below 2m."""
    q = int(np.floor(np.log2(max(n_points / m, 1))))
    if n_points % 2**q == 0 and n_points // 2**q < 2 * m:
        return n_points // 2**q
    return m


def assemble_K(problem: FracProblem, m=64, eta=0.7, p=8, tau=1e-6, tree=None, ranks=None):
    """H2 matrix of ``K`` over the interior points (tree order inside).

    Compressed to ``tau`` when ``tau > 0``; distributed over ``ranks`` when
    given.
    """
    pts = problem.points()
    if tree is None:
        tree = build_cluster_tree(PointCloud(pts), _full_leaf_size(len(pts), m))
    K = construct_h2(pts, problem.kernel(-1.0), m=tree.leaf_size, eta=eta, p=p, tree=tree)
    if tau and tau > 0:
        K = compress(K, tau)
    return distribute(K, ranks) if ranks else K


def assemble_D(problem: FracProblem, m=64, eta=0.7, p=6, ranks=None):
    """Diagonal ``D`` (natural order) as ``K_hat 1`` restricted to the interior.

    ``K_hat`` carries the positive kernel on the extended grid and only the
    block rows that contain interior points are built.
    """
    ext = problem.points(extended=True)
    inner = problem.interior_index()
    tree = build_cluster_tree(PointCloud(ext), _full_leaf_size(len(ext), m))
    Khat = construct_h2(ext, problem.kernel(+1.0), m=tree.leaf_size, eta=eta, p=p,
                        row_mask=tree.node_mask(inner), tree=tree)
    ones = np.ones(len(ext))
    if ranks and ranks > 1:
        d = dist_matvec(distribute(Khat, ranks), ones)
    else:
        d = h2_matvec(Khat, ones)
    del Khat
    return d[inner]


def direct_D(problem: FracProblem, chunk=512):
    """Reference ``D`` by direct summation over the extended grid."""
    ext = problem.points(extended=True)
    inner = problem.interior_index()
    kern = problem.kernel(+1.0)
    out = np.empty(len(inner))
    for a in range(0, len(inner), chunk):
        rows = inner[a:a + chunk]
        out[a:a + chunk] = kernel_matrix(kern, ext[rows], ext).sum(axis=1)
    return out


def diffusion_stencil(kappa_grid):
    """Unscaled 5-point matrix of ``-div(kappa grad u)`` with harmonic-mean edges.

    Outside the grid ``kappa = 1`` and ``u = 0``.
    """
    n = kappa_grid.shape[0]
    if kappa_grid.shape != (n, n):
        raise ValueError("diffusivity grid must be square")
    kpad = np.pad(kappa_grid, 1, constant_values=1.0)
    idx = np.arange(n * n).reshape(n, n)
    diag = np.zeros((n, n))
    rows, cols, vals = [], [], []
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb = kpad[1 + di:1 + di + n, 1 + dj:1 + dj + n]
        edge = 2.0 * kappa_grid * nb / (kappa_grid + nb)
        diag += edge
        I = np.arange(n)[:, None] + di + 0 * np.arange(n)[None, :]
        J = np.arange(n)[None, :] + dj + 0 * np.arange(n)[:, None]
        ok = (I >= 0) & (I < n) & (J >= 0) & (J < n)
        rows.append(idx[ok])
        cols.append(idx[I[ok], J[ok]])
        vals.append(-edge[ok])
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))
    return L.tocsr()


def assemble_C(problem: FracProblem):
    """Sparse correction ``corr_scale * h^(-2 beta - 2) * L_kappa`` (natural order)."""
    n = problem.n
    kg = problem.diffusivity(problem.points()).reshape(n, n)
    scale = problem.corr_scale * problem.h ** (-2.0 * problem.beta - 2.0)
    return (diffusion_stencil(kg) * scale).tocsr()


# ---------------------------------------------------------------------------
# preconditioners


def _prolongation_1d(nc):
    """Cell-centered linear interpolation from ``nc`` to ``2 nc`` cells, zero outside."""
    rows, cols, vals = [], [], []
    for J in range(nc):
        for fine, nb in ((2 * J, J - 1), (2 * J + 1, J + 1)):
            rows.append(fine)
            cols.append(J)
            vals.append(0.75)
            if 0 <= nb < nc:
                rows.append(fine)
                cols.append(nb)
                vals.append(0.25)
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * nc, nc))


class GeometricMultigrid:
    """Symmetric V-cycle for a cell-centered operator on an ``n x n`` grid.

    Bilinear prolongation, restriction ``P^T / 4``, Galerkin coarse
    operators, weighted Jacobi smoothing and a dense Cholesky solve once the
    grid side is at most ``coarsest``.
    """

    def __init__(self, A, n, omega=2.0 / 3.0, pre=2, post=2, coarsest=16, max_levels=None):
        A = sp.csr_matrix(A)
        if A.shape != (n * n, n * n):
            raise ValueError(f"operator of shape {A.shape} is not an {n}x{n} grid operator")
        self.omega, self.pre, self.post = omega, pre, post
        self.ops, self.inv_diag, self.P = [A], [], []
        side = n
        while side > coarsest and side % 2 == 0 and (max_levels is None or len(self.ops) < max_levels):
            P1 = _prolongation_1d(side // 2)
            P = sp.kron(P1, P1, format="csr")
            Ac = (P.T @ (self.ops[-1] @ P) * 0.25).tocsr()
            self.P.append(P)
            self.ops.append(Ac)
            side //= 2
        self.inv_diag = [1.0 / op.diagonal() for op in self.ops]
        self.coarse = sla.cho_factor(self.ops[-1].toarray())
        self.sides = [n // 2**i for i in range(len(self.ops))]

    @property
    def levels(self):
        return len(self.ops)

    def _cycle(self, level, b):
        if level == len(self.ops) - 1:
            return sla.cho_solve(self.coarse, b)
        A, dinv = self.ops[level], self.inv_diag[level]
        x = self.omega * dinv * b
        for _ in range(self.pre - 1):
            x += self.omega * dinv * (b - A @ x)
        r = b - A @ x
        P = self.P[level]
        x += P @ self._cycle(level + 1, 0.25 * (P.T @ r))
        for _ in range(self.post):
            x += self.omega * dinv * (b - A @ x)
        return x

    def __call__(self, b):
        b = np.asarray(b, dtype=float)
        if not np.any(b):
            return np.zeros_like(b)
        return self._cycle(0, b)


def mg_preconditioner(A, n, **opts):
    """One V-cycle of geometric multigrid on the grid operator ``A``."""
    return GeometricMultigrid(A, n, **opts)


class Reordered:
    """Wrap a natural-order preconditioner for tree-ordered vectors."""

    def __init__(self, inner, perm):
        self.inner = inner
        self.perm = perm

    def __call__(self, r):
        x = np.zeros_like(r)
        nat = np.empty_like(r)
        nat[self.perm] = r
        x[:] = self.inner(nat)[self.perm]
        return x


# ---------------------------------------------------------------------------
# conjugate gradients


@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residuals: list  # relative residual norms, starting with the initial one
    energy_drop: list = field(default_factory=list)  # alpha_k r_k^T z_k per step

    def anorm_errors(self):
        """A-norm error estimates ``||e_k||_A``: tail sums of the per-step energy drops."""
        drops = np.asarray(self.energy_drop)
        tails = np.cumsum(drops[::-1])[::-1]
        return np.sqrt(np.append(tails, 0.0))

    def monotone(self):
        return bool(np.all(np.asarray(self.energy_drop) >= 0))


def _run_now(gen):
    """Drive a generator that never suspends and return its value."""
    try:
        next(gen)
    except StopIteration as stop:
        return stop.value
    raise RuntimeError("serial operation tried to communicate")


def _cg(apply_A, precond, dots, b, rtol, maxit):
    """Preconditioned CG; every operation is a generator so ranks can communicate."""
    x = np.zeros_like(b)
    r = b.copy()
    bb, = yield from dots([(b, b)])
    bnorm = np.sqrt(bb)
    if bnorm == 0:
        return PCGResult(x, 0, True, [0.0])
    z = yield from precond(r)
    rho, = yield from dots([(r, z)])
    p = z.copy()
    res, drops = [1.0], []
    for it in range(1, maxit + 1):
        q = yield from apply_A(p)
        pq, = yield from dots([(p, q)])
        if not pq > 0:
            raise NotPositiveDefiniteError(f"p^T A p = {pq:.3e} at iteration {it}")
        alpha = rho / pq
        x += alpha * p
        r -= alpha * q
        drops.append(alpha * rho)
        z = yield from precond(r)
        rr, rho_new = yield from dots([(r, r), (r, z)])
        res.append(float(np.sqrt(rr) / bnorm))
        if res[-1] <= rtol:
            return PCGResult(x, it, True, res, drops)
        if not rho_new > 0:
            raise NotPositiveDefiniteError("preconditioner is not positive definite")
        p = z + (rho_new / rho) * p
        rho = rho_new
    return PCGResult(x, maxit, False, res, drops)


def _serial(fn):
    def gen(*args):
        return fn(*args)
        yield  # pragma: no cover
    return gen


def _local_dots(pairs):
    return [float(a @ b) for a, b in pairs]


def pcg(apply_A, b, rtol=1e-8, maxit=500, precond=None):
    """Preconditioned conjugate gradients on one process.

    Stops when ``||r|| / ||b|| <= rtol``; non-convergence is reported in the
    result, not raised.
    """
    b = np.asarray(b, dtype=float)
    M = precond if precond is not None else (lambda r: r.copy())
    return _run_now(_cg(_serial(apply_A), _serial(M), _serial(_local_dots), b, rtol, maxit))


def spd_probes(apply_A, n, count=8, seed=0):
    """Smallest Rayleigh quotient over random probes; raises if any is not positive."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(count):
        v = rng.standard_normal(n)
        q = float(v @ apply_A(v)) / float(v @ v)
        if not q > 0:
            raise NotPositiveDefiniteError(f"probe gave v^T A v / v^T v = {q:.3e}")
        worst = min(worst, q)
    return worst


# ---------------------------------------------------------------------------
# assembled system


@dataclass
class FracSystem:
    """``h^2 (D + K + C)`` with everything in cluster-tree order."""

    problem: FracProblem
    K: H2Matrix
    D: np.ndarray
    C: sp.csr_matrix
    C_grid: sp.csr_matrix
    perm: np.ndarray  # tree position -> natural grid index
    timings: dict = field(default_factory=dict)

    @property
    def h2(self):
        return self.problem.h ** 2

    def apply(self, u):
        Ku = h2_matvec(self.K, u, ordering="tree")
        return self.h2 * (self.D * u + Ku + self.C @ u)

    def to_natural(self, u):
        out = np.empty_like(u)
        out[self.perm] = u
        return out

    def to_tree(self, v):
        return np.asarray(v)[self.perm]

    def rhs(self):
        return self.to_tree(self.problem.rhs())

    def preconditioner(self, kind="mg", with_diagonal=False):
        """``"mg"``: V-cycle on ``h^2 C`` (plus ``h^2 diag(D)`` if asked); ``"jacobi"``; ``"none"``."""
        if kind == "none":
            return None
        if kind == "jacobi":
            d = self.h2 * (self.D + self.C.diagonal())
            return lambda r: r / d
        if kind == "mg":
            A = self.h2 * self.C_grid
            if with_diagonal:
                A = A + sp.diags(self.h2 * self.to_natural(self.D))
            return Reordered(mg_preconditioner(A, self.problem.n), self.perm)
        raise ValueError(f"unknown preconditioner {kind!r}")


def assemble_system(problem: FracProblem, m=64, eta=0.7, p=8, tau=1e-6, p_aux=6, ranks=None):
    """Build ``K``, ``D`` and ``C`` with a per-phase timing breakdown."""
    t = {}
    pts = problem.points()
    t0 = time.perf_counter()
    tree = build_cluster_tree(PointCloud(pts), _full_leaf_size(len(pts), m))

    K = construct_h2(pts, problem.kernel(-1.0), m=tree.leaf_size, eta=eta, p=p, tree=tree)
    t["k_build"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if tau and tau > 0:
        K = compress(K, tau)
    t["compression"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    D = assemble_D(problem, m=m, eta=eta, p=p_aux, ranks=ranks)
    t["d_assembly"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    C_grid = assemble_C(problem)
    perm = tree.permutation
    C = C_grid[perm][:, perm].tocsr()
    t["c_assembly"] = time.perf_counter() - t0
    return FracSystem(problem, K, D[perm], C, C_grid, perm, t)


# ---------------------------------------------------------------------------
# distributed solve


@dataclass
class RankSlice:
    """What one rank holds of the system: its block row of D and C plus the C halo plan."""

    lo: int
    hi: int
    D: np.ndarray
    C_local: sp.csr_matrix
    C_halo: sp.csr_matrix
    plan: ExchangePlan
    layout: np.ndarray  # positions of the local points inside the padded leaf layout


def _point_ranges(tree, c, n_ranks):
    b, e = tree.ranges(c)
    return [(int(b[r]), int(e[r])) for r in range(n_ranks)]


def slice_system(system: FracSystem, Kd: DistributedH2):
    """Split D and C by the block-row partition of ``Kd`` and plan the C halo."""
    tree, P, c = system.K.row_tree, Kd.n_ranks, Kd.c
    ranges = _point_ranges(tree, c, P)
    starts = np.array([lo for lo, _ in ranges])
    pad = padded_positions(tree, Kd.leaf_size)
    need = []
    for lo, hi in ranges:
        rows = system.C[lo:hi]
        cols = np.unique(rows.indices)
        need.append(cols[(cols < lo) | (cols >= hi)])
    plans = []
    for r, (lo, hi) in enumerate(ranges):
        owners = np.searchsorted(starts, need[r], side="right") - 1
        pid = np.unique(owners)
        ptr = np.concatenate([[0], np.cumsum([np.count_nonzero(owners == o) for o in pid])]).astype(np.int64)
        plans.append(ExchangePlan(pid.astype(np.int64), ptr, need[r].astype(np.int64)))
    for r, plan in enumerate(plans):
        for i, src in enumerate(plan.pid):
            plans[src].send_to.append(r)
            plans[src].send_nodes.append(plan.segment(i))
    out = []
    for r, (lo, hi) in enumerate(ranges):
        rows = system.C[lo:hi].tocoo()
        local = (rows.col >= lo) & (rows.col < hi)
        Cl = sp.csr_matrix((rows.data[local], (rows.row[local], rows.col[local] - lo)), shape=(hi - lo, hi - lo))
        halo_cols = plans[r].remap(rows.col[~local])
        Ch = sp.csr_matrix((rows.data[~local], (rows.row[~local], halo_cols)), shape=(hi - lo, plans[r].n_recv))
        leaf_lo, _ = local_range(r, Kd.depth, c)
        lay = pad[lo:hi] - leaf_lo * Kd.leaf_size
        out.append(RankSlice(lo, hi, system.D[lo:hi], Cl, Ch, plans[r], lay))
    return out


def pcg_program(ctx, Kd: DistributedH2, sl: RankSlice, h2, b_local, precond, rtol, maxit):
    """Rank program of distributed PCG.

    Vector operations and dot products are local with rank-ordered
    reductions; the preconditioner is applied on rank 0 to the gathered
    residual.
    """
    m = Kd.leaf_size
    n_leaves = (sl.layout.max() // m + 1) if len(sl.layout) else 0
    branch_leaves = Kd.branches[ctx.rank].U.leaves.shape[0]
    n_leaves = max(n_leaves, branch_leaves)

    def apply_A(u):
        reqs = post_exchange(ctx, sl.plan, u, sl.lo, TAG_HALO)
        ul = np.zeros((n_leaves * m, 1))
        ul[sl.layout, 0] = u
        yl = yield from matvec_program(ctx, Kd, ul.reshape(n_leaves, m, 1))
        Ku = yl.reshape(-1)[sl.layout]
        halo = yield from finish_exchange(ctx, reqs, ())
        Cu = sl.C_local @ u + (sl.C_halo @ halo if sl.plan.n_recv else 0.0)
        return h2 * (sl.D * u + Ku + Cu)

    def apply_M(r):
        parts = yield from ctx.gather(r, root=0)
        if ctx.rank == 0:
            full = np.concatenate(parts)
            z = precond(full) if precond is not None else full.copy()
            bounds = np.cumsum([0] + [len(x) for x in parts])
            items = [z[bounds[i]:bounds[i + 1]] for i in range(ctx.size)]
        else:
            items = None
        return (yield from ctx.scatter(items, root=0))

    def dots(pairs):
        local = np.array([float(a @ b) for a, b in pairs])
        total = yield from ctx.allreduce(local)
        return list(total)

    return (yield from _cg(apply_A, apply_M, dots, b_local, rtol, maxit))


def dist_pcg(system: FracSystem, n_ranks, b=None, rtol=1e-8, maxit=500, precond=None,
             policy="round_robin", seed=0):
    """PCG on ``n_ranks`` simulated ranks; returns (PCGResult in tree order, SimComm)."""
    Kd = distribute(system.K, n_ranks)
    slices = slice_system(system, Kd)
    b = system.rhs() if b is None else np.asarray(b, dtype=float)
    comm = SimComm(n_ranks, policy=policy, seed=seed)
    args = [(Kd, s, system.h2, b[s.lo:s.hi], precond, rtol, maxit) for s in slices]
    results = comm.run(pcg_program, args)
    head = results[0]
    x = np.concatenate([r.x for r in results])
    return PCGResult(x, head.iterations, head.converged, head.residuals, head.energy_drop), comm


# ---------------------------------------------------------------------------
# driver


@dataclass
class FDResult:
    n: int
    ranks: int
    iterations: int
    converged: bool
    residuals: list
    timings: dict
    u: np.ndarray  # natural grid order

    @property
    def time_per_iteration(self):
        return self.timings.get("solve", 0.0) / max(self.iterations, 1)


def solve_fd(n, beta=0.75, tau=1e-6, ranks=1, rtol=1e-8, maxit=500, precond="mg", kappa="bump",
             corr_scale=None, m=64, eta=0.7, p=8, p_aux=6, probes=4, seed=0):
    """Assemble and solve one problem; timings cover every setup phase and the solve."""
    problem = FracProblem(n, beta, kappa, corr_scale)
    system = assemble_system(problem, m=m, eta=eta, p=p, tau=tau, p_aux=p_aux, ranks=ranks)
    t = system.timings
    t0 = time.perf_counter()
    M = system.preconditioner(precond)
    t["precond_setup"] = time.perf_counter() - t0
    if probes:
        spd_probes(system.apply, problem.size, probes, seed)
    t0 = time.perf_counter()
    if ranks > 1:
        res, _ = dist_pcg(system, ranks, rtol=rtol, maxit=maxit, precond=M)
    else:
        res = pcg(system.apply, system.rhs(), rtol=rtol, maxit=maxit, precond=M)
    t["solve"] = time.perf_counter() - t0
    return FDResult(n, ranks, res.iterations, res.converged, res.residuals, t, system.to_natural(res.x))
