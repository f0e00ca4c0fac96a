"""``h2kit`` command line.

Every subcommand prints a short human-readable report and, with ``--csv``,
writes rows of the fixed schema ``operation,N,P,nv,metric,value``. With
``--repro`` wall-clock metrics are left out so that two runs with the same
flags and seed produce byte-identical files.

Exit status: 0 success, 1 a ``--check`` failed, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import sys
import time

import numpy as np

from . import kernels
from .basisops import compress
from .construct import ExponentialKernel, construct_h2, kernel_from_meta
from .dist import communication_stats, dist_compress, dist_matvec, distribute, gather_h2
from .fdsolver import FracProblem, solve_fd
from .geometry import StructureError, grid_points
from .h2core import memory_report
from .h2io import load_h2, save_h2
from .matvec import h2_matvec, kernel_rows_product, matvec_flops, sample_rows, sampled_relative_error

CSV_COLUMNS = ("operation", "N", "P", "nv", "metric", "value")
TIMING_METRICS = {"seconds", "gflops_per_s", "time_per_iteration"}
EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class Report:
    """Collects CSV rows and ``--check`` outcomes of one invocation."""

    def __init__(self, repro=False):
        self.rows = []
        self.repro = repro
        self.failures = []

    def add(self, operation, N, P, nv, metric, value):
        if self.repro and (metric in TIMING_METRICS or metric.startswith("t_")):
            return
        if isinstance(value, (float, np.floating)):
            value = repr(float(value))
        self.rows.append((operation, int(N), int(P), int(nv), metric, value))

    def check(self, ok, message):
        status = "PASS" if ok else "FAIL"
        print(f"check {status}: {message}")
        if not ok:
            self.failures.append(message)

    def write(self, path):
        if not path:
            return
        fh = sys.stdout if path == "-" else open(path, "w", newline="")
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            w.writerows(self.rows)
        finally:
            if fh is not sys.stdout:
                fh.close()


# ---------------------------------------------------------------------------
# helpers


def _kernel_for(name, args):
    if name == "exp2d":
        return ExponentialKernel(args.length if args.length else 0.1), 2
    if name == "exp3d":
        return ExponentialKernel(args.length if args.length else 0.2), 3
    raise ValueError(f"unknown kernel {name!r}")


def _build_matrix(args):
    if args.kernel == "fd-frac":
        side = int(round(np.sqrt(args.n)))
        if side * side != args.n:
            raise ValueError("fd-frac needs a square point count")
        prob = FracProblem(side, beta=args.beta, kappa=args.kappa)
        pts = prob.points()
        kern = prob.kernel(-1.0)
    else:
        kern, dim = _kernel_for(args.kernel, args)
        pts = grid_points(args.n, dim)
    A = construct_h2(pts, kern, m=args.m, eta=args.eta, p=args.p)
    return A, kern, pts


def _oracle_error(A, x, y, rng, fraction=0.1):
    """Sampled relative error of ``y = A x`` against direct kernel sums (None if not rebuildable)."""
    try:
        kern = kernel_from_meta(A.meta["kernel"], A.meta["params"])
    except (KeyError, ValueError):
        return None
    pts = A.row_tree.points
    rows = sample_rows(A.shape[0], fraction, rng)
    return sampled_relative_error(lambda r, v: kernel_rows_product(kern, pts, r, v), y, x, rows)


def _ranks(text):
    try:
        out = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rank list {text!r}")
    if not out or any(p < 1 for p in out):
        raise argparse.ArgumentTypeError("ranks must be positive integers")
    return out


def _load(path):
    try:
        return load_h2(path)
    except FileNotFoundError:
        raise ValueError(f"no such file: {path}")


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# subcommands


def cmd_build(args, rep):
    (A, kern, pts), dt = _timed(_build_matrix, args)
    N = A.shape[0]
    mem = memory_report(A)
    print(f"built {args.kernel} N={N} depth={A.depth} leaf={A.leaf_size} ranks={A.U.ranks[-1]} "
          f"C_sp={A.sparsity_constant()} memory={mem['total_bytes'] / 1e6:.1f} MB in {dt:.2f}s")
    rep.add("build", N, 1, 1, "depth", A.depth)
    rep.add("build", N, 1, 1, "sparsity_constant", A.sparsity_constant())
    rep.add("build", N, 1, 1, "total_bytes", mem["total_bytes"])
    rep.add("build", N, 1, 1, "seconds", dt)
    if args.check:
        if N > args.oracle_cap:
            print(f"check skipped: N={N} exceeds oracle cap {args.oracle_cap}")
        else:
            rng = np.random.default_rng(args.seed)
            x = rng.uniform(size=N)
            err = _oracle_error(A, x, h2_matvec(A, x), rng)
            rep.add("build", N, 1, 1, "error", err)
            rep.check(err <= args.tol, f"sampled construction error {err:.3e} <= {args.tol:g}")
    if args.out:
        save_h2(A, args.out)
        print(f"wrote {args.out}")


def cmd_inspect(args, rep):
    A = _load(args.file)
    N = A.shape[0]
    mem = memory_report(A)
    print(f"N={N} depth={A.depth} leaf_size={A.leaf_size} kernel={A.meta.get('kernel')} "
          f"C_sp={A.sparsity_constant()}")
    print(f"memory: dense {mem['dense_bytes'] / 1e6:.2f} MB, low-rank {mem['lowrank_bytes'] / 1e6:.2f} MB, "
          f"total {mem['total_bytes'] / 1e6:.2f} MB")
    print("level  nodes  rank_u  rank_v  blocks  sparsity")
    ku, kv = A.U.ranks, A.V.ranks
    for level, c in enumerate(A.couplings):
        print(f"{level:5d}  {2**level:5d}  {ku[level]:6d}  {kv[level]:6d}  {len(c):6d}  {c.sparsity():8d}")
        rep.add("inspect", N, 1, 1, f"level{level}_rank_u", ku[level])
        rep.add("inspect", N, 1, 1, f"level{level}_blocks", len(c))
    print(f"dense leaf blocks: {len(A.dense)}")
    rep.add("inspect", N, 1, 1, "depth", A.depth)
    rep.add("inspect", N, 1, 1, "sparsity_constant", A.sparsity_constant())
    rep.add("inspect", N, 1, 1, "dense_blocks", len(A.dense))
    for key, v in mem.items():
        rep.add("inspect", N, 1, 1, key, v)
    if args.check:
        try:
            A.validate()
            rep.check(True, "structure valid")
        except StructureError as exc:
            rep.check(False, f"structure invalid: {exc}")


def cmd_matvec(args, rep):
    A = _load(args.file)
    N = A.shape[0]
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(size=(N, args.nv))
    best = np.inf
    for _ in range(args.reps):
        y, dt = _timed(h2_matvec, A, x)
        best = min(best, dt)
    flops = matvec_flops(A, args.nv)
    print(f"matvec N={N} nv={args.nv}: {best * 1e3:.2f} ms, {flops / best / 1e9:.2f} Gflop/s "
          f"(backend {kernels.BACKEND})")
    rep.add("matvec", N, 1, args.nv, "seconds", best)
    rep.add("matvec", N, 1, args.nv, "flops", flops)
    rep.add("matvec", N, 1, args.nv, "gflops_per_s", flops / best / 1e9)
    rep.add("matvec", N, 1, args.nv, "checksum", float(np.sum(y)))
    if args.check:
        if N > args.oracle_cap:
            print(f"check skipped: N={N} exceeds oracle cap {args.oracle_cap}")
            return
        err = _oracle_error(A, x, y, rng)
        if err is None:
            rep.check(False, "kernel cannot be rebuilt from the file")
            return
        rep.add("matvec", N, 1, args.nv, "error", err)
        rep.check(err <= args.tol, f"sampled matvec error {err:.3e} <= {args.tol:g}")


def cmd_compress(args, rep):
    A = _load(args.file)
    N = A.shape[0]
    before = memory_report(A)
    C, dt = _timed(compress, A, args.tau, args.threshold)
    after = memory_report(C)
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(size=N)
    y0, y1 = h2_matvec(A, x), h2_matvec(C, x)
    rows = sample_rows(N, 0.1, rng)
    err = float(np.linalg.norm(y0[rows] - y1[rows]) / np.linalg.norm(y0[rows]))
    ratio = before["lowrank_bytes"] / max(after["lowrank_bytes"], 1)
    print(f"compress tau={args.tau:g}: ranks {A.U.ranks} -> {C.U.ranks}, low-rank memory "
          f"{before['lowrank_bytes'] / 1e6:.1f} -> {after['lowrank_bytes'] / 1e6:.1f} MB ({ratio:.2f}x), "
          f"error {err:.2e}, {C.meta.get('sweeps')} sweeps, {dt:.2f}s")
    for level, k in enumerate(C.U.ranks):
        rep.add("compress", N, 1, 1, f"level{level}_rank_u", k)
    for key in ("dense_bytes", "lowrank_bytes", "total_bytes"):
        rep.add("compress", N, 1, 1, f"before_{key}", before[key])
        rep.add("compress", N, 1, 1, f"after_{key}", after[key])
    rep.add("compress", N, 1, 1, "lowrank_reduction", ratio)
    rep.add("compress", N, 1, 1, "error", err)
    rep.add("compress", N, 1, 1, "seconds", dt)
    if args.check:
        tol = args.tol if args.tol is not None else 10 * args.tau
        rep.check(err <= tol, f"compression error {err:.3e} <= {tol:g}")
    if args.out:
        save_h2(C, args.out)
        print(f"wrote {args.out}")


def cmd_dist_matvec(args, rep):
    A = _load(args.file)
    N = A.shape[0]
    x = np.random.default_rng(args.seed).uniform(size=(N, args.nv))
    ref = h2_matvec(A, x)
    for P in args.ranks:
        D = distribute(A, P)
        (y, comm), dt = _timed(dist_matvec, D, x, policy=args.policy, seed=args.seed, return_comm=True)
        same = np.array_equal(y, ref)
        stats = communication_stats(D, comm, args.nv)
        vol_ok = all(pb == tb for _, _, _, pb, tb, _ in stats.rows())
        recv = sum(tb for _, _, _, _, tb, _ in stats.rows())
        print(f"P={P}: bitwise {'equal' if same else 'DIFFERENT'}, tree exchange {recv} bytes, "
              f"plan {'matches' if vol_ok else 'MISMATCH'}, {dt:.2f}s")
        err = float(np.abs(y - ref).max() / max(np.abs(ref).max(), np.finfo(float).tiny))
        for rank, level, nodes, pb, tb, msgs in stats.rows():
            rep.add("dist-matvec", N, P, args.nv, f"rank{rank}_level{level}_recv_messages", msgs)
            rep.add("dist-matvec", N, P, args.nv, f"rank{rank}_level{level}_recv_bytes", tb)
        rep.add("dist-matvec", N, P, args.nv, "bitwise_equal", int(same))
        rep.add("dist-matvec", N, P, args.nv, "single_rank_error", err)
        rep.add("dist-matvec", N, P, args.nv, "seconds", dt)
        if args.check:
            rep.check(same, f"P={P} bitwise equal to single-rank product")
            rep.check(vol_ok, f"P={P} received volume equals plan prediction")


def cmd_dist_compress(args, rep):
    A = _load(args.file)
    N = A.shape[0]
    ref = compress(A, args.tau, args.threshold)
    x = np.random.default_rng(args.seed).uniform(size=N)
    yr = h2_matvec(ref, x)
    for P in args.ranks:
        D, dt = _timed(dist_compress, distribute(A, P), args.tau, args.threshold, policy=args.policy,
                       seed=args.seed)
        G = gather_h2(D)
        same_ranks = G.U.ranks == ref.U.ranks and G.V.ranks == ref.V.ranks
        diff = float(np.linalg.norm(h2_matvec(G, x) - yr) / np.linalg.norm(yr))
        print(f"P={P}: ranks {'match' if same_ranks else 'DIFFER'} {G.U.ranks}, matvec difference {diff:.2e}, "
              f"{dt:.2f}s")
        rep.add("dist-compress", N, P, 1, "ranks_match", int(same_ranks))
        rep.add("dist-compress", N, P, 1, "matvec_difference", diff)
        rep.add("dist-compress", N, P, 1, "seconds", dt)
        if args.check:
            rep.check(same_ranks, f"P={P} per-level ranks equal single-rank compress")
            rep.check(diff <= 1e-12, f"P={P} matvec difference {diff:.2e} <= 1e-12")


def cmd_solve_fd(args, rep):
    N = args.n * args.n
    for P in args.ranks:
        res = solve_fd(args.n, beta=args.beta, tau=args.tau, ranks=P, rtol=args.rtol, maxit=args.maxit,
                       precond=args.precond, kappa=args.kappa, seed=args.seed)
        t = res.timings
        print(f"solve-fd n={args.n} N={N} P={P}: {res.iterations} iterations, "
              f"{'converged' if res.converged else 'NOT converged'}, final residual {res.residuals[-1]:.2e}")
        print("setup: " + ", ".join(f"{k} {v:.2f}s" for k, v in t.items()))
        print(f"time per iteration {res.time_per_iteration * 1e3:.1f} ms")
        for key, v in t.items():
            rep.add("solve-fd", N, P, 1, f"t_{key}", v)
        rep.add("solve-fd", N, P, 1, "iterations", res.iterations)
        rep.add("solve-fd", N, P, 1, "converged", int(res.converged))
        rep.add("solve-fd", N, P, 1, "time_per_iteration", res.time_per_iteration)
        for i, r in enumerate(res.residuals):
            rep.add("solve-fd", N, P, 1, f"residual{i}", r)
        if args.check:
            rep.check(res.converged, f"P={P} PCG reached rtol {args.rtol:g}")


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--csv", metavar="PATH", help="write result rows as CSV ('-' for stdout)")
    p.add_argument("--check", action="store_true", help="verify results; exit 1 on failure")
    p.add_argument("--seed", type=int, default=0, help="seed for every random quantity")
    p.add_argument("--repro", action="store_true", help="omit wall-clock metrics from the CSV")
    p.add_argument("--backend", choices=("compiled", "python"), help="kernel backend")


def _matrix_arg(p):
    p.add_argument("file", nargs="?", help=".h2m file (or use --matrix)")
    p.add_argument("--matrix", metavar="FILE", help=".h2m file")


def build_parser():
    ap = argparse.ArgumentParser(prog="h2kit", description="H2 matrix construction, products and compression.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="construct an H2 matrix from a kernel on a grid")
    _common(p)
    p.add_argument("--kernel", choices=("exp2d", "exp3d", "fd-frac"), default="exp2d")
    p.add_argument("--n", type=int, required=True, help="number of points")
    p.add_argument("--m", type=int, default=64, help="leaf size")
    p.add_argument("--eta", type=float, default=0.9)
    p.add_argument("--p", type=int, default=8, help="Chebyshev points per axis")
    p.add_argument("--length", type=float, help="correlation length (exp kernels)")
    p.add_argument("--beta", type=float, default=0.75, help="fractional order (fd-frac)")
    p.add_argument("--kappa", choices=("bump", "unit"), default="bump", help="diffusivity field (fd-frac)")
    p.add_argument("--out", metavar="FILE", help="write the matrix to an .h2m file")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--oracle-cap", type=int, default=4096)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("inspect", help="report structure, ranks and memory of an .h2m file")
    _common(p)
    _matrix_arg(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("matvec", help="time products with random vectors")
    _common(p)
    _matrix_arg(p)
    p.add_argument("--nv", type=int, default=1, help="number of vectors")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--oracle-cap", type=int, default=4096)
    p.set_defaults(func=cmd_matvec)

    p = sub.add_parser("compress", help="algebraic recompression")
    _common(p)
    _matrix_arg(p)
    p.add_argument("--tau", type=float, default=1e-3)
    p.add_argument("--threshold", choices=("node", "global"), default="node")
    p.add_argument("--tol", type=float)
    p.add_argument("--out", metavar="FILE")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("dist-matvec", help="distributed product on simulated ranks")
    _common(p)
    _matrix_arg(p)
    p.add_argument("--ranks", type=_ranks, default=[2, 4])
    p.add_argument("--nv", type=int, default=1)
    p.add_argument("--policy", choices=("round_robin", "reverse", "random", "threads"), default="round_robin")
    p.set_defaults(func=cmd_dist_matvec)

    p = sub.add_parser("dist-compress", help="distributed recompression on simulated ranks")
    _common(p)
    _matrix_arg(p)
    p.add_argument("--ranks", type=_ranks, default=[2, 4])
    p.add_argument("--tau", type=float, default=1e-3)
    p.add_argument("--threshold", choices=("node", "global"), default="node")
    p.add_argument("--policy", choices=("round_robin", "reverse", "random", "threads"), default="round_robin")
    p.set_defaults(func=cmd_dist_compress)

    p = sub.add_parser("solve-fd", help="fractional diffusion solve with PCG")
    _common(p)
    p.add_argument("--n", type=int, default=64, help="grid side")
    p.add_argument("--beta", type=float, default=0.75)
    p.add_argument("--tau", type=float, default=1e-6)
    p.add_argument("--ranks", type=_ranks, default=[1])
    p.add_argument("--rtol", type=float, default=1e-8)
    p.add_argument("--maxit", type=int, default=500)
    p.add_argument("--precond", choices=("mg", "jacobi", "none"), default="mg")
    p.add_argument("--kappa", choices=("bump", "unit"), default="bump")
    p.set_defaults(func=cmd_solve_fd)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if hasattr(args, "matrix"):
        if args.matrix and args.file and args.matrix != args.file:
            ap.print_usage(sys.stderr)
            print("h2kit: error: give the matrix file once", file=sys.stderr)
            return EXIT_USAGE
        args.file = args.matrix or args.file
        if not args.file:
            ap.print_usage(sys.stderr)
            print("h2kit: error: a matrix file is required", file=sys.stderr)
            return EXIT_USAGE
    rep = Report(repro=args.repro)
    try:
        if args.backend:
            kernels.use_backend(args.backend)
        # keep stdout clean for the CSV rows
        with contextlib.redirect_stdout(sys.stderr) if args.csv == "-" else contextlib.nullcontext():
            args.func(args, rep)
        rep.write(args.csv)
    except (ValueError, StructureError, OSError) as exc:
        print(f"h2kit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_CHECK if rep.failures else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
