"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line; the lines are
also collected into the terminal summary. Run with

    pytest tests/test_acceptance.py -v -s
"""
import time

import numpy as np
import pytest

from h2kit.basisops import basis_orthogonality_error, compress, orthogonalize
from h2kit.construct import ExponentialKernel, construct_h2
from h2kit.dist import communication_stats, dist_compress, dist_matvec, distribute, gather_h2, synthetic_level_plans
from h2kit.dist.dmatvec import TAG_DENSE
from h2kit.fdsolver import FracProblem, assemble_D, direct_D, solve_fd
from h2kit.geometry import PointCloud, build_cluster_tree, dual_tree_traversal, grid_points
from h2kit.h2core import memory_report
from h2kit.matvec import h2_matvec, h2_sampled_error, matvec_flops, sample_rows

RESULTS = {}


def verdict(num, ok, detail, label=None):
    label = label or f"criterion {num:2d}"
    line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[num] = line
    print("\n" + line)
    assert ok, line


def build_exp2d(n, p=8):
    pts = grid_points(n, 2)
    kern = ExponentialKernel(0.1)
    return construct_h2(pts, kern, m=64, eta=0.9, p=p), kern, pts


def sampled_rel(y, ref, rows):
    return float(np.linalg.norm(y[rows] - ref[rows]) / np.linalg.norm(ref[rows]))


def test_criterion_01_dense_oracle_accuracy():
    t0 = time.perf_counter()
    errs = {}
    for n in (1024, 2048, 4096):
        A, kern, pts = build_exp2d(n)
        errs[n] = h2_sampled_error(A, kern, pts, fraction=0.1, seed=0)
    dt = time.perf_counter() - t0
    ok = all(e <= 1e-6 for e in errs.values()) and dt < 60
    verdict(1, ok, "sampled error " + ", ".join(f"N={n}: {e:.2e}" for n, e in errs.items())
            + f" (tol 1e-6), {dt:.1f}s")


def test_criterion_02_distributed_matvec_bitwise():
    t0 = time.perf_counter()
    A = build_exp2d(4096)[0]
    rng = np.random.default_rng(0)
    bad = []
    for nv in (1, 8):
        x = rng.uniform(size=(4096, nv))
        ref = h2_matvec(A, x)
        for P in (2, 4, 8, 16):
            if not np.array_equal(dist_matvec(distribute(A, P), x), ref):
                bad.append((P, nv))
    dt = time.perf_counter() - t0
    verdict(2, not bad and dt < 60, f"P in 2,4,8,16 x nv in 1,8 bitwise equal; mismatches {bad}, {dt:.1f}s")


def test_criterion_03_orthogonalization():
    A = build_exp2d(2048)[0]
    B = orthogonalize(A)
    dev = max(basis_orthogonality_error(B.U), basis_orthogonality_error(B.V))
    rng = np.random.default_rng(1)
    x = rng.uniform(size=2048)
    rows = sample_rows(2048, 0.1, rng)
    diff = sampled_rel(h2_matvec(B, x), h2_matvec(A, x), rows)
    verdict(3, dev <= 1e-12 and diff <= 1e-12, f"max |V^T V - I| = {dev:.1e}, matvec difference {diff:.1e}")


@pytest.fixture(scope="module")
def compressed_65536():
    t0 = time.perf_counter()
    A = build_exp2d(65536, p=6)[0]
    C = compress(A, 1e-3)
    dt = time.perf_counter() - t0
    rng = np.random.default_rng(2)
    x = rng.uniform(size=65536)
    rows = sample_rows(65536, 0.1, rng)
    err = sampled_rel(h2_matvec(C, x), h2_matvec(A, x), rows)
    ratio = memory_report(A)["lowrank_bytes"] / memory_report(C)["lowrank_bytes"]
    return {"C": C, "x": x, "rows": rows, "err": err, "ratio": ratio, "seconds": dt, "k": A.U.ranks[-1]}


@pytest.mark.slow
def test_criterion_04_compression_effectiveness(compressed_65536):
    r = compressed_65536
    ok = r["k"] == 36 and r["err"] <= 5e-3 and r["ratio"] >= 3 and r["seconds"] < 300
    verdict(4, ok, f"N=65536 k={r['k']} tau=1e-3: error {r['err']:.2e} (tol 5e-3), low-rank memory "
                   f"reduced {r['ratio']:.1f}x (need 3x), {r['seconds']:.1f}s")


@pytest.mark.slow
def test_criterion_05_compression_idempotent(compressed_65536):
    C, x, rows = compressed_65536["C"], compressed_65536["x"], compressed_65536["rows"]
    C2 = compress(C, 1e-3)
    dranks = max(abs(a - b) for a, b in zip(C.U.ranks + C.V.ranks, C2.U.ranks + C2.V.ranks))
    diff = sampled_rel(h2_matvec(C2, x), h2_matvec(C, x), rows)
    verdict(5, dranks == 0 and diff <= 1e-12, f"rank change {dranks}, matvec change {diff:.1e}")


def sparsity(n, dim, eta):
    t = build_cluster_tree(PointCloud(grid_points(n, dim)), 64)
    return dual_tree_traversal(t, t, eta).sparsity_constant()


def test_criterion_06_sparsity_constant():
    sizes = (4096, 16384, 65536)
    c2 = [sparsity(n, 2, 0.9) for n in sizes]
    c3 = [sparsity(n, 3, 0.95) for n in sizes]
    larger = {n: sparsity(n, 3, 0.95) for n in (2**18, 2**19)}
    ok = max(c2) <= 25 and all(b <= a for a, b in zip(c2, c2[1:])) and max(c3) <= 40
    verdict(6, ok, f"2D C_sp {c2}; 3D C_sp {c3} (beyond the range: "
                   + ", ".join(f"N=2^{int(np.log2(n))}: {c}" for n, c in larger.items()) + ")")


def test_criterion_07_linear_complexity():
    sizes = (4096, 8192, 16384, 32768)
    mem, flops = [], []
    for n in sizes:
        A = build_exp2d(n)[0]
        mem.append(memory_report(A)["total_bytes"])
        flops.append(matvec_flops(A))
        del A
    rm = [b / a for a, b in zip(mem, mem[1:])]
    rf = [b / a for a, b in zip(flops, flops[1:])]
    ok = max(rm) <= 2.3 and max(rf) <= 2.3
    verdict(7, ok, "memory ratios " + ", ".join(f"{v:.2f}" for v in rm)
            + "; flop ratios " + ", ".join(f"{v:.2f}" for v in rf) + " (limit 2.3)")


def test_criterion_08_distributed_compression():
    A = build_exp2d(8192)[0]
    C = compress(A, 1e-3)
    rng = np.random.default_rng(3)
    x = rng.uniform(size=8192)
    rows = sample_rows(8192, 0.1, rng)
    ref = h2_matvec(C, x)
    notes, ok = [], True
    for P in (2, 4):
        G = gather_h2(dist_compress(distribute(A, P), 1e-3))
        same = G.U.ranks == C.U.ranks and G.V.ranks == C.V.ranks
        diff = sampled_rel(h2_matvec(G, x), ref, rows)
        ok &= same and diff <= 1e-12
        notes.append(f"P={P}: ranks {'equal' if same else 'DIFFER'}, matvec {diff:.1e}")
    verdict(8, ok, "; ".join(notes))


def test_criterion_09_communication_accounting():
    A = build_exp2d(4096)[0]
    nv = 2
    audited, mismatches = 0, []
    for P in (2, 4, 8):
        D = distribute(A, P)
        _, comm = dist_matvec(D, np.ones((4096, nv)), return_comm=True)
        for rank, level, _, planned, traced, _ in communication_stats(D, comm, nv).rows():
            audited += 1
            if planned != traced:
                mismatches.append((P, rank, level, planned, traced))
        for b in D.branches:
            planned = b.dense.plan.n_recv * A.leaf_size * nv * 8
            traced = sum(t.nbytes for t in comm.trace if t.tag == TAG_DENSE and t.dest == b.rank)
            audited += 1
            if planned != traced:
                mismatches.append((P, b.rank, "dense", planned, traced))
    pairs = [(0, 1), (0, 5), (1, 6), (2, 12), (3, 13), (3, 14), (2, 3)]
    plan = synthetic_level_plans(pairs, 16, 4)[0]
    fig = (plan.pid.tolist(), plan.nodes_ptr.tolist(), plan.nodes.tolist())
    fig_ok = fig == ([1, 3], [0, 2, 5], [5, 6, 12, 13, 14])
    verdict(9, not mismatches and fig_ok,
            f"{audited} rank/level volumes audited, {len(mismatches)} mismatches; plan example "
            f"pid={fig[0]} nodes_ptr={fig[1]} nodes={fig[2]}")


@pytest.fixture(scope="module")
def fd_runs():
    t0 = time.perf_counter()
    runs = {n: solve_fd(n, beta=0.75, tau=1e-6, rtol=1e-8, precond="mg") for n in (64, 128, 256)}
    pr = FracProblem(16)
    d_err = float(np.linalg.norm(assemble_D(pr) - direct_D(pr)) / np.linalg.norm(direct_D(pr)))
    return runs, d_err, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_10_fractional_diffusion(fd_runs):
    runs, d_err, dt = fd_runs
    its = {n: r.iterations for n, r in runs.items()}
    growth = its[256] / its[64]
    ok = all(r.converged for r in runs.values()) and growth <= 1.5 and d_err <= 1e-5 and dt < 600
    verdict(10, ok, f"MG-PCG iterations {its} (growth {growth:.2f}, limit 1.5), D error on n=16 {d_err:.1e}, "
                    f"{dt:.0f}s")


@pytest.mark.slow
def test_setup_weak_scaling(fd_runs):
    runs = fd_runs[0]
    setup = {n: sum(r.timings[k] for k in ("k_build", "compression", "d_assembly")) for n, r in runs.items()}
    ratios = [setup[128] / setup[64], setup[256] / setup[128]]
    verdict(11, max(ratios) <= 5, "setup seconds " + ", ".join(f"n={n}: {v:.1f}" for n, v in setup.items())
            + " ratios " + ", ".join(f"{v:.2f}" for v in ratios) + " (limit 5)",
            label="setup scaling")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:warnings"]))
