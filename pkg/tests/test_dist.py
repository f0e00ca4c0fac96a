import numpy as np
import pytest

from h2kit import kernels
from h2kit.basisops import compress
from h2kit.dist import (communication_stats, dist_compress, dist_matvec, distribute, gather_h2,
                        synthetic_level_plans)
from h2kit.dist.distribute import owner_of
from h2kit.dist.dmatvec import TAG_DENSE, TAG_TREE
from h2kit.geometry import StructureError
from h2kit.h2core import CouplingLevel, H2Matrix, to_leaf_layout
from h2kit.matvec import h2_matvec, leaf_coefficients, upsweep, upsweep_level

from conftest import exp2d, rel


def test_single_rank_is_trivial():
    A = exp2d(4096)[0]
    D = distribute(A, 1)
    assert D.c == 0 and all(D.plan(0, l).n_recv == 0 for l in range(A.depth + 1))
    x = np.random.default_rng(0).standard_normal(4096)
    assert np.array_equal(dist_matvec(D, x), h2_matvec(A, x))


def test_figure_plan_example():
    # rank 0 owns level-4 nodes 0..3 of 16 and needs 5,6 from rank 1 and 12,13,14 from rank 3
    pairs = [(0, 1), (0, 5), (1, 6), (2, 12), (3, 13), (3, 14), (2, 3)]
    plan = synthetic_level_plans(pairs, 16, 4)[0]
    assert plan.pid.tolist() == [1, 3]
    assert plan.nodes_ptr.tolist() == [0, 2, 5]
    assert plan.nodes.tolist() == [5, 6, 12, 13, 14]


def test_plan_lists_only_contributing_ranks():
    plans = synthetic_level_plans([(0, 5), (4, 0), (8, 1)], 16, 4)
    assert plans[0].pid.tolist() == [1]
    assert plans[0].send_to == [1, 2]
    assert plans[3].pid.tolist() == [] and plans[3].n_recv == 0


@pytest.mark.parametrize("P", [2, 4, 8])
def test_block_census(P):
    A = exp2d(4096)[0]
    D = distribute(A, P)
    seen = sorted((l, r, s) for l, r, s, _ in D.census())
    ref = sorted((l, int(r), int(s)) for l, c in enumerate(A.couplings) for r, s in zip(c.rows, c.cols))
    assert seen == ref
    for level, r, s, holder in D.census():
        if holder != "root":
            assert level >= D.c and owner_of(r, level, D.c) == holder


def test_too_many_ranks_raises():
    A = exp2d(1024)[0]
    with pytest.raises(StructureError):
        distribute(A, 2 ** (A.depth + 1))
    with pytest.raises(StructureError):
        distribute(A, 3)


def test_gather_roundtrip_bitwise():
    A = exp2d(4096)[0]
    B = gather_h2(distribute(A, 4))
    x = np.random.default_rng(2).standard_normal((4096, 2))
    assert np.array_equal(h2_matvec(B, x), h2_matvec(A, x))


def test_distributed_upsweep_matches_single_rank():
    A = exp2d(4096)[0]
    D = distribute(A, 2)
    xl = to_leaf_layout(A.col_tree, A.leaf_size, np.random.default_rng(1).standard_normal((4096, 1)))
    ref = upsweep(A.V, xl)
    q = A.depth
    roots = []
    for b in D.branches:
        lo, hi = b.leaf_range()
        cur = leaf_coefficients(b.V.leaves, xl[lo:hi])
        for level in range(q, D.c, -1):
            cur = upsweep_level(b.V.transfers[level], cur, cur.shape[0] // 2)
        roots.append(cur)
    gathered = np.concatenate(roots)
    assert np.array_equal(gathered, ref[D.c])
    top = upsweep_level(D.root.V_transfers[1], gathered, 1)
    assert np.array_equal(top, ref[0])


@pytest.mark.parametrize("P", [2, 4, 8])
@pytest.mark.parametrize("policy", ["round_robin", "random"])
def test_dist_matvec_bitwise(P, policy):
    A = exp2d(4096)[0]
    x = np.random.default_rng(P).standard_normal((4096, 8))
    assert np.array_equal(dist_matvec(distribute(A, P), x, policy=policy, seed=P), h2_matvec(A, x))


def test_dist_matvec_threads_policy():
    A = exp2d(2048)[0]
    x = np.random.default_rng(0).standard_normal(2048)
    assert np.array_equal(dist_matvec(distribute(A, 4), x, policy="threads"), h2_matvec(A, x))


def test_dist_matvec_bitwise_python_backend():
    prev = kernels.BACKEND
    kernels.use_backend("python")
    try:
        A = exp2d(2048)[0]
        x = np.random.default_rng(9).standard_normal((2048, 3))
        assert np.array_equal(dist_matvec(distribute(A, 4), x), h2_matvec(A, x))
    finally:
        kernels.use_backend(prev)


def test_alpha_beta_distributed():
    A = exp2d(2048)[0]
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal(2048), rng.standard_normal(2048)
    assert np.array_equal(dist_matvec(distribute(A, 2), x, 0.5, 2.0, y), h2_matvec(A, x, 0.5, 2.0, y))


def block_diagonal(A, P):
    c = int(np.log2(P))
    keep = []
    for level, cl in enumerate(A.couplings):
        if level < c:
            keep.append(cl.copy())
            continue
        sel = owner_of(cl.rows, level, c) == owner_of(cl.cols, level, c)
        keep.append(CouplingLevel(cl.rows[sel], cl.cols[sel], cl.blocks[sel]))
    d = A.dense
    sel = owner_of(d.rows, A.depth, c) == owner_of(d.cols, A.depth, c)
    return H2Matrix(A.row_tree, A.col_tree, A.U, A.V, keep, CouplingLevel(d.rows[sel], d.cols[sel], d.blocks[sel]))


def test_block_diagonal_structure_sends_no_exchange_messages():
    B = block_diagonal(exp2d(4096)[0], 4)
    x = np.random.default_rng(0).standard_normal(4096)
    y, comm = dist_matvec(distribute(B, 4), x, return_comm=True)
    assert not [t for t in comm.trace if TAG_TREE <= t.tag <= TAG_DENSE]
    assert np.array_equal(y, h2_matvec(B, x))


def test_zero_input_zero_output():
    A = exp2d(2048)[0]
    assert not np.any(dist_matvec(distribute(A, 4), np.zeros(2048)))


@pytest.mark.parametrize("P", [2, 4, 8])
def test_received_volume_matches_plans(P):
    A = exp2d(4096)[0]
    D = distribute(A, P)
    nv = 3
    _, comm = dist_matvec(D, np.ones((4096, nv)), return_comm=True)
    st = communication_stats(D, comm, nv)
    cs = A.sparsity_constant()
    for rank, level, nodes, planned, traced, msgs in st.rows():
        assert planned == traced
        assert msgs == len(D.plan(rank, level).pid)
        k = A.U.ranks[level]
        assert traced <= cs * 2 ** (level - D.c) * k * nv * 8


def test_message_trace_deterministic():
    D = distribute(exp2d(4096)[0], 4)
    x = np.ones(4096)
    t1 = dist_matvec(D, x, return_comm=True)[1].trace
    t2 = dist_matvec(D, x, return_comm=True)[1].trace
    t3 = dist_matvec(D, x, policy="reverse", return_comm=True)[1]
    assert [(t.source, t.dest, t.tag, t.nbytes) for t in t1] == [(t.source, t.dest, t.tag, t.nbytes) for t in t2]
    assert sorted(t1, key=lambda t: (t.source, t.seq)) == t3.canonical_trace()


def test_dist_compress_single_rank_identical():
    A = exp2d(4096, p=6)[0]
    C = compress(A, 1e-3)
    G = gather_h2(dist_compress(distribute(A, 1), 1e-3))
    x = np.random.default_rng(0).standard_normal(4096)
    assert G.U.ranks == C.U.ranks
    assert rel(h2_matvec(G, x), h2_matvec(C, x)) <= 1e-12


@pytest.mark.parametrize("P", [2, 4])
def test_dist_compress_matches_single_rank(P):
    A = exp2d(4096, p=6)[0]
    C = compress(A, 1e-3)
    Dc = dist_compress(distribute(A, P), 1e-3)
    G = gather_h2(Dc)
    assert G.U.ranks == C.U.ranks and G.V.ranks == C.V.ranks
    x = np.random.default_rng(1).standard_normal((4096, 2))
    assert rel(h2_matvec(G, x), h2_matvec(C, x)) <= 1e-12
    assert np.array_equal(dist_matvec(Dc, x), h2_matvec(G, x))


def test_dist_compress_tau_zero_preserves_operator():
    A = exp2d(2048, p=6)[0]
    G = gather_h2(dist_compress(distribute(A, 4), 0.0))
    x = np.random.default_rng(1).standard_normal(2048)
    assert rel(h2_matvec(G, x), h2_matvec(A, x)) <= 1e-12
