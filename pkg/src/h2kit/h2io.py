"""Save and load H2 matrices as ``.h2m`` files.

An ``.h2m`` file is a numpy ``.npz`` archive of little-endian arrays. The
``header`` entry is UTF-8 JSON holding ``N``, ``m``, ``depth`` and the
per-level ranks of both bases; the remaining entries are level-ordered:

    rtree.* / ctree.*     cluster trees (ctree absent when shared)
    U.leaves, U.transfer1..q, V.* (V absent when U is shared)
    S0..Sq.{rows,cols,blocks,ordinal}   coupling levels, root first
    dense.{rows,cols,blocks,ordinal}    leaf-level dense blocks
"""
from __future__ import annotations

import json

import numpy as np

from .geometry import ClusterTree
from .h2core import BasisTree, CouplingLevel, H2Matrix

FORMAT_VERSION = 1


def _tree_arrays(prefix, tree: ClusterTree, out):
    for name in ("permutation", "begin", "end", "lo", "hi", "points"):
        out[f"{prefix}.{name}"] = getattr(tree, name)
    out[f"{prefix}.shape"] = np.array([tree.depth, tree.leaf_size], dtype=np.int64)


def _basis_arrays(prefix, B: BasisTree, out):
    out[f"{prefix}.leaves"] = B.leaves
    for level in range(1, B.depth + 1):
        out[f"{prefix}.transfer{level}"] = B.transfers[level]


def _level_arrays(prefix, c: CouplingLevel, out):
    out[f"{prefix}.rows"] = c.rows
    out[f"{prefix}.cols"] = c.cols
    out[f"{prefix}.blocks"] = c.blocks
    out[f"{prefix}.ordinal"] = c.ordinal


def _little_endian(a):
    a = np.asarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False) if a.dtype.byteorder == ">" else a


def save_h2(A: H2Matrix, path):
    arrays = {}
    shared_tree = A.col_tree is A.row_tree
    shared_basis = A.V is A.U
    _tree_arrays("rtree", A.row_tree, arrays)
    if not shared_tree:
        _tree_arrays("ctree", A.col_tree, arrays)
    _basis_arrays("U", A.U, arrays)
    if not shared_basis:
        _basis_arrays("V", A.V, arrays)
    for level, c in enumerate(A.couplings):
        _level_arrays(f"S{level}", c, arrays)
    _level_arrays("dense", A.dense, arrays)
    header = {"version": FORMAT_VERSION, "N": list(A.shape), "m": A.leaf_size, "depth": A.depth,
              "ranks_u": [int(k) for k in A.U.ranks], "ranks_v": [int(k) for k in A.V.ranks], "shared_tree": shared_tree,
              "shared_basis": shared_basis, "meta": A.meta}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **{k: _little_endian(v) for k, v in arrays.items()})


def _load_tree(z, prefix):
    depth, leaf_size = (int(v) for v in z[f"{prefix}.shape"])
    return ClusterTree(z[f"{prefix}.permutation"], depth, leaf_size, z[f"{prefix}.begin"], z[f"{prefix}.end"],
                       z[f"{prefix}.lo"], z[f"{prefix}.hi"], z[f"{prefix}.points"])


def _load_basis(z, prefix, depth):
    return BasisTree(z[f"{prefix}.leaves"], [None] + [z[f"{prefix}.transfer{l}"] for l in range(1, depth + 1)])


def _load_level(z, prefix):
    return CouplingLevel(z[f"{prefix}.rows"], z[f"{prefix}.cols"], z[f"{prefix}.blocks"], z[f"{prefix}.ordinal"])


def load_h2(path) -> H2Matrix:
    with np.load(path, allow_pickle=False) as z:
        if "header" not in z:
            raise ValueError(f"{path} is not an h2m file")
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported h2m version {header.get('version')}")
        q = header["depth"]
        rt = _load_tree(z, "rtree")
        ct = rt if header["shared_tree"] else _load_tree(z, "ctree")
        U = _load_basis(z, "U", q)
        V = U if header["shared_basis"] else _load_basis(z, "V", q)
        couplings = [_load_level(z, f"S{l}") for l in range(q + 1)]
        dense = _load_level(z, "dense")
    A = H2Matrix(rt, ct, U, V, couplings, dense, header["meta"])
    A.validate()
    return A
