"""Backend selection for the hot batched kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. ``H2KIT_BACKEND=python`` forces the fallback.
Both backends are deterministic for a given input, but they do not agree
bit for bit with each other.
"""
import os

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on the build
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_impl = None
BACKEND = None


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Switch the active backend (``"compiled"`` or ``"python"``)."""
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    _impl = _BACKENDS[name]
    BACKEND = name


_requested = os.environ.get("H2KIT_BACKEND", "").strip().lower()
if _requested:
    use_backend(_requested)
else:
    use_backend("compiled" if _compiled is not None else "python")


def _c3(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def batched_tn(A, X):
    """Stacked ``A[b].T @ X[b]``; A is (B, m, k), X is (B, m, nv)."""
    A = _c3(A)
    X = _c3(X)
    if A.shape[0] == 0 or A.shape[2] == 0:
        return np.zeros((A.shape[0], A.shape[2], X.shape[2]))
    return _impl.batched_tn(A, X)


def batched_nn(A, X):
    """Stacked ``A[b] @ X[b]``; A is (B, m, k), X is (B, k, nv)."""
    A = _c3(A)
    X = _c3(X)
    if A.shape[0] == 0 or A.shape[1] == 0:
        return np.zeros((A.shape[0], A.shape[1], X.shape[2]))
    return _impl.batched_nn(A, X)


def scatter_add_ordered(dest, index, src, group):
    """Accumulate ``src[b]`` into ``dest[index[b]]`` group by group.

    Groups are visited in ascending order and entries inside a group in
    their stored order, which fixes the floating point summation order.
    ``dest`` is updated in place and must be C-contiguous float64.
    """
    if len(index) == 0:
        return dest
    order = np.argsort(np.asarray(group), kind="stable").astype(np.int64)
    _impl.scatter_add_ordered(dest, np.ascontiguousarray(index, dtype=np.int64), _c3(src), order)
    return dest


def pairwise_distance(X, Y):
    """Stacked Euclidean distance tables, (B, m, d) x (B, n, d) -> (B, m, n)."""
    X = _c3(X)
    Y = _c3(Y)
    if X.shape[0] == 0 or X.shape[1] == 0 or Y.shape[1] == 0:
        return np.zeros((X.shape[0], X.shape[1], Y.shape[1]))
    return _impl.pairwise_distance(X, Y)
