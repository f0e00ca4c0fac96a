# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched small-matrix kernels.

Each batch entry is computed on its own (one BLAS call per small product
for the matrix kernels), so results do not depend on how a batch is
composed. The pure-Python twin lives in ``_kernels_py``.
"""
import numpy as np
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport dgemm


def batched_tn(const double[:, :, ::1] A, const double[:, :, ::1] X):
    """out[b] = A[b].T @ X[b]"""
    cdef int B = A.shape[0], m = A.shape[1], k = A.shape[2], nv = X.shape[2]
    cdef int b, ldb = k if k > 0 else 1
    cdef char tn = b'N', tt = b'T'
    cdef double one = 1.0, zero = 0.0
    out = np.zeros((B, k, nv))
    cdef double[:, :, ::1] o = out
    if m == 0 or k == 0 or nv == 0:
        return out
    # row-major out[b]^T = X[b]^T A[b] is a column-major gemm
    with nogil:
        for b in range(B):
            dgemm(&tn, &tt, &nv, &k, &m, &one, <double*>&X[b, 0, 0], &nv,
                  <double*>&A[b, 0, 0], &ldb, &zero, &o[b, 0, 0], &nv)
    return out


def batched_nn(const double[:, :, ::1] A, const double[:, :, ::1] X):
    """out[b] = A[b] @ X[b]"""
    cdef int B = A.shape[0], m = A.shape[1], k = A.shape[2], nv = X.shape[2]
    cdef int b, ldb = k if k > 0 else 1
    cdef char tn = b'N'
    cdef double one = 1.0, zero = 0.0
    out = np.zeros((B, m, nv))
    cdef double[:, :, ::1] o = out
    if m == 0 or k == 0 or nv == 0:
        return out
    with nogil:
        for b in range(B):
            dgemm(&tn, &tn, &nv, &m, &k, &one, <double*>&X[b, 0, 0], &nv,
                  <double*>&A[b, 0, 0], &ldb, &zero, &o[b, 0, 0], &nv)
    return out


def scatter_add_ordered(double[:, :, ::1] dest, const long[::1] index,
                        const double[:, :, ::1] src, const long[::1] order):
    """dest[index[b]] += src[b], visiting b in the given order."""
    cdef Py_ssize_t n = order.shape[0], r = src.shape[1], c = src.shape[2]
    cdef Py_ssize_t t, b, d, i, j
    with nogil:
        for t in range(n):
            b = order[t]
            d = index[b]
            for i in range(r):
                for j in range(c):
                    dest[d, i, j] += src[b, i, j]


def pairwise_distance(const double[:, :, ::1] X, const double[:, :, ::1] Y):
    """out[b, i, j] = ||X[b, i] - Y[b, j]||_2"""
    cdef Py_ssize_t B = X.shape[0], m = X.shape[1], n = Y.shape[1], dim = X.shape[2]
    cdef Py_ssize_t b, i, j, d
    cdef double s, t
    out = np.empty((B, m, n))
    cdef double[:, :, ::1] o = out
    with nogil:
        for b in range(B):
            for i in range(m):
                for j in range(n):
                    s = 0.0
                    for d in range(dim):
                        t = X[b, i, d] - Y[b, j, d]
                        s += t * t
                    o[b, i, j] = sqrt(s)
    return out
