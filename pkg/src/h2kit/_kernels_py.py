"""Pure-numpy versions of the batched kernels in ``_kernels.pyx``."""
import numpy as np


def batched_tn(A, X):
    return np.matmul(A.transpose(0, 2, 1), X)


def batched_nn(A, X):
    return np.matmul(A, X)


def scatter_add_ordered(dest, index, src, order):
    # consecutive runs with distinct destinations can be applied at once;
    # np.add.at keeps the visiting order for repeated ones
    np.add.at(dest, index[order], src[order])


def pairwise_distance(X, Y):
    diff = X[:, :, None, :] - Y[:, None, :, :]
    return np.sqrt(np.einsum("bmnd,bmnd->bmn", diff, diff))
