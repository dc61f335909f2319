"""Dense O(n^2) inner loops, with numba and pure-numpy implementations.

The numba path is used when numba imports and ``PCINV_NO_NUMBA`` is unset
(or ``0``). Both paths are always importable so they can be compared
against each other; the public names at the bottom of the module are bound
to whichever path is active.

Row sums are accumulated left to right in both paths, so results do not
depend on thread count. The two paths can still differ in the last ulp.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _numba_requested():
    flag = os.environ.get("PCINV_NO_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _numba_requested()


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def sq_dists_numpy(X):
    diff = X[:, None, :] - X[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def weighted_matrix_numpy(H, Q, sqrt_kappa):
    W = H * (sqrt_kappa[:, None] * (sqrt_kappa / Q)[None, :])
    Dvec = W.sum(axis=1)
    return W, Dvec


def symmetric_operator_numpy(H, Q, sqrt_kappa):
    """Return ``diag(D) - diag(a) H diag(a)`` with ``a = sqrt_kappa / sqrt(Q)``.

    This is ``Q^{-1/2} (D - W) Q^{1/2}``, the Euclidean-symmetric conjugate
    of the unscaled operator.
    """
    a = sqrt_kappa / np.sqrt(Q)
    Dvec = sqrt_kappa * (H @ (sqrt_kappa / Q))
    A = -(a[:, None] * H * a[None, :])
    A[np.diag_indices_from(A)] += Dvec
    return A


def similarity_numpy(D2, knn_dist):
    return np.exp(-D2 / (2.0 * np.outer(knn_dist, knn_dist)))


def kernel_sum_numpy(D2, epsilon):
    return float(np.exp(-D2 / (4.0 * epsilon)).sum())


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, fastmath=False)

    @_jit
    def sq_dists_numba(X):
        n, d = X.shape
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                s = 0.0
                for k in range(d):
                    t = X[i, k] - X[j, k]
                    s += t * t
                out[i, j] = s
                out[j, i] = s
        return out

    @_jit
    def weighted_matrix_numba(H, Q, sqrt_kappa):
        n = H.shape[0]
        W = np.empty((n, n))
        Dvec = np.empty(n)
        for i in range(n):
            acc = 0.0
            si = sqrt_kappa[i]
            for j in range(n):
                w = H[i, j] * (si * (sqrt_kappa[j] / Q[j]))
                W[i, j] = w
                acc += w
            Dvec[i] = acc
        return W, Dvec

    @_jit
    def symmetric_operator_numba(H, Q, sqrt_kappa):
        n = H.shape[0]
        a = np.empty(n)
        b = np.empty(n)
        for i in range(n):
            a[i] = sqrt_kappa[i] / np.sqrt(Q[i])
            b[i] = sqrt_kappa[i] / Q[i]
        A = np.empty((n, n))
        for i in range(n):
            acc = 0.0
            ai = a[i]
            for j in range(n):
                h = H[i, j]
                acc += h * b[j]
                A[i, j] = -(ai * h * a[j])
            A[i, i] += sqrt_kappa[i] * acc
        return A

    @_jit
    def similarity_numba(D2, knn_dist):
        n = D2.shape[0]
        S = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                S[i, j] = np.exp(-D2[i, j] / (2.0 * (knn_dist[i] * knn_dist[j])))
        return S

    @_jit
    def kernel_sum_numba(D2, epsilon):
        n = D2.shape[0]
        c = 1.0 / (4.0 * epsilon)
        total = 0.0
        for i in range(n):
            for j in range(n):
                total += np.exp(-D2[i, j] * c)
        return total

else:  # pragma: no cover
    sq_dists_numba = sq_dists_numpy
    weighted_matrix_numba = weighted_matrix_numpy
    symmetric_operator_numba = symmetric_operator_numpy
    similarity_numba = similarity_numpy
    kernel_sum_numba = kernel_sum_numpy


def backend():
    return "numba" if USE_NUMBA else "numpy"


if USE_NUMBA:
    sq_dists = sq_dists_numba
    weighted_matrix = weighted_matrix_numba
    symmetric_operator = symmetric_operator_numba
    similarity = similarity_numba
    kernel_sum = kernel_sum_numba
else:
    sq_dists = sq_dists_numpy
    weighted_matrix = weighted_matrix_numpy
    symmetric_operator = symmetric_operator_numpy
    similarity = similarity_numpy
    kernel_sum = kernel_sum_numpy
