# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: one-sided Jacobi rotations and RBF kernel sums.

Both functions mirror ``drift_tune._fallback`` exactly in semantics.
"""

from libc.math cimport sqrt, fabs, exp


def jacobi_rotate(double[:, ::1] W, double[:, ::1] V, double tol, int max_sweeps, double negligible=0.0):
    """Orthogonalize the rows of W in place with Hestenes-Jacobi rotations.

    W is n x m (row j is column j of the input matrix); V is n x n and
    accumulates the same rotations. Row pairs where either squared norm is
    at or below ``negligible`` are left alone. Returns (sweeps, residual, converged).
    """
    cdef Py_ssize_t n = W.shape[0]
    cdef Py_ssize_t m = W.shape[1]
    cdef Py_ssize_t nv = V.shape[1]
    cdef Py_ssize_t p, q, k
    cdef double alpha, beta, gamma, zeta, t, c, s, wp, wq, off, ratio
    cdef int sweep = 0
    cdef bint rotated = True

    off = 0.0
    while rotated and sweep < max_sweeps:
        rotated = False
        off = 0.0
        sweep += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    wp = W[p, k]
                    wq = W[q, k]
                    alpha += wp * wp
                    beta += wq * wq
                    gamma += wp * wq
                if alpha <= negligible or beta <= negligible or gamma == 0.0:
                    continue
                ratio = fabs(gamma) / sqrt(alpha * beta)
                if ratio > off:
                    off = ratio
                if ratio <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    wp = W[p, k]
                    wq = W[q, k]
                    W[p, k] = c * wp - s * wq
                    W[q, k] = s * wp + c * wq
                for k in range(nv):
                    wp = V[p, k]
                    wq = V[q, k]
                    V[p, k] = c * wp - s * wq
                    V[q, k] = s * wp + c * wq
    return sweep, off, not rotated


def rbf_kernel_sum(double[:, ::1] X, double[:, ::1] Y, double gamma, bint exclude_diagonal):
    """Sum of exp(-gamma * |x_i - y_j|^2) over all (i, j), optionally skipping i == j."""
    cdef Py_ssize_t nx = X.shape[0]
    cdef Py_ssize_t ny = Y.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double total = 0.0
    cdef double row, dist, diff
    if Y.shape[1] != d:
        raise ValueError("X and Y must share the feature dimension")
    for i in range(nx):
        row = 0.0
        for j in range(ny):
            if exclude_diagonal and i == j:
                continue
            dist = 0.0
            for k in range(d):
                diff = X[i, k] - Y[j, k]
                dist += diff * diff
            row += exp(-gamma * dist)
        total += row
    return total
