"""Pure-Python/numpy implementations of the compiled kernels.

Selected automatically when ``drift_tune._kernels`` is not built, or when
``DRIFT_TUNE_PURE_PYTHON`` is set. Semantics match the Cython module.
"""

import math

import numpy as np


def jacobi_rotate(W, V, tol, max_sweeps, negligible=0.0):
    """Orthogonalize the rows of W in place with Hestenes-Jacobi rotations.

    Same contract as the compiled version: W is n x m, V is n x n, both
    C-contiguous float64 and modified in place. Returns
    ``(sweeps, residual, converged)``.
    """
    n = W.shape[0]
    sweep = 0
    rotated = True
    off = 0.0
    while rotated and sweep < max_sweeps:
        rotated = False
        off = 0.0
        sweep += 1
        for p in range(n - 1):
            wp_row = W[p]
            for q in range(p + 1, n):
                wq_row = W[q]
                alpha = float(wp_row @ wp_row)
                beta = float(wq_row @ wq_row)
                gamma = float(wp_row @ wq_row)
                if alpha <= negligible or beta <= negligible or gamma == 0.0:
                    continue
                ratio = abs(gamma) / math.sqrt(alpha * beta)
                if ratio > off:
                    off = ratio
                if ratio <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wp = wp_row.copy()
                wp_row *= c
                wp_row -= s * wq_row
                wq_row *= c
                wq_row += s * wp
                vp = V[p].copy()
                V[p] *= c
                V[p] -= s * V[q]
                V[q] *= c
                V[q] += s * vp
    return sweep, off, not rotated


def rbf_kernel_sum(X, Y, gamma, exclude_diagonal, block=64):
    """Sum of exp(-gamma * |x_i - y_j|^2) over all (i, j), optionally skipping i == j."""
    if X.shape[1] != Y.shape[1]:
        raise ValueError("X and Y must share the feature dimension")
    total = 0.0
    for start in range(0, X.shape[0], block):
        xb = X[start:start + block]
        diff = xb[:, None, :] - Y[None, :, :]
        kern = np.exp(-gamma * np.einsum("ijk,ijk->ij", diff, diff))
        if exclude_diagonal:
            rows = np.arange(xb.shape[0])
            cols = rows + start
            keep = cols < Y.shape[0]
            kern[rows[keep], cols[keep]] = 0.0
        total += float(kern.sum())
    return total
