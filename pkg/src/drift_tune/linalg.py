"""Dense float64 matrix helpers and a one-sided Jacobi SVD.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, shaped
(rows, cols); vectors are 1-D arrays. The helpers here validate shape and
finiteness at the boundaries so the numerical code can stay terse.
"""

import numpy as np

from drift_tune import _backend
from drift_tune.errors import ConvergenceError, NonFiniteError, ShapeError

SVD_TOL = 1e-15
SVD_MAX_SWEEPS = 80


def as_matrix(data, name="matrix"):
    """Return ``data`` as a finite 2-D float64 array."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return m


def as_vector(data, name="vector"):
    """Return ``data`` as a finite 1-D float64 array."""
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return v


def matmul(a, b):
    """Matrix product with an explicit conformability check.

    A 1-D ``b`` is treated as a column vector and a 1-D result is returned.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects a matrix and a matrix/vector, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: a.cols={a.shape[1]} != b.rows={b.shape[0]}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("matmul produced a non-finite result")
    return out


def orthogonality_error(m):
    """Frobenius norm of ``m @ m.T - I`` for a square matrix."""
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"orthogonality_error needs a square matrix, got {m.shape}")
    return float(np.linalg.norm(m @ m.T - np.eye(m.shape[0]), "fro"))


def _complete_basis(U, keep):
    """Replace the columns of U not flagged in ``keep`` by an orthonormal completion."""
    rows = U.shape[0]
    basis = [U[:, j] for j in range(U.shape[1]) if keep[j]]
    for j in np.flatnonzero(~keep):
        best, best_norm = None, -1.0
        for i in range(rows):
            cand = np.zeros(rows)
            cand[i] = 1.0
            # two Gram-Schmidt passes keep the completion orthogonal to 1e-15
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            nrm = float(np.linalg.norm(cand))
            if nrm > best_norm:
                best, best_norm = cand, nrm
        best = best / best_norm
        U[:, j] = best
        basis.append(best)
    return U


def svd(m, tol=SVD_TOL, max_sweeps=SVD_MAX_SWEEPS):
    """Thin singular value decomposition ``m = U @ diag(S) @ Vt``.

    One-sided (Hestenes) Jacobi on the columns of ``m``; the rotation loop
    runs in the compiled kernel when available. For an r x c input with
    k = min(r, c), U is r x k, S has length k and Vt is k x c. U has
    orthonormal columns and Vt orthonormal rows even when ``m`` is rank
    deficient; S is non-negative and non-increasing.

    Raises:
        ConvergenceError: if the rotations have not converged after
            ``max_sweeps`` sweeps.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        raise ShapeError(f"svd needs a non-empty matrix, got {m.shape}")
    if rows < cols:
        U, S, Vt = svd(m.T, tol=tol, max_sweeps=max_sweeps)
        return Vt.T.copy(), S, U.T.copy()

    # the kernel rotates in place, so never hand it a view of the caller's data
    W = np.array(m.T, dtype=np.float64, order="C", copy=True)
    V = np.eye(cols)
    # columns at rounding level relative to the whole matrix count as zero
    negligible = (np.finfo(np.float64).eps * np.linalg.norm(m)) ** 2
    sweeps, residual, converged = _backend.jacobi_rotate(W, V, tol, max_sweeps, negligible)
    if not converged:
        raise ConvergenceError("Jacobi SVD did not converge", residual, sweeps)

    S = np.sqrt(np.einsum("ij,ij->i", W, W))
    order = np.argsort(-S, kind="stable")
    S = S[order]
    W = W[order]
    Vt = V[order]

    scale = S[0] if S[0] > 0 else 1.0
    keep = S > scale * rows * np.finfo(np.float64).eps
    U = np.zeros((rows, cols))
    U[:, keep] = (W[keep] / S[keep, None]).T
    if not np.all(keep):
        S[~keep] = 0.0
        U = _complete_basis(U, keep)
    return U, S, np.ascontiguousarray(Vt)


def pca_axes(x, k=2):
    """Mean and top-``k`` principal directions of the rows of ``x``.

    Returns ``(mean, axes)`` with ``axes`` of shape ``(k, d)``. Each axis is
    sign-fixed so its largest-magnitude entry is positive, which keeps
    projections stable across runs.
    """
    x = as_matrix(x, "data")
    n, d = x.shape
    if not 1 <= k <= d:
        raise ShapeError(f"k must be in [1, {d}], got {k}")
    mean = x.mean(axis=0)
    _, _, Vt = svd(x - mean)
    axes = Vt[:k].copy()
    if axes.shape[0] < k:
        axes = np.vstack([axes, np.zeros((k - axes.shape[0], d))])
    for row in axes:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1.0
    return mean, axes


def pca_project(x, mean, axes):
    """Coordinates of the rows of ``x`` on ``axes`` after centering."""
    return (as_matrix(x, "data") - mean) @ axes.T
