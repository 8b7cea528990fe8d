import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_orthogonal
from drift_tune.errors import ConvergenceError, NonFiniteError, ShapeError
from drift_tune.linalg import matmul, orthogonality_error, pca_axes, pca_project, svd


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def check_svd(m, tol=1e-8):
    U, S, Vt = svd(m)
    k = min(m.shape)
    assert U.shape == (m.shape[0], k) and S.shape == (k,) and Vt.shape == (k, m.shape[1])
    norm = np.linalg.norm(m)
    assert np.linalg.norm(U * S @ Vt - m) <= tol * max(norm, 1e-300)
    assert np.linalg.norm(U.T @ U - np.eye(k)) < tol
    assert np.linalg.norm(Vt @ Vt.T - np.eye(k)) < tol
    assert np.all(S >= 0) and np.all(np.diff(S) <= 0)
    return U, S, Vt


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(matmul(np.eye(2), [[1, 2], [3, 4]]), [[1, 2], [3, 4]])

    def test_rotates_basis_vector(self):
        np.testing.assert_array_equal(matmul([[0, -1], [1, 0]], [1, 0]), [0, 1])

    def test_matches_triple_loop(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), atol=1e-12)

    def test_mismatch_raises(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            matmul([[np.nan]], [[1.0]])

    def test_associativity(self, rng):
        for _ in range(50):
            n, m, p, q = rng.integers(1, 8, size=4)
            a, b, c = rng.standard_normal((n, m)), rng.standard_normal((m, p)), rng.standard_normal((p, q))
            left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
            assert np.linalg.norm(left - right) <= 1e-9 * max(np.linalg.norm(left), 1.0)


class TestSvd:
    def test_diagonal(self):
        U, S, Vt = check_svd(np.diag([3.0, 2.0, 1.0]))
        np.testing.assert_allclose(S, [3, 2, 1], atol=1e-14)
        np.testing.assert_allclose(np.abs(U), np.eye(3), atol=1e-14)
        np.testing.assert_allclose(np.abs(Vt), np.eye(3), atol=1e-14)

    def test_unsorted_diagonal_is_sorted(self):
        _, S, _ = check_svd(np.diag([1.0, 5.0, 3.0]))
        np.testing.assert_allclose(S, [5, 3, 1], atol=1e-14)

    def test_known_singular_values(self, rng):
        q1, q2 = random_orthogonal(5, rng), random_orthogonal(5, rng)
        m = q1 @ np.diag([5.0, 4, 3, 2, 1]) @ q2.T
        _, S, _ = check_svd(m)
        np.testing.assert_allclose(S, [5, 4, 3, 2, 1], atol=1e-8)

    def test_thousand_random_shapes(self, rng):
        for _ in range(1000):
            r, c = rng.integers(1, 65, size=2)
            check_svd(rng.standard_normal((r, c)))

    def test_rank_deficient(self, rng):
        a = rng.standard_normal((10, 3)) @ rng.standard_normal((3, 8))
        _, S, _ = check_svd(a)
        assert np.all(S[3:] == 0.0)

    def test_zero_matrix(self):
        U, S, Vt = check_svd(np.zeros((4, 3)))
        assert np.all(S == 0)

    def test_does_not_mutate_input(self, rng):
        a = np.asfortranarray(rng.standard_normal((6, 6)))
        before = a.copy()
        svd(a)
        np.testing.assert_array_equal(a, before)

    def test_iteration_cap_reports_residual(self, rng):
        with pytest.raises(ConvergenceError) as info:
            svd(rng.standard_normal((20, 20)), max_sweeps=1)
        assert info.value.residual > 0 and info.value.sweeps == 1

    def test_empty_raises(self):
        with pytest.raises(ShapeError):
            svd(np.zeros((0, 3)))

    @given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_property_reconstruction(self, m):
        check_svd(m)


class TestOrthogonalityError:
    def test_identity(self):
        assert orthogonality_error(np.eye(3)) == 0.0

    def test_rotation(self):
        assert orthogonality_error([[0.0, -1.0], [1.0, 0.0]]) == 0.0

    def test_scaled(self):
        assert orthogonality_error([[2.0, 0.0], [0.0, 1.0]]) == pytest.approx(3.0, abs=1e-15)

    def test_non_square_raises(self):
        with pytest.raises(ShapeError):
            orthogonality_error(np.ones((2, 3)))


def test_pca_axes_recovers_dominant_direction(rng):
    x = rng.standard_normal((500, 3)) * [10.0, 1.0, 0.1]
    mean, axes = pca_axes(x, 2)
    np.testing.assert_allclose(np.abs(axes[0]), [1, 0, 0], atol=0.02)
    np.testing.assert_allclose(np.abs(axes[1]), [0, 1, 0], atol=0.05)
    coords = pca_project(x, mean, axes)
    assert coords.shape == (500, 2)
    np.testing.assert_allclose(coords.mean(axis=0), 0, atol=1e-12)
