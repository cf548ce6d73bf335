import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aoa_lab.errors import ConditioningError, DomainError, StructuralError
from aoa_lab.numerics import (
    hermitian_eig,
    least_squares,
    projector,
    sample_complex_gaussian,
)


def random_hermitian(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return a + a.conj().T


def random_complex(shape, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class TestHermitianEig:
    def test_identity(self):
        eig = hermitian_eig(np.eye(3))
        np.testing.assert_allclose(eig.eigenvalues, [1, 1, 1])

    def test_diagonal_sorted_descending(self):
        eig = hermitian_eig(np.diag([2.0, 5.0, 1.0]))
        np.testing.assert_allclose(eig.eigenvalues, [5, 2, 1])
        expected = np.eye(3)[:, [1, 0, 2]]
        np.testing.assert_allclose(np.abs(eig.eigenvectors), expected, atol=1e-14)

    def test_rank_one_outer_product(self):
        a = random_complex(8, 3)
        a /= np.linalg.norm(a)
        a *= 1.7
        eig = hermitian_eig(np.outer(a, a.conj()))
        assert eig.eigenvalues[0] == pytest.approx(np.linalg.norm(a) ** 2, rel=1e-12)
        np.testing.assert_allclose(eig.eigenvalues[1:], 0, atol=1e-12)

    def test_matches_lapack(self):
        a = random_hermitian(12, 4)
        eig = hermitian_eig(a)
        np.testing.assert_allclose(eig.eigenvalues, np.linalg.eigvalsh(a)[::-1], atol=1e-11)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 16), seed=st.integers(0, 2**32 - 1))
    def test_reconstruction_orthonormality_trace(self, n, seed):
        a = random_hermitian(n, seed)
        eig = hermitian_eig(a)
        v = eig.eigenvectors
        assert np.linalg.norm(eig.reconstruct() - a) / np.linalg.norm(a) <= 1e-9
        np.testing.assert_allclose(v.conj().T @ v, np.eye(n), atol=1e-10)
        assert np.sum(eig.eigenvalues) == pytest.approx(np.trace(a).real, rel=1e-9, abs=1e-12)
        assert np.all(np.diff(eig.eigenvalues) <= 1e-12)
        for i in range(n):
            lhs = a @ v[:, i]
            rhs = eig.eigenvalues[i] * v[:, i]
            assert np.linalg.norm(lhs - rhs) <= 1e-9 * max(1.0, np.linalg.norm(a))

    def test_non_square_rejected(self):
        with pytest.raises(StructuralError):
            hermitian_eig(np.zeros((2, 3)))

    def test_non_hermitian_rejected(self):
        with pytest.raises(StructuralError):
            hermitian_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_convergence_failure_reports_sweeps(self):
        from aoa_lab.errors import NumericalError

        with pytest.raises(NumericalError) as info:
            hermitian_eig(random_hermitian(6, 0), max_sweeps=1)
        assert info.value.iterations == 1


class TestProjector:
    def test_unit_column(self):
        a = random_complex(6, 0)
        a /= np.linalg.norm(a)
        np.testing.assert_allclose(projector(a[:, None]), np.outer(a, a.conj()), atol=1e-14)

    def test_full_rank_is_identity(self):
        p = projector(random_complex((5, 5), 1))
        np.testing.assert_allclose(p, np.eye(5), atol=1e-10)

    def test_orthogonal_columns_sum_of_rank_one(self):
        q, _ = np.linalg.qr(random_complex((8, 2), 2))
        a1, a2 = 2.0 * q[:, 0], 0.5j * q[:, 1]
        expected = np.outer(a1, a1.conj()) / np.vdot(a1, a1) + np.outer(a2, a2.conj()) / np.vdot(a2, a2)
        np.testing.assert_allclose(projector(np.column_stack([a1, a2])), expected, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(2, 16), k=st.integers(1, 16), seed=st.integers(0, 2**32 - 1))
    def test_idempotent_hermitian(self, n, k, seed):
        k = min(k, n)
        p = projector(random_complex((n, k), seed))
        assert np.linalg.norm(p @ p - p) <= 1e-10
        assert np.linalg.norm(p - p.conj().T) <= 1e-10

    def test_rank_deficient(self):
        a = random_complex(4, 5)
        with pytest.raises(ConditioningError) as info:
            projector(np.column_stack([a, 2 * a]))
        assert info.value.condition_number > 1e10


class TestLeastSquares:
    def test_identity(self):
        y = random_complex(5, 0)
        np.testing.assert_allclose(least_squares(np.eye(5), y), y)

    def test_exact_single_column(self):
        a = random_complex(7, 1)
        np.testing.assert_allclose(least_squares(a[:, None], 3 * a), [3], rtol=1e-12)

    def test_recovers_known_solution(self):
        a = random_complex((16, 4), 2)
        s0 = random_complex(4, 3)
        np.testing.assert_allclose(least_squares(a, a @ s0), s0, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_residual_orthogonal(self, seed):
        a = random_complex((16, 4), seed)
        y = random_complex(16, seed + 1)
        s = least_squares(a, y)
        assert np.max(np.abs(a.conj().T @ (y - a @ s))) <= 1e-9 * np.linalg.norm(y)

    def test_rank_deficient(self):
        a = random_complex(4, 5)
        with pytest.raises(ConditioningError):
            least_squares(np.column_stack([a, a]), a)


class TestComplexGaussian:
    def test_unit_variance(self):
        v = sample_complex_gaussian(100_000, 1.0, np.random.default_rng(0))
        assert 0.98 <= np.mean(np.abs(v) ** 2) <= 1.02
        assert np.var(v.real) == pytest.approx(0.5, rel=0.03)

    def test_deterministic(self):
        a = sample_complex_gaussian(10, 1.0, np.random.default_rng(7))
        b = sample_complex_gaussian(10, 1.0, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_small_variance(self):
        v = sample_complex_gaussian(100_000, 0.01, np.random.default_rng(1))
        assert np.var(v) == pytest.approx(0.01, rel=0.05)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(DomainError):
            sample_complex_gaussian(3, 0.0, np.random.default_rng(0))
