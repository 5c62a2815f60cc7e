import numpy as np
import pytest
import scipy.sparse as sp

from contactnewton.errors import DimensionMismatchError, NotSPDError
from contactnewton.linalg import Factorization, SparseSym, factorize, gemm, solve, solve_multi


def random_spd(dim, seed, shift=10.0):
    rng = np.random.default_rng(seed)
    L = np.tril(rng.standard_normal((dim, dim)))
    return L @ L.T + shift * np.eye(dim)


def dense_gaussian_elimination(A, b):
    """Independent oracle: plain Gaussian elimination with back substitution."""
    A = A.astype(np.float64).copy()
    b = b.astype(np.float64).copy()
    n = len(b)
    for k in range(n):
        for i in range(k + 1, n):
            f = A[i, k] / A[k, k]
            A[i, k:] -= f * A[k, k:]
            b[i] -= f * b[k]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - A[i, i + 1 :] @ x[i + 1 :]) / A[i, i]
    return x


def gemm_naive(A, B):
    """Independent oracle: textbook triple loop."""
    m, k = A.shape
    _, n = B.shape
    C = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += A[i, p] * B[p, j]
            C[i, j] = s
    return C


class TestSparseSym:
    def test_rejects_rectangular(self):
        with pytest.raises(DimensionMismatchError):
            SparseSym(np.ones((2, 3)))

    def test_rejects_asymmetric(self):
        with pytest.raises(DimensionMismatchError):
            SparseSym(np.array([[1.0, 2.0], [0.5, 1.0]]))

    def test_accepts_symmetric(self):
        A = SparseSym(random_spd(5, 0))
        assert A.dim == 5


class TestFactorizeSolve:
    def test_identity(self):
        F = factorize(SparseSym(sp.eye(3)))
        assert np.allclose(solve(F, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_diagonal(self):
        F = factorize(SparseSym(sp.diags([2.0, 4.0])))
        assert np.allclose(solve(F, np.array([2.0, 8.0])), [1.0, 2.0])

    def test_zero_rhs(self):
        F = factorize(SparseSym(sp.eye(4)))
        assert np.array_equal(solve(F, np.zeros(4)), np.zeros(4))

    def test_scalar_diag(self):
        F = factorize(SparseSym(sp.diags([4.0])))
        assert np.allclose(solve(F, np.array([2.0])), [0.5])

    def test_residual_random_spd(self):
        A = random_spd(10, 42)
        F = factorize(SparseSym(A))
        b = np.random.default_rng(7).standard_normal(10)
        x = solve(F, b)
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) <= 1e-10

    def test_matches_dense_elimination_oracle(self):
        A = random_spd(6, 3)
        b = np.random.default_rng(11).standard_normal(6)
        x = solve(factorize(SparseSym(A)), b)
        assert np.linalg.norm(x - dense_gaussian_elimination(A, b)) <= 1e-10

    def test_not_spd_detected(self):
        A = random_spd(6, 5)
        A[2, 2] = -50.0
        with pytest.raises(NotSPDError):
            factorize(SparseSym(A))

    def test_singular_detected(self):
        A = np.zeros((3, 3))
        A[0, 0] = 1.0
        with pytest.raises(NotSPDError):
            factorize(SparseSym(A))

    def test_dimension_mismatch(self):
        F = factorize(SparseSym(sp.eye(3)))
        with pytest.raises(DimensionMismatchError):
            solve(F, np.zeros(4))

    def test_deterministic_bit_identical(self):
        A = random_spd(20, 9)
        b = np.random.default_rng(1).standard_normal(20)
        x1 = solve(factorize(SparseSym(A)), b)
        x2 = solve(factorize(SparseSym(A)), b)
        assert np.array_equal(x1, x2)

    def test_solve_count(self):
        F = factorize(SparseSym(sp.eye(3)))
        assert F.solve_count == 0
        F.solve(np.zeros(3))
        F.solve_multi(np.zeros((3, 4)))
        assert F.solve_count == 5


class TestSolveMulti:
    def test_identity_rhs_gives_inverse(self):
        A = random_spd(6, 21)
        F = factorize(SparseSym(A))
        X = solve_multi(F, np.eye(6))
        for j in range(6):
            assert np.array_equal(X[:, j], solve(factorize(SparseSym(A)), np.eye(6)[:, j]))
        assert np.allclose(A @ X, np.eye(6), atol=1e-10)

    def test_duplicate_columns(self):
        F = factorize(SparseSym(random_spd(5, 2)))
        b = np.random.default_rng(3).standard_normal(5)
        X = solve_multi(F, np.column_stack([b, b]))
        assert np.array_equal(X[:, 0], X[:, 1])

    def test_columnwise_matches_solve(self):
        A = random_spd(10, 17)
        F = factorize(SparseSym(A))
        B = np.random.default_rng(5).standard_normal((10, 3))
        X = solve_multi(F, B)
        for j in range(3):
            assert np.linalg.norm(X[:, j] - solve(F, B[:, j])) <= 1e-12

    def test_shape_check(self):
        F = factorize(SparseSym(sp.eye(4)))
        with pytest.raises(DimensionMismatchError):
            solve_multi(F, np.zeros((3, 2)))

    def test_residual_property_many_dims(self):
        # ||A solve_multi(F, B) - B||_inf <= 1e-9 ||B||_inf over seeded SPD systems
        for dim in (2, 7, 23, 50):
            A = random_spd(dim, dim)
            F = factorize(SparseSym(A))
            B = np.random.default_rng(dim + 1).standard_normal((dim, 4))
            X = solve_multi(F, B)
            assert np.abs(A @ X - B).max() <= 1e-9 * np.abs(B).max()


class TestGemm:
    def test_identity(self):
        A = np.random.default_rng(0).standard_normal((4, 4))
        assert np.array_equal(gemm(A, np.eye(4)), A)

    def test_counting(self):
        C = gemm(np.ones((2, 3)), np.ones((3, 2)))
        assert np.array_equal(C, np.full((2, 2), 3.0))

    def test_matches_naive_triple_loop_bitwise(self):
        rng = np.random.default_rng(13)
        A = rng.standard_normal((5, 4))
        B = rng.standard_normal((4, 6))
        assert np.array_equal(gemm(A, B), gemm_naive(A, B))

    def test_transposes(self):
        rng = np.random.default_rng(8)
        A = rng.standard_normal((4, 5))
        B = rng.standard_normal((6, 4))
        assert np.array_equal(gemm(A, B, transpose_a=True, transpose_b=True),
                              gemm_naive(A.T, B.T))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            gemm(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity_tolerance(self):
        rng = np.random.default_rng(4)
        A = rng.uniform(-1, 1, (6, 6)) / 6.0
        B = rng.uniform(-1, 1, (6, 6)) / 6.0
        C = rng.uniform(-1, 1, (6, 6)) / 6.0
        left = gemm(gemm(A, B), C)
        right = gemm(A, gemm(B, C))
        assert np.abs(left - right).max() <= 1e-10
