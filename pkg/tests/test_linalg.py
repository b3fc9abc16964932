"""Dense linear algebra checks against independent oracles.

The SVD is validated against a self-contained two-sided Jacobi
eigensolver applied to M^T M (written here, sharing no code with the
implementation under test), and matmul against a naive triple loop.
"""

import numpy as np
import pytest

from chunklora.errors import DomainError, RangeError, ShapeError
from chunklora.linalg import SvdResult, frobenius, matmul, matrix, svd, truncated_reconstruct


def naive_matmul(a, b):
    """Triple-loop reference product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def jacobi_eigenvalues(sym, sweeps=100, tol=1e-14):
    """Eigenvalues of a symmetric matrix via classic two-sided Jacobi rotations."""
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off = max(off, abs(a[p, q]))
                if abs(a[p, q]) <= tol * max(1.0, abs(a[p, p]) + abs(a[q, q])):
                    continue
                phi = 0.5 * np.arctan2(2.0 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(phi), np.sin(phi)
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
        if off <= tol:
            break
    return np.sort(np.diag(a))[::-1]


class TestMatrix:
    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            matrix([[1.0, np.nan], [0.0, 1.0]])
        with pytest.raises(DomainError):
            matrix([[np.inf]])

    def test_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            matrix([1.0, 2.0, 3.0], rows=2, cols=2)
        with pytest.raises(ShapeError):
            matrix([1.0, 2.0, 3.0])

    def test_reshape(self):
        m = matrix([1, 2, 3, 4, 5, 6], rows=2, cols=3)
        assert m.shape == (2, 3)
        assert m[1, 0] == 4.0


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(7)
        m = rng.standard_normal((3, 5))
        assert np.array_equal(matmul(np.eye(3), m), m)

    def test_zero(self):
        rng = np.random.default_rng(8)
        m = rng.standard_normal((4, 3))
        assert np.array_equal(matmul(m, np.zeros((3, 2))), np.zeros((4, 2)))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(42)
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((3, 2))
        got = matmul(a, b)
        want = naive_matmul(a, b)
        assert np.allclose(got, want, rtol=0, atol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestSvd:
    def test_diagonal(self):
        res = svd(np.diag([3.0, 1.0, 2.0]))
        assert np.allclose(res.sigma, [3.0, 2.0, 1.0], atol=1e-12)

    def test_zero_matrix(self):
        res = svd(np.zeros((5, 4)))
        assert res.sigma.shape == (4,)
        assert np.all(res.sigma == 0.0)
        # completed basis must still be orthonormal
        assert np.allclose(res.u.T @ res.u, np.eye(4), atol=1e-8)
        assert np.allclose(res.v.T @ res.v, np.eye(4), atol=1e-8)

    def test_singular_values_match_eigensolver_oracle(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((8, 6))
        res = svd(m)
        eigs = jacobi_eigenvalues(m.T @ m)
        assert np.allclose(res.sigma**2, eigs, atol=1e-8)

    @pytest.mark.parametrize("shape", [(6, 6), (8, 5), (5, 9), (1, 4), (7, 1)])
    def test_reconstruction_and_orthonormality(self, shape):
        rng = np.random.default_rng(hash(shape) % (2**32))
        m = rng.standard_normal(shape)
        res = svd(m)
        k = min(shape)
        recon = (res.u * res.sigma) @ res.v.T
        assert frobenius(recon - m) <= 1e-8 * max(1.0, frobenius(m))
        assert np.allclose(res.u.T @ res.u, np.eye(k), atol=1e-8)
        assert np.allclose(res.v.T @ res.v, np.eye(k), atol=1e-8)
        assert np.all(np.diff(res.sigma) <= 1e-15)
        assert np.all(res.sigma >= 0.0)

    def test_rank_deficient(self):
        rng = np.random.default_rng(11)
        base = rng.standard_normal((6, 2))
        m = base @ rng.standard_normal((2, 5))
        res = svd(m)
        assert np.sum(res.sigma > 1e-10 * res.sigma[0]) == 2
        assert np.allclose(res.u.T @ res.u, np.eye(5), atol=1e-8)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((7, 4))
        r1 = svd(m)
        r2 = svd(m)
        assert np.array_equal(r1.u, r2.u)
        assert np.array_equal(r1.sigma, r2.sigma)
        assert np.array_equal(r1.v, r2.v)

    def test_rejects_non_finite(self):
        bad = np.ones((3, 3))
        bad[1, 1] = np.nan
        with pytest.raises(DomainError):
            svd(bad)

    def test_rejects_empty(self):
        with pytest.raises(ShapeError):
            svd(np.zeros((0, 3)))


class TestTruncatedReconstruct:
    def _random_result(self, seed=13, shape=(9, 6)):
        rng = np.random.default_rng(seed)
        return svd(rng.standard_normal(shape)), rng

    def test_full_rank_recovers_input(self):
        rng = np.random.default_rng(21)
        m = rng.standard_normal((6, 8))
        res = svd(m)
        recon = truncated_reconstruct(res, res.k)
        assert frobenius(recon - m) <= 1e-8 * max(1.0, frobenius(m))

    def test_rank_zero(self):
        res, _ = self._random_result()
        assert np.array_equal(truncated_reconstruct(res, 0), np.zeros((9, 6)))

    def test_eckart_young_tail(self):
        rng = np.random.default_rng(17)
        m = rng.standard_normal((8, 7))
        res = svd(m)
        for r in range(res.k + 1):
            err = frobenius(m - truncated_reconstruct(res, r))
            tail = float(np.sqrt(np.sum(res.sigma[r:] ** 2)))
            assert abs(err - tail) <= 1e-8 * max(1.0, frobenius(m))

    def test_out_of_range(self):
        res, _ = self._random_result()
        with pytest.raises(RangeError):
            truncated_reconstruct(res, res.k + 1)
        with pytest.raises(RangeError):
            truncated_reconstruct(res, -1)
