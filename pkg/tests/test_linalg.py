"""Tests for the symmetric linear algebra layer."""

import numpy as np
import pytest
import scipy.sparse as sp

from boxinv import linalg
from boxinv.errors import (
    DimensionMismatch,
    IndexOutOfRange,
    NoConvergence,
    NotPositiveDefinite,
)
from boxinv.linalg import (
    CholeskyFactor,
    LinearOperator,
    SymMatrix,
    cg_solve,
    extract_principal_submatrix,
    factorize,
    solve,
)


def random_spd(n, cond=100.0, seed=0):
    rng = np.random.default_rng(seed)
    u, _, _ = np.linalg.svd(rng.standard_normal((n, n)))
    eigs = np.geomspace(1.0, cond, n)
    return (u * eigs) @ u.T


class TestSymMatrix:
    def test_dense_roundtrip(self):
        a = random_spd(6)
        m = SymMatrix(a)
        assert m.n == 6
        assert not m.sparse
        np.testing.assert_array_equal(m.to_dense(), a)

    def test_sparse_storage(self):
        a = sp.csr_matrix(random_spd(8))
        m = SymMatrix(a)
        assert m.sparse
        np.testing.assert_allclose(m.to_dense(), a.toarray())

    def test_matvec_matches_dense(self):
        a = random_spd(7, seed=3)
        v = np.arange(7, dtype=float)
        np.testing.assert_allclose(SymMatrix(a) @ v, a @ v)

    def test_rejects_nonsquare(self):
        with pytest.raises(DimensionMismatch):
            SymMatrix(np.ones((3, 4)))

    def test_rejects_asymmetric(self):
        a = random_spd(10)
        a[2, 5] += 1.0
        with pytest.raises(ValueError):
            SymMatrix(a)

    def test_matvec_dimension_check(self):
        m = SymMatrix(np.eye(4))
        with pytest.raises(DimensionMismatch):
            m @ np.ones(5)


class TestLinearOperator:
    def test_matvec(self):
        a = random_spd(5, seed=1)
        op = LinearOperator(5, lambda v: a @ v)
        v = np.linspace(0, 1, 5)
        np.testing.assert_allclose(op @ v, a @ v)

    def test_symmetry_probe(self):
        a = random_spd(6, seed=2)
        assert LinearOperator(6, lambda v: a @ v).check_symmetry()
        b = a.copy()
        b[0, 3] += 0.5  # symmetric storage broken
        assert not LinearOperator(6, lambda v: b @ v).check_symmetry()


class TestFactorize:
    @pytest.mark.parametrize("sparse", [False, True])
    def test_solve_spd(self, sparse):
        a = random_spd(9, cond=1e4, seed=4)
        m = SymMatrix(sp.csr_matrix(a) if sparse else a)
        f = factorize(m)
        b = np.sin(np.arange(9.0))
        x = solve(f, b)
        np.testing.assert_allclose(a @ x, b, atol=1e-10)

    @pytest.mark.parametrize("sparse", [False, True])
    def test_rejects_indefinite(self, sparse):
        a = np.diag([1.0, -1.0, 2.0])
        m = SymMatrix(sp.csr_matrix(a) if sparse else a, check_symmetry=False)
        with pytest.raises(NotPositiveDefinite):
            factorize(m)

    def test_rejects_tiny_pivot(self):
        a = np.diag([1.0, 1e-30])
        with pytest.raises(NotPositiveDefinite):
            factorize(SymMatrix(a))

    def test_empty_matrix(self):
        f = factorize(SymMatrix(np.zeros((0, 0))))
        assert solve(f, np.zeros(0)).shape == (0,)

    def test_solve_dimension_check(self):
        f = factorize(SymMatrix(np.eye(3)))
        with pytest.raises(DimensionMismatch):
            solve(f, np.ones(4))


class TestCG:
    def test_matches_direct(self):
        a = random_spd(20, cond=1e3, seed=5)
        b = np.cos(np.arange(20.0))
        x = cg_solve(LinearOperator(20, lambda v: a @ v), b, tol=1e-12)
        np.testing.assert_allclose(x, np.linalg.solve(a, b), atol=1e-8)

    def test_zero_rhs(self):
        op = LinearOperator(4, lambda v: v)
        np.testing.assert_array_equal(cg_solve(op, np.zeros(4)), np.zeros(4))

    def test_no_convergence_reports_residual(self):
        a = random_spd(30, cond=1e8, seed=6)
        op = LinearOperator(30, lambda v: a @ v)
        with pytest.raises(NoConvergence) as exc:
            cg_solve(op, np.ones(30), tol=1e-15, maxit=3)
        assert exc.value.residual > 0


class TestSubmatrix:
    def test_extract_matches_fancy_indexing(self):
        a = random_spd(8, seed=7)
        idx = np.array([1, 3, 6])
        sub = extract_principal_submatrix(SymMatrix(a), idx)
        np.testing.assert_array_equal(sub.to_dense(), a[np.ix_(idx, idx)])

    def test_sparse_extract(self):
        a = random_spd(8, seed=8)
        sub = extract_principal_submatrix(
            SymMatrix(sp.csr_matrix(a)), np.array([0, 2, 7]))
        np.testing.assert_allclose(
            sub.to_dense(), a[np.ix_([0, 2, 7], [0, 2, 7])])

    def test_rejects_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            extract_principal_submatrix(SymMatrix(np.eye(3)), [0, 3])

    def test_rejects_unsorted(self):
        with pytest.raises(IndexOutOfRange):
            extract_principal_submatrix(SymMatrix(np.eye(4)), [2, 1])
