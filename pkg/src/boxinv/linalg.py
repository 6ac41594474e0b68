"""Symmetric linear algebra: dense/sparse storage, Cholesky-type solves, CG.

All heavy lifting is delegated to LAPACK/SuperLU through scipy; this module
fixes the storage conventions (full symmetric pattern, CSR with sorted column
indices) and the error semantics used by the QP and FEM layers.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    NoConvergence,
    NotPositiveDefinite,
)

#: dense storage is used up to this dimension, sparse/operator beyond
DENSE_LIMIT = 4000

_SYM_TOL = 1e-12
_PIVOT_REL_TOL = 1e-14


class SymMatrix:
    """Symmetric matrix, stored dense (ndarray) or sparse (CSR, full pattern)."""

    def __init__(self, data, check_symmetry=True):
        if sp.issparse(data):
            m = data.tocsr()
            m.sort_indices()
            self._m = m
            self.sparse = True
        else:
            self._m = np.asarray(data, dtype=float)
            self.sparse = False
        if self._m.shape[0] != self._m.shape[1]:
            raise DimensionMismatch(f"not square: {self._m.shape}")
        self.n = self._m.shape[0]
        if check_symmetry:
            self._check_symmetry()

    def _check_symmetry(self):
        m = self._m
        scale = np.abs(m).max() if self.n else 0.0
        if self.n == 0:
            return
        rng = np.random.default_rng(0)
        k = min(self.n, 20)
        idx = rng.choice(self.n, size=(k, 2))
        for i, j in idx:
            d = abs(m[i, j] - m[j, i])
            if d > _SYM_TOL * max(scale, 1.0):
                raise ValueError(f"matrix not symmetric at ({i},{j}): |diff|={d}")

    @property
    def raw(self):
        return self._m

    def to_dense(self):
        if self.sparse:
            return self._m.toarray()
        return self._m

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DimensionMismatch(f"{self.n} vs {v.shape[0]}")
        return self._m @ v

    def diagonal(self):
        return self._m.diagonal()

    def __matmul__(self, v):
        return self.matvec(v)


class LinearOperator:
    """Implicit symmetric operator given by a matvec closure."""

    def __init__(self, n, matvec):
        self.n = n
        self._matvec = matvec

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DimensionMismatch(f"{self.n} vs {v.shape[0]}")
        return self._matvec(v)

    def __matmul__(self, v):
        return self.matvec(v)

    def check_symmetry(self, nprobe=3, tol=1e-10, seed=0):
        rng = np.random.default_rng(seed)
        for _ in range(nprobe):
            u = rng.standard_normal(self.n)
            v = rng.standard_normal(self.n)
            a = u @ self.matvec(v)
            b = v @ self.matvec(u)
            if abs(a - b) > tol * max(abs(a), abs(b), 1.0):
                return False
        return True


class CholeskyFactor:
    """Factorization handle; dense Cholesky or sparse LU with fill-reducing permutation."""

    def __init__(self, n, dense_factor=None, sparse_factor=None):
        self.n = n
        self._dense = dense_factor
        self._sparse = sparse_factor


def factorize(m: SymMatrix) -> CholeskyFactor:
    """Factorize an SPD matrix; raises NotPositiveDefinite on rank deficiency."""
    if m.n == 0:
        return CholeskyFactor(0)
    if not m.sparse:
        a = m.raw
        try:
            cf = sla.cho_factor(a, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        # cho_factor succeeds on barely-indefinite input only when a pivot is
        # numerically positive; enforce the relative pivot threshold explicitly
        piv = np.diag(cf[0]) ** 2
        if piv.min() <= _PIVOT_REL_TOL * a.diagonal().max():
            raise NotPositiveDefinite(
                f"pivot {piv.min():.3e} below threshold"
            )
        return CholeskyFactor(m.n, dense_factor=cf)
    a = m.raw.tocsc()
    try:
        # symmetric mode with pivots taken from the diagonal keeps the U
        # diagonal meaningful: it is positive exactly when the matrix is
        # positive definite (an LDL'-style factorization)
        lu = spla.splu(a, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    du = lu.U.diagonal()
    if np.any(du <= _PIVOT_REL_TOL * a.diagonal().max()):
        raise NotPositiveDefinite("nonpositive pivot in sparse factorization")
    return CholeskyFactor(m.n, sparse_factor=lu)


def solve(f: CholeskyFactor, b):
    """Solve M x = b using a prior factorization of M."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != f.n:
        raise DimensionMismatch(f"{f.n} vs {b.shape[0]}")
    if f.n == 0:
        return np.zeros(0)
    if f._dense is not None:
        return sla.cho_solve(f._dense, b, check_finite=False)
    return f._sparse.solve(b)


def cg_solve(op, b, tol=1e-11, maxit=None):
    """Conjugate gradients for SPD operators; residual target tol*||b||."""
    b = np.asarray(b, dtype=float)
    n = op.n if hasattr(op, "n") else b.shape[0]
    if b.shape[0] != n:
        raise DimensionMismatch(f"{n} vs {b.shape[0]}")
    if maxit is None:
        maxit = 10 * n + 50
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    x = np.zeros(n)
    r = b.copy()
    p = r.copy()
    rs = r @ r
    for _ in range(maxit):
        if np.sqrt(rs) <= tol * bnorm:
            return x
        ap = op @ p
        alpha = rs / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    if np.sqrt(rs) <= tol * bnorm:
        return x
    raise NoConvergence(
        f"cg: residual {np.sqrt(rs):.3e} after {maxit} iterations",
        residual=np.sqrt(rs),
    )


def extract_principal_submatrix(m: SymMatrix, idx) -> SymMatrix:
    """Return m restricted to rows and columns idx (strictly increasing)."""
    idx = np.asarray(idx, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= m.n):
        raise IndexOutOfRange(f"indices outside 0..{m.n - 1}")
    if idx.size > 1 and np.any(np.diff(idx) <= 0):
        raise IndexOutOfRange("indices must be strictly increasing")
    if m.sparse:
        sub = m.raw[idx][:, idx]
        return SymMatrix(sub, check_symmetry=False)
    return SymMatrix(m.raw[np.ix_(idx, idx)], check_symmetry=False)
