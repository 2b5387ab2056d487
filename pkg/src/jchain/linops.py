"""Linear operators and shifted-solve backends.

Everything downstream (subspace iteration, chain construction, adjoint
sensitivities) reduces to products with a square operator A and solves with
(A - sigma*I) or its conjugate transpose.  Operators come in four kinds:

* ``dense``                -- an ndarray
* ``sparse-csr``           -- a scipy CSR matrix
* ``sparse-plus-low-rank`` -- Sparse + V @ W.conj().T with tall-skinny V, W
* ``projected-composite``  -- (I - u1 u1*) A, applied factor by factor

Completed factorizations and the operators themselves are immutable; Krylov
solves keep per-call state only.
"""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DimensionMismatchError,
    NonConvergenceError,
    SingularFactorizationError,
)

_NORM_EST_SEED = 0x5EED
_NORM_EST_STEPS = 10


class LinearOperator:
    """Square operator over the complex (or real) field."""

    kind = "abstract"

    def __init__(self, n, dtype):
        self.n = int(n)
        self.dtype = np.dtype(dtype)
        self._norm_est = None

    @property
    def is_complex(self) -> bool:
        return np.issubdtype(self.dtype, np.complexfloating)

    def _check(self, v):
        v = np.asarray(v)
        if v.shape != (self.n,):
            raise DimensionMismatchError(
                f"operator of dimension {self.n} applied to shape {v.shape}"
            )
        return v

    def apply(self, v):
        raise NotImplementedError

    def apply_adjoint(self, v):
        raise NotImplementedError

    def norm_est(self) -> float:
        """Estimated 2-norm: fixed-seed power iteration on A*A."""
        if self._norm_est is None:
            self._norm_est = _power_norm_est(self)
        return self._norm_est

    def __matmul__(self, v):
        return self.apply(v)


class DenseOperator(LinearOperator):
    kind = "dense"

    def __init__(self, array):
        array = np.asarray(array)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise ValueError("dense operator needs a square 2-D array")
        dtype = np.complex128 if np.iscomplexobj(array) else np.float64
        super().__init__(array.shape[0], dtype)
        self.array = np.ascontiguousarray(array, dtype=dtype)

    def apply(self, v):
        return self.array @ self._check(v)

    def apply_adjoint(self, v):
        return self.array.conj().T @ self._check(v)


class SparseOperator(LinearOperator):
    kind = "sparse-csr"

    def __init__(self, matrix):
        matrix = sp.csr_matrix(matrix)
        if matrix.shape[0] != matrix.shape[1]:
            raise ValueError("sparse operator needs a square matrix")
        dtype = np.complex128 if np.iscomplexobj(matrix) else np.float64
        super().__init__(matrix.shape[0], dtype)
        self.matrix = matrix.astype(dtype)
        self._adjoint = None

    def apply(self, v):
        return self.matrix @ self._check(v)

    def apply_adjoint(self, v):
        if self._adjoint is None:
            self._adjoint = self.matrix.conj().T.tocsr()
        return self._adjoint @ self._check(v)


class SparseLowRankOperator(LinearOperator):
    """Sparse + V @ W.conj().T with V, W of shape (n, k)."""

    kind = "sparse-plus-low-rank"

    def __init__(self, sparse, v_factors, w_factors):
        sparse = sp.csr_matrix(sparse)
        v_factors = np.atleast_2d(np.asarray(v_factors))
        w_factors = np.atleast_2d(np.asarray(w_factors))
        if v_factors.shape != w_factors.shape or v_factors.shape[0] != sparse.shape[0]:
            raise ValueError("low-rank factors must both be (n, k)")
        cplx = any(np.iscomplexobj(x) for x in (sparse, v_factors, w_factors))
        dtype = np.complex128 if cplx else np.float64
        super().__init__(sparse.shape[0], dtype)
        self.sparse = sparse.astype(dtype)
        self.v_factors = v_factors.astype(dtype)
        self.w_factors = w_factors.astype(dtype)
        self._adjoint_sparse = None

    def apply(self, v):
        v = self._check(v)
        return self.sparse @ v + self.v_factors @ (self.w_factors.conj().T @ v)

    def apply_adjoint(self, v):
        v = self._check(v)
        if self._adjoint_sparse is None:
            self._adjoint_sparse = self.sparse.conj().T.tocsr()
        return self._adjoint_sparse @ v + self.w_factors @ (self.v_factors.conj().T @ v)


class ProjectedOperator(LinearOperator):
    """(I - u1 u1*) A, the composite driven matrix-free."""

    kind = "projected-composite"

    def __init__(self, base, u1):
        u1 = np.asarray(u1)
        if abs(np.linalg.norm(u1) - 1.0) > 1e-10:
            raise ValueError("projector direction must be a unit vector")
        dtype = np.complex128 if (base.is_complex or np.iscomplexobj(u1)) else np.float64
        super().__init__(base.n, dtype)
        self.base = base
        self.u1 = u1.astype(dtype)

    def apply(self, v):
        w = self.base.apply(self._check(v))
        return w - self.u1 * (self.u1.conj() @ w)

    def apply_adjoint(self, v):
        v = self._check(v)
        return self.base.apply_adjoint(v - self.u1 * (self.u1.conj() @ v))


class AdjointOperator(LinearOperator):
    """View of A* as an operator in its own right."""

    kind = "projected-composite"

    def __init__(self, base):
        super().__init__(base.n, base.dtype)
        self.base = base

    def apply(self, v):
        return self.base.apply_adjoint(self._check(v))

    def apply_adjoint(self, v):
        return self.base.apply(self._check(v))


def identity(n) -> DenseOperator:
    return DenseOperator(np.eye(n))


def from_dense(array) -> DenseOperator:
    return DenseOperator(array)


def from_sparse(matrix) -> SparseOperator:
    return SparseOperator(matrix)


def add_scaled(a: LinearOperator, b: LinearOperator, coeff) -> LinearOperator:
    """Materialize a + coeff*b in the richest kind both sides support."""
    if a.n != b.n:
        raise DimensionMismatchError("operands differ in dimension")
    if isinstance(a, DenseOperator) and isinstance(b, DenseOperator):
        return DenseOperator(a.array + coeff * b.array)
    if isinstance(a, DenseOperator) or isinstance(b, DenseOperator):
        da = a.array if isinstance(a, DenseOperator) else _densify(a)
        db = b.array if isinstance(b, DenseOperator) else _densify(b)
        return DenseOperator(da + coeff * db)
    sparse = a_sp = _sparse_part(a) + coeff * _sparse_part(b)
    factors = _lowrank_part(a) + [(v, w * np.conj(coeff)) for v, w in _lowrank_part(b)]
    if not factors:
        return SparseOperator(a_sp)
    v_all = np.hstack([v.reshape(sparse.shape[0], -1) for v, _ in factors])
    w_all = np.hstack([w.reshape(sparse.shape[0], -1) for _, w in factors])
    return SparseLowRankOperator(sparse, v_all, w_all)


def _sparse_part(op):
    if isinstance(op, SparseOperator):
        return op.matrix
    if isinstance(op, SparseLowRankOperator):
        return op.sparse
    raise ValueError(f"no sparse representation for kind {op.kind}")


def _lowrank_part(op):
    if isinstance(op, SparseLowRankOperator):
        return [(op.v_factors, op.w_factors)]
    return []


def _densify(op):
    cols = [op.apply(e) for e in np.eye(op.n, dtype=op.dtype)]
    return np.stack(cols, axis=1)


def _power_norm_est(op, steps=_NORM_EST_STEPS) -> float:
    rng = np.random.default_rng(_NORM_EST_SEED)
    v = rng.standard_normal(op.n)
    if op.is_complex:
        v = v + 1j * rng.standard_normal(op.n)
    v = v / np.linalg.norm(v)
    est = 0.0
    for _ in range(steps):
        w = op.apply(v)
        est = np.linalg.norm(w)
        if est == 0.0:
            return 0.0
        v = op.apply_adjoint(w)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v = v / nv
    return float(est)


def project_perp(u1, v):
    """Component of v orthogonal to the unit vector u1."""
    u1 = np.asarray(u1)
    v = np.asarray(v)
    if abs(np.linalg.norm(u1) - 1.0) > 1e-12:
        raise ValueError("u1 must have unit norm")
    return v - u1 * (u1.conj() @ v)


# ---------------------------------------------------------------------------
# shifted solvers


class ShiftedSolver:
    """Solve contract for (A - sigma*I) x = b and the conjugate system.

    ``solve`` and ``solve_adjoint`` either meet the relative-residual
    tolerance or raise ``NonConvergenceError``; factorizing backends raise
    ``SingularFactorizationError`` on an exactly zero pivot.  Large solution
    norms are not a failure: near-singular shifts are the whole point of
    inverse iteration.
    """

    backend = "abstract"

    def __init__(self, op, sigma, tol, maxit):
        self.op = op
        self.sigma = complex(sigma)
        self.tol = float(tol)
        self.maxit = int(maxit)

    def solve(self, b):
        raise NotImplementedError

    def solve_adjoint(self, b):
        raise NotImplementedError


class DenseLuSolver(ShiftedSolver):
    backend = "dense-lu"

    def __init__(self, op, sigma, tol=1e-12, maxit=0):
        super().__init__(op, sigma, tol, maxit)
        shifted = op.array.astype(complex) if (op.is_complex or complex(sigma).imag) else op.array.copy()
        shifted = shifted - np.eye(op.n, dtype=shifted.dtype) * (
            complex(sigma) if np.iscomplexobj(shifted) else complex(sigma).real
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            self._lu, self._piv = sla.lu_factor(shifted)
        diag = np.abs(np.diag(self._lu))
        if np.any(diag == 0.0):
            where = int(np.argmin(diag))
            raise SingularFactorizationError(
                f"shifted matrix is exactly singular (zero pivot at {where})",
                location=where,
            )

    def solve(self, b):
        return sla.lu_solve((self._lu, self._piv), np.asarray(b))

    def solve_adjoint(self, b):
        return sla.lu_solve((self._lu, self._piv), np.asarray(b), trans=2)


class SparseDirectSolver(ShiftedSolver):
    """LU-type factorization of the shifted sparse part.

    A sparse-plus-low-rank operator is handled with the factored sparse
    shift plus a Woodbury correction, so the fill of the low-rank term never
    enters the factorization.
    """

    backend = "sparse-direct"

    def __init__(self, op, sigma, tol=1e-12, maxit=0):
        super().__init__(op, sigma, tol, maxit)
        sparse = _sparse_part(op)
        shifted = (sparse - sigma * sp.identity(op.n, dtype=sparse.dtype, format="csr")).tocsc()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                self._factor = spla.splu(shifted)
        except RuntimeError as exc:
            raise SingularFactorizationError(
                f"sparse factorization failed at shift {sigma}: {exc}",
                location=str(exc),
            ) from exc
        self._lowrank = _lowrank_part(op)
        self._cap_lu = None
        self._cap_lu_h = None
        self._kinvv = None
        self._kinvw_h = None

    def _prep_woodbury(self):
        (v_f, w_f), = self._lowrank
        self._kinvv = np.stack([self._factor.solve(v_f[:, j]) for j in range(v_f.shape[1])], axis=1)
        cap = np.eye(v_f.shape[1], dtype=complex) + w_f.conj().T @ self._kinvv
        self._cap_lu = sla.lu_factor(cap)

    def _prep_woodbury_adjoint(self):
        (v_f, w_f), = self._lowrank
        self._kinvw_h = np.stack(
            [self._factor.solve(w_f[:, j], trans="H") for j in range(w_f.shape[1])], axis=1
        )
        cap = np.eye(v_f.shape[1], dtype=complex) + v_f.conj().T @ self._kinvw_h
        self._cap_lu_h = sla.lu_factor(cap)

    def solve(self, b):
        t = self._factor.solve(np.asarray(b).astype(self._factor.U.dtype))
        if not self._lowrank:
            return t
        if self._cap_lu is None:
            self._prep_woodbury()
        (_, w_f), = self._lowrank
        return t - self._kinvv @ sla.lu_solve(self._cap_lu, w_f.conj().T @ t)

    def solve_adjoint(self, b):
        t = self._factor.solve(np.asarray(b).astype(self._factor.U.dtype), trans="H")
        if not self._lowrank:
            return t
        if self._cap_lu_h is None:
            self._prep_woodbury_adjoint()
        (v_f, _), = self._lowrank
        return t - self._kinvw_h @ sla.lu_solve(self._cap_lu_h, v_f.conj().T @ t)


class KrylovSolver(ShiftedSolver):
    """Restarted GMRES on the shifted operator, matrix-free.

    No preconditioner by default; pass one through ``preconditioner`` (any
    object scipy's gmres accepts as M).
    """

    backend = "krylov-matrix-free"

    def __init__(self, op, sigma, tol=1e-10, maxit=300, restart=50, preconditioner=None):
        super().__init__(op, sigma, tol, maxit)
        self.restart = min(restart, op.n)
        self.preconditioner = preconditioner
        self._dtype = np.complex128 if (op.is_complex or complex(sigma).imag) else np.float64

    def _scipy_op(self, adjoint):
        sigma = self.sigma
        op = self.op
        if adjoint:
            def mv(v):
                return op.apply_adjoint(v) - np.conj(sigma) * v
        else:
            def mv(v):
                return op.apply(v) - sigma * v
        return spla.LinearOperator((op.n, op.n), matvec=mv, dtype=self._dtype)

    def _run(self, b, adjoint):
        b = np.asarray(b, dtype=self._dtype)
        x, info = spla.gmres(
            self._scipy_op(adjoint),
            b,
            rtol=self.tol,
            atol=0.0,
            restart=self.restart,
            maxiter=self.maxit,
            M=self.preconditioner,
        )
        if info != 0:
            raise NonConvergenceError(
                f"gmres did not reach rtol={self.tol} within "
                f"{self.maxit} restart cycles (info={info})",
                best=x,
            )
        return x

    def solve(self, b):
        return self._run(b, adjoint=False)

    def solve_adjoint(self, b):
        return self._run(b, adjoint=True)


_BACKENDS = {
    "dense-lu": DenseLuSolver,
    "sparse-direct": SparseDirectSolver,
    "krylov-matrix-free": KrylovSolver,
}


def default_backend(op: LinearOperator) -> str:
    if op.kind == "dense":
        return "dense-lu"
    if op.kind in ("sparse-csr", "sparse-plus-low-rank"):
        return "sparse-direct"
    return "krylov-matrix-free"


def make_shifted_solver(op, sigma, backend=None, tol=1e-10, maxit=300, **kw) -> ShiftedSolver:
    """Build a solver for (A - sigma*I); backend defaults to the kind's natural one."""
    if backend is None:
        backend = default_backend(op)
    if backend == "dense-lu" and op.kind != "dense":
        raise ValueError("dense-lu backend requires a dense operator")
    if backend == "sparse-direct" and op.kind not in ("sparse-csr", "sparse-plus-low-rank"):
        raise ValueError("sparse-direct backend requires a sparse or sparse-plus-low-rank operator")
    if backend not in _BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    return _BACKENDS[backend](op, sigma, tol=tol, maxit=maxit, **kw)


def _nudged(sigma, attempt, scale=1.0):
    # deterministic shift perturbation to escape an exactly singular pivot
    return sigma + max(abs(sigma), scale, 1.0) * 1e-13 * 10**attempt


def solver_at_shift(op, sigma, backend, tol, maxit, scale=1.0):
    """make_shifted_solver with up to three deterministic shift nudges."""
    for attempt in range(4):
        try:
            return make_shifted_solver(op, sigma, backend=backend, tol=tol, maxit=maxit), sigma
        except SingularFactorizationError:
            if attempt == 3:
                raise
            sigma = _nudged(sigma, attempt, scale)
    raise AssertionError("unreachable")


class EigResult(NamedTuple):
    value: complex
    vector: np.ndarray
    converged: bool
    iterations: int
    residual: float


def canonical_phase(v):
    """Rotate so the largest-magnitude entry is real and positive."""
    k = int(np.argmax(np.abs(v)))
    pivot = v[k]
    if pivot == 0:
        return v
    return v * (np.abs(pivot) / pivot)


def rayleigh_inverse_iteration(
    op, mu, tol=1e-10, maxit=50, backend=None, seed=0, v0=None
) -> EigResult:
    """Eigenpair of ``op`` nearest the estimate ``mu``.

    Shifted inverse iteration: the first solve uses the shift ``mu``, later
    shifts follow the Rayleigh quotient.  The returned residual is measured
    against ``tol * norm_est``; on budget exhaustion the best iterate comes
    back flagged ``converged=False``.
    """
    if backend is None:
        backend = default_backend(op)
    norm_a = op.norm_est()
    target = tol * max(norm_a, np.finfo(float).tiny)
    cplx = op.is_complex or complex(mu).imag != 0
    if v0 is not None:
        v = np.asarray(v0, dtype=complex if cplx else float)
    else:
        rng = np.random.default_rng(seed)
        v = rng.uniform(-1, 1, op.n)
        if cplx:
            v = v + 1j * rng.uniform(-1, 1, op.n)
    v = v / np.linalg.norm(v)
    sigma = complex(mu) if cplx else complex(mu).real
    solve_tol = min(tol, 1e-12)
    best = None
    lam = sigma
    for it in range(1, maxit + 1):
        solver, sigma = solver_at_shift(op, sigma, backend, solve_tol, 400, scale=norm_a)
        try:
            w = solver.solve(v)
        except NonConvergenceError:
            # stagnation at an exactly singular shift: nudge once and retry
            solver, sigma = solver_at_shift(
                op, _nudged(sigma, 0, norm_a), backend, solve_tol, 400, scale=norm_a
            )
            w = solver.solve(v)
        nw = np.linalg.norm(w)
        if not np.isfinite(nw) or nw == 0.0:
            break
        v = w / nw
        av = op.apply(v)
        lam = complex(v.conj() @ av)
        if not cplx:
            lam = lam.real
        res = float(np.linalg.norm(av - lam * v))
        if best is None or res < best.residual:
            best = EigResult(lam, canonical_phase(v), False, it, res)
        if res <= target:
            return EigResult(lam, canonical_phase(v), True, it, res)
        if it >= 2:
            sigma = lam
    if best is None:
        best = EigResult(lam, canonical_phase(v), False, 0, float("inf"))
    return best
