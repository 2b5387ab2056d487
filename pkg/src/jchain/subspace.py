"""Orthonormal basis of the invariant subspace of a nearly degenerate pair.

Both drivers first locate the eigenvector u1 nearest the estimate mu, then
grow a second direction u2 as an eigenvector of the projected operator
(I - u1 u1*) A by shifted inverse iteration.  The matrix-free driver solves
the projected system directly with GMRES; the factorizing driver solves with
the unprojected shifted matrix and repairs the projection roundoff by
iterative refinement, which matters because the unprojected solve returns a
vector nearly parallel to u1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import NonConvergenceError, RefinementStagnationError
from .linops import (
    LinearOperator,
    ProjectedOperator,
    canonical_phase,
    make_shifted_solver,
    project_perp,
    rayleigh_inverse_iteration,
    solver_at_shift,
    _nudged,
)


@dataclass
class SubspaceConfig:
    """Tolerances and budgets for the two-stage subspace iteration.

    ``tol`` terminates the outer u2 loop, ``refine_tol`` the inner
    refinement; both are relative to the operator norm estimate.  With
    ``refactor_each_iteration`` off, the factorizing driver freezes the
    shift at mu and reuses one factorization.
    """

    tol: float = 1e-10
    refine_tol: float = 1e-10
    maxit_outer: int = 40
    maxit_refine: int = 10
    refactor_each_iteration: bool = True
    seed: int = 0
    maxit_eig: int = 60
    krylov_tol: float = 1e-12
    krylov_maxit: int = 400

    def __post_init__(self):
        if self.tol <= 0 or self.refine_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class Subspace:
    u1: np.ndarray
    u2: np.ndarray
    lambda1: complex
    lambda2: complex
    residuals: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)
    converged: bool = True

    @property
    def basis(self) -> np.ndarray:
        return np.stack([self.u1, self.u2], axis=1)


def _start_vector(n, u1, seed, cplx):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-1, 1, n)
    if cplx:
        v = v + 1j * rng.uniform(-1, 1, n)
    v = project_perp(u1, v)
    return v / np.linalg.norm(v)


def _stage1(op, mu, cfg, backend):
    res = rayleigh_inverse_iteration(
        op, mu, tol=cfg.tol, maxit=cfg.maxit_eig, backend=backend, seed=cfg.seed
    )
    if not res.converged:
        raise NonConvergenceError(
            f"eigenvector stage stalled at residual {res.residual:.3e}",
            best=res,
            residuals=[res.residual],
        )
    return res


def _finish(op, u1, u2, lam1, norm_a, history, iters, converged):
    u2 = project_perp(u1, u2)
    u2 = canonical_phase(u2 / np.linalg.norm(u2))
    pa = ProjectedOperator(op, u1)
    w = pa.apply(u2)
    lam2 = complex(u2.conj() @ w)
    res2 = float(np.linalg.norm(w - lam2 * u2))
    sub = Subspace(
        u1=u1,
        u2=u2,
        lambda1=lam1,
        lambda2=lam2,
        residuals={"u1": float(np.linalg.norm(op.apply(u1) - lam1 * u1)), "u2": res2,
                   "history": history},
        iterations=iters,
        converged=converged,
    )
    return sub


def _ritz(pa, u2, cplx):
    w = pa.apply(u2)
    lam = complex(u2.conj() @ w)
    if not cplx:
        lam = lam.real
    return lam, float(np.linalg.norm(w - lam * u2))


def find_subspace_matrix_free(op: LinearOperator, mu, cfg: SubspaceConfig | None = None) -> Subspace:
    """Invariant-subspace basis via GMRES solves with the projected operator."""
    cfg = cfg or SubspaceConfig()
    norm_a = op.norm_est()
    target = cfg.tol * max(norm_a, np.finfo(float).tiny)
    eig = _stage1(op, mu, cfg, backend="krylov-matrix-free")
    u1, lam1 = eig.vector, eig.value
    cplx = op.is_complex or complex(mu).imag != 0
    pa = ProjectedOperator(op, u1)
    lam_p = complex(mu) if cplx else complex(mu).real
    u2 = _start_vector(op.n, u1, cfg.seed + 1, cplx)
    history = []
    for it in range(cfg.maxit_outer):
        if it > 0:
            lam_p, res = _ritz(pa, u2, cplx)
        else:
            _, res = _ritz(pa, u2, cplx)  # first pass keeps the shift at mu
        history.append(res)
        if res <= target:
            return _finish(op, u1, u2, lam1, norm_a, history,
                           {"eig": eig.iterations, "outer": it}, True)
        solver = make_shifted_solver(
            pa, lam_p, backend="krylov-matrix-free",
            tol=cfg.krylov_tol, maxit=cfg.krylov_maxit,
        )
        try:
            v = solver.solve(u2)
        except NonConvergenceError:
            solver = make_shifted_solver(
                pa, _nudged(lam_p, 0, norm_a), backend="krylov-matrix-free",
                tol=cfg.krylov_tol, maxit=cfg.krylov_maxit,
            )
            v = solver.solve(u2)
        v = project_perp(u1, v)
        u2 = v / np.linalg.norm(v)
    _, res = _ritz(pa, u2, cplx)
    history.append(res)
    best = _finish(op, u1, u2, lam1, norm_a, history,
                   {"eig": eig.iterations, "outer": cfg.maxit_outer}, False)
    raise NonConvergenceError(
        f"projected inverse iteration stalled at residual {history[-1]:.3e} "
        f"(target {target:.3e})",
        best=best,
        residuals=history,
    )


def find_subspace_sparse_direct(op: LinearOperator, mu, cfg: SubspaceConfig | None = None) -> Subspace:
    """Invariant-subspace basis via factorized shifted solves plus refinement.

    Each outer pass computes v = P (A - lam'I)^{-1} u2 (P the projector
    against u1) and then refines v against the correction residual
    e = u2 - P (A - lam'I) v until ||e|| drops below refine_tol, which
    recovers the digits lost to cancellation in the projection: the
    unprojected solve is dominated by its u1 component, so P of it carries
    amplified roundoff.
    """
    cfg = cfg or SubspaceConfig()
    backend = "dense-lu" if op.kind == "dense" else "sparse-direct"
    norm_a = op.norm_est()
    target = cfg.tol * max(norm_a, np.finfo(float).tiny)
    refine_target = cfg.refine_tol * max(norm_a, np.finfo(float).tiny)
    eig = _stage1(op, mu, cfg, backend=backend)
    u1, lam1 = eig.vector, eig.value
    cplx = op.is_complex or complex(mu).imag != 0
    pa = ProjectedOperator(op, u1)
    mu0 = complex(mu) if cplx else complex(mu).real
    u2 = _start_vector(op.n, u1, cfg.seed + 1, cplx)
    history = []
    solver = None
    shift = mu0
    refine_counts = []
    for it in range(cfg.maxit_outer):
        ritz, res = _ritz(pa, u2, cplx)
        history.append(res)
        if res <= target:
            return _finish(op, u1, u2, lam1, norm_a, history,
                           {"eig": eig.iterations, "outer": it,
                            "refine": refine_counts}, True)
        if solver is None:
            solver, shift = solver_at_shift(op, mu0, backend, cfg.tol, cfg.krylov_maxit,
                                            scale=norm_a)
        elif cfg.refactor_each_iteration:
            solver, shift = solver_at_shift(op, ritz, backend, cfg.tol, cfg.krylov_maxit,
                                            scale=norm_a)
        lam_s = shift

        def apply_shifted(x):
            return op.apply(x) - lam_s * x

        v = project_perp(u1, solver.solve(u2))
        e = u2 - project_perp(u1, apply_shifted(v))
        passes = 0
        err_norm = float(np.linalg.norm(e))
        stall = 0
        # the residual evaluation itself rounds at eps_mach * ||A|| * ||v||,
        # so never chase e below that floor
        def floor_for(vec):
            return 50 * np.finfo(float).eps * (norm_a + abs(lam_s)) * float(np.linalg.norm(vec))

        while err_norm > max(refine_target, floor_for(v)) and passes < cfg.maxit_refine:
            v = v + project_perp(u1, solver.solve(e))
            e = u2 - project_perp(u1, apply_shifted(v))
            new_norm = float(np.linalg.norm(e))
            stall = stall + 1 if new_norm >= err_norm else 0
            if stall >= 3:
                raise RefinementStagnationError(
                    f"refinement stagnated at ||e||={new_norm:.3e}",
                    best=None,
                    residuals=history,
                )
            err_norm = new_norm
            passes += 1
        refine_counts.append(passes)
        u2 = v / np.linalg.norm(v)
    _, res = _ritz(pa, u2, cplx)
    history.append(res)
    best = _finish(op, u1, u2, lam1, norm_a, history,
                   {"eig": eig.iterations, "outer": cfg.maxit_outer,
                    "refine": refine_counts}, False)
    raise NonConvergenceError(
        f"shift-invert iteration stalled at residual {history[-1]:.3e} "
        f"(target {target:.3e})",
        best=best,
        residuals=history,
    )


def principal_angle(basis_a, basis_b) -> float:
    """Largest principal angle between two column spans, accurate near zero."""
    qa = sla.orth(np.atleast_2d(basis_a))
    qb = sla.orth(np.atleast_2d(basis_b))
    if qa.shape[0] != qb.shape[0]:
        raise ValueError("bases live in different ambient dimensions")
    # sine-based form: arccos of singular values loses small angles
    resid = qb - qa @ (qa.conj().T @ qb)
    sines = sla.svdvals(resid)
    return float(np.arcsin(min(1.0, max(sines.max(), 0.0))))


def subspace_equivalence_check(a: Subspace, b: Subspace) -> float:
    """Largest principal angle between the spans of two Subspace results."""
    return principal_angle(a.basis, b.basis)
