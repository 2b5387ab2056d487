"""Parameter sensitivity of the defectiveness indicator, and the
second-order chain mode built on it.

g(S) = (trace(S)/2)^2 - det(S) vanishes exactly when the projected pencil is
defective.  Given dA/dp, one pair of adjoint solves yields dg/dp; a single
Newton step in p then lands within O(eps^2) of an exactly defective
operator, and rerunning the first-order pipeline there squares the accuracy.

Two sign conventions are implemented.  The published listing and the
underlying derivation disagree in the signs of the scalar multipliers and in
which inner product pins the second adjoint vector; the ``derivation``
convention reproduces an independent re-derivation (conjugation-corrected
for complex data) and is the default.  Both are kept behind a flag and must
be validated against the finite-difference oracle, which is the arbiter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .chain import JordanChain, Reduced2x2, chain_from_reduced, chain_residual, reduce_to_2x2
from .errors import (
    AdjointValidationError,
    NewtonBreakdownError,
    NonConvergenceError,
    SingularFactorizationError,
)
from .linops import (
    AdjointOperator,
    DenseOperator,
    LinearOperator,
    SparseLowRankOperator,
    SparseOperator,
    add_scaled,
    rayleigh_inverse_iteration,
)
from .subspace import Subspace, SubspaceConfig, find_subspace_matrix_free, find_subspace_sparse_direct

ORACLE_RTOL = 1e-6
ORACLE_FLOOR = 1e-3


@dataclass
class AdjointState:
    lambda1: np.ndarray
    lambda2: np.ndarray
    sigma11: complex
    sigma12: complex
    sigma21: complex
    sigma22: complex
    h: np.ndarray
    convention: str = "derivation"


@dataclass
class NewtonStep:
    g0: complex
    dgdp: complex
    p: complex
    validated: bool


def g_of_S(s: Reduced2x2) -> complex:
    """Defectiveness indicator: zero iff the 2x2 has a double eigenvalue."""
    return ((s.s11 - s.s22) / 2) ** 2 + s.s12 * s.s21


def dg_dS(s: Reduced2x2) -> np.ndarray:
    """Entrywise gradient of g; note the off-diagonal entries swap."""
    return np.array([
        [(s.s11 - s.s22) / 2, s.s21],
        [s.s12, (s.s22 - s.s11) / 2],
    ])


def _adjoint_materialized(op: LinearOperator) -> LinearOperator:
    """A* in a kind that direct backends can factorize."""
    if isinstance(op, DenseOperator):
        return DenseOperator(op.array.conj().T)
    if isinstance(op, SparseOperator):
        return SparseOperator(op.matrix.conj().T.tocsr())
    if isinstance(op, SparseLowRankOperator):
        return SparseLowRankOperator(op.sparse.conj().T.tocsr(), op.w_factors, op.v_factors)
    return AdjointOperator(op)


def _left_eigvec(op, shift, tol=1e-12, maxit=40, seed=3):
    """Left eigenvector y with A* y = conj(shift) y, unit norm."""
    res = rayleigh_inverse_iteration(
        _adjoint_materialized(op), np.conj(complex(shift)), tol=tol, maxit=maxit, seed=seed
    )
    if not res.converged:
        raise NonConvergenceError(
            f"left eigenvector at shift {shift} stalled (residual {res.residual:.3e})",
            best=res,
        )
    return res.vector


def _solve_shifted_adjoint_bordered(op, sigma, q, r, rhs):
    """Solve (A - sigma*I)* z = rhs through the bordered system
    [[(A-sigma*I)*, q], [r*, 0]]; q spans the missing range direction and r
    removes the near-null component, so the augmented matrix is
    well-conditioned even when the shift sits on an eigenvalue.
    """
    n = op.n
    sig_c = np.conj(complex(sigma))
    rhs_aug = np.concatenate([np.asarray(rhs, dtype=complex), [0.0]])
    if isinstance(op, DenseOperator):
        m_aug = np.zeros((n + 1, n + 1), dtype=complex)
        m_aug[:n, :n] = op.array.conj().T - sig_c * np.eye(n)
        m_aug[:n, n] = q
        m_aug[n, :n] = np.conj(r)
        sol = sla.solve(m_aug, rhs_aug)
        return sol[:n]
    if isinstance(op, (SparseOperator, SparseLowRankOperator)):
        sparse = op.matrix if isinstance(op, SparseOperator) else op.sparse
        shifted = sparse.conj().T - sig_c * sp.identity(n, dtype=complex, format="csr")
        m_aug = sp.bmat(
            [[shifted, sp.csc_matrix(np.asarray(q, dtype=complex).reshape(-1, 1))],
             [sp.csr_matrix(np.conj(np.asarray(r, dtype=complex)).reshape(1, -1)), None]],
            format="csc",
        )
        try:
            factor = spla.splu(m_aug)
        except RuntimeError as exc:
            raise SingularFactorizationError(str(exc), location=str(exc)) from exc
        if isinstance(op, SparseOperator):
            return factor.solve(rhs_aug)[:n]
        # Woodbury on the augmented system: (A - sigma I)* adds W V*
        v_aug = np.vstack([op.w_factors, np.zeros((1, op.w_factors.shape[1]))]).astype(complex)
        w_aug = np.vstack([op.v_factors, np.zeros((1, op.v_factors.shape[1]))]).astype(complex)
        kinv_v = np.stack([factor.solve(v_aug[:, j]) for j in range(v_aug.shape[1])], axis=1)
        cap = np.eye(v_aug.shape[1], dtype=complex) + w_aug.conj().T @ kinv_v
        t = factor.solve(rhs_aug)
        sol = t - kinv_v @ sla.lu_solve(sla.lu_factor(cap), w_aug.conj().T @ t)
        return sol[:n]

    def matvec(xz):
        x, xi = xz[:n], xz[n]
        top = op.apply_adjoint(x) - sig_c * x + xi * q
        return np.concatenate([top, [np.conj(r) @ x]])

    lin = spla.LinearOperator((n + 1, n + 1), matvec=matvec, dtype=complex)
    sol, info = spla.gmres(lin, rhs_aug, rtol=1e-12, atol=0.0,
                           restart=min(60, n + 1), maxiter=600)
    if info != 0:
        raise NonConvergenceError(f"bordered adjoint solve stalled (info={info})", best=sol[:n])
    return sol[:n]


def _solve_shifted_adjoint_plain(op, sigma, rhs):
    """Unbordered solve of (A - sigma*I)* z = rhs for the listing variant."""
    from .linops import solver_at_shift, default_backend

    adj = _adjoint_materialized(op)
    solver, _ = solver_at_shift(adj, np.conj(complex(sigma)), default_backend(adj), 1e-12, 600)
    return solver.solve(np.asarray(rhs, dtype=complex if adj.is_complex else float))


def _pin(vec, direction, inner_vec, target):
    """Add a multiple of ``direction`` so that inner_vec* vec == target."""
    denom = inner_vec.conj() @ direction
    coeff = (target - inner_vec.conj() @ vec) / denom
    return vec + coeff * direction, denom


def _check_real(*arrays):
    for a in arrays:
        if np.iscomplexobj(a) and np.max(np.abs(np.imag(a))) > 1e-12 * max(1.0, np.max(np.abs(a))):
            raise ValueError("real adjoint path received genuinely complex data")


def dg_dp_adjoint_real(op, dadp, sub: Subspace, s: Reduced2x2, convention="derivation"):
    """dg/dp for real data: two transposed shifted solves plus corrections."""
    _check_real(sub.u1, sub.u2, s.as_array())
    if op.is_complex or dadp.is_complex:
        raise ValueError("real adjoint path needs real operators")
    if convention == "derivation":
        dgdp, state = _adjoint_derivation(op, dadp, sub, s)
    elif convention == "listing":
        dgdp, state = _adjoint_listing_real(op, dadp, sub, s)
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return float(np.real(dgdp)), state


def dg_dp_adjoint_complex(op, dadp, sub: Subspace, s: Reduced2x2, convention="derivation"):
    """dg/dp for complex data; conjugation placement per the convention."""
    if convention == "derivation":
        return _adjoint_derivation(op, dadp, sub, s)
    if convention == "listing":
        return _adjoint_listing_complex(op, dadp, sub, s)
    raise ValueError(f"unknown convention {convention!r}")


def _adjoint_setup(op, sub, s):
    u1 = np.asarray(sub.u1, dtype=complex)
    u2 = np.asarray(sub.u2, dtype=complex)
    y1 = np.asarray(_left_eigvec(op, s.s11, seed=5), dtype=complex)
    y2 = np.asarray(_left_eigvec(op, s.s22, seed=7), dtype=complex)
    # right near-null direction at s22, reconstructed from the subspace data
    x2v = s.s12 * u1 + (s.s22 - s.s11) * u2
    nx2 = np.linalg.norm(x2v)
    x2v = u2 if nx2 < 1e-300 else x2v / nx2
    return u1, u2, y1, y2, x2v


def _finish_state(dadp, u1, u2, lam1, lam2, sig11, sig12, sig22, h, convention):
    dgdp = -(lam1.conj() @ dadp.apply(u1)) - (lam2.conj() @ dadp.apply(u2))
    sigma21 = np.conj(h[1, 0]) + u2.conj() @ lam1  # vanishes for the exact solution
    state = AdjointState(
        lambda1=lam1, lambda2=lam2,
        sigma11=complex(sig11), sigma12=complex(sig12),
        sigma21=complex(sigma21), sigma22=complex(sig22),
        h=h, convention=convention,
    )
    return complex(dgdp), state


def _adjoint_derivation(op, dadp, sub, s):
    """Re-derived stationarity equations; exact for real data and
    conjugation-corrected for complex data."""
    u1, u2, y1, y2, x2v = _adjoint_setup(op, sub, s)
    h = dg_dS(s)
    h11, h12, h21, h22 = h[0, 0], h[0, 1], h[1, 0], h[1, 1]
    s11, s12, s22 = s.s11, s.s12, s.s22
    sig11 = -s12 * h12 / 2
    sig22 = s12 * h12 / 2
    sig12 = (s11 - s22) * h12
    rhs2 = -np.conj(sig12) * u1 - 2 * np.conj(sig22) * u2
    lam2 = _solve_shifted_adjoint_bordered(op, s22, x2v, y2, rhs2)
    lam2, _ = _pin(lam2, y2, u2, -np.conj(h22))
    rhs1 = np.conj(s12) * lam2 - 2 * np.conj(sig11) * u1 - np.conj(sig12) * u2
    lam1 = _solve_shifted_adjoint_bordered(op, s11, u1, y1, rhs1)
    # u1* y1 degenerates at an exact double point; the u2-based pin selects
    # the same solution (the gauge multiplier vanishes) and stays conditioned
    if abs(u1.conj() @ y1) > 1e-8:
        lam1, _ = _pin(lam1, y1, u1, -np.conj(h11))
    else:
        lam1, _ = _pin(lam1, y1, u2, -np.conj(h21))
    return _finish_state(dadp, u1, u2, lam1, lam2, sig11, sig12, sig22, h, "derivation")


def _adjoint_listing_real(op, dadp, sub, s):
    """The published real listing, verbatim, kept behind the flag."""
    u1, u2, y1, y2, x2v = _adjoint_setup(op, sub, s)
    h = dg_dS(s)
    h12, h21, h22 = h[0, 1], h[1, 0], h[1, 1]
    s11, s12, s22 = s.s11, s.s12, s.s22
    sig12 = -(s11 - s22) * h12
    sig22 = -s12 * h12
    rhs2 = sig12 * u1 - sig22 * u2
    try:
        lam2 = _solve_shifted_adjoint_plain(op, s22, rhs2)
    except (SingularFactorizationError, NonConvergenceError):
        lam2 = _solve_shifted_adjoint_bordered(op, s22, x2v, y2, rhs2)
    lam2, _ = _pin(lam2, y2, u2, -np.conj(h22))
    rhs1 = s12 * lam2 - sig22 * u1 - sig12 * u2
    try:
        lam1 = _solve_shifted_adjoint_plain(op, s11, rhs1)
    except (SingularFactorizationError, NonConvergenceError):
        lam1 = _solve_shifted_adjoint_bordered(op, s11, u1, y1, rhs1)
    lam1, _ = _pin(lam1, y1, u2, -np.conj(h21))
    return _finish_state(dadp, u1, u2, lam1, lam2, 0.0, sig12, sig22, h, "listing")


def _adjoint_listing_complex(op, dadp, sub, s):
    """The published complex listing with its staged real-scalar systems.

    The one unbalanced expression for b-bar is read as
    s12*(h11 - h22) - conj(a), the only grouping with consistent units.
    """
    u1, u2, y1, y2, x2v = _adjoint_setup(op, sub, s)
    h = dg_dS(s)
    h11, h12, h21, h22 = h[0, 0], h[0, 1], h[1, 0], h[1, 1]
    s11, s12, s22 = s.s11, s.s12, s.s22
    # stage 1: 2*alpha1 - s12*beta4*i = -s12*h12 with alpha1, beta4 real
    r1 = -s12 * h12
    p_re, q_im = s12.real, s12.imag
    beta4 = 0.0 if abs(p_re) < 1e-30 else -r1.imag / p_re
    alpha1 = (r1.real - q_im * beta4) / 2
    # stage 2 and 3: the scalar couplings of the lam1 right-hand side
    a_val = -np.conj(s11 - s22) * (-h12 + 1j * beta4)
    b_val = np.conj(s12 * (h11 - h22) - np.conj(a_val))
    # stage 4: 2*alpha4 - beta3*i = s12*h12 + i*beta4
    r4 = s12 * h12 + 1j * beta4
    alpha4 = r4.real / 2
    beta3 = -r4.imag
    rhs2 = -a_val * u1 - (2 * alpha4 + 1j * beta3) * u2
    try:
        lam2 = _solve_shifted_adjoint_plain(op, np.conj(s22), rhs2)
    except (SingularFactorizationError, NonConvergenceError):
        lam2 = _solve_shifted_adjoint_bordered(op, np.conj(s22), x2v, y2, rhs2)
    lam2, _ = _pin(lam2, y2, u2, -h22)
    rhs1 = s12 * lam2 - 2 * alpha1 * u1 - np.conj(a_val + b_val) * u2
    try:
        lam1 = _solve_shifted_adjoint_plain(op, np.conj(s11), rhs1)
    except (SingularFactorizationError, NonConvergenceError):
        lam1 = _solve_shifted_adjoint_bordered(op, np.conj(s11), u1, y1, rhs1)
    lam1, _ = _pin(lam1, y1, u2, -h21)
    return _finish_state(dadp, u1, u2, lam1, lam2, alpha1, a_val,
                         2 * alpha4 + 1j * beta3, h, "listing")


def default_subspace_driver(op):
    if op.kind in ("dense", "sparse-csr", "sparse-plus-low-rank"):
        return find_subspace_sparse_direct
    return find_subspace_matrix_free


def solve_chain(op, mu, cfg: SubspaceConfig | None = None, method="auto",
                normalization="unit-orthogonal"):
    """First-order pipeline: subspace, 2x2 reduction, normalized chain."""
    cfg = cfg or SubspaceConfig()
    if method == "auto":
        driver = default_subspace_driver(op)
    elif method == "matrix-free":
        driver = find_subspace_matrix_free
    elif method == "direct":
        driver = find_subspace_sparse_direct
    else:
        raise ValueError(f"unknown method {method!r}")
    sub = driver(op, mu, cfg)
    s = reduce_to_2x2(op, sub)
    ch = chain_from_reduced(s, sub, normalization=normalization)
    r_x, r_j = chain_residual(op, ch)
    ch.residuals = {"x": r_x, "j": r_j, "subspace_u1": sub.residuals.get("u1"),
                    "subspace_u2": sub.residuals.get("u2")}
    return ch, sub, s


def dg_dp_finite_difference(op, dadp, mu, h=1e-6, cfg: SubspaceConfig | None = None):
    """Central difference of g along dA/dp, recomputing the subspace at
    p = +h and p = -h from the same seed."""
    if h <= 0:
        raise ValueError("step must be positive")
    cfg = cfg or SubspaceConfig(tol=1e-12, refine_tol=1e-12)
    vals = []
    for signed in (h, -h):
        shifted_op = add_scaled(op, dadp, signed)
        driver = default_subspace_driver(shifted_op)
        sub = driver(shifted_op, mu, cfg)
        vals.append(g_of_S(reduce_to_2x2(shifted_op, sub)))
    return (vals[0] - vals[1]) / (2 * h)


def validate_dgdp(dgdp, dgdp_fd, scale) -> bool:
    return abs(dgdp - dgdp_fd) <= ORACLE_RTOL * max(abs(dgdp_fd), ORACLE_FLOOR * scale)


def second_order_chain(op, dadp, mu, cfg: SubspaceConfig | None = None,
                       convention="derivation", validate=True, fd_step=1e-6,
                       normalization="unit-orthogonal"):
    """Newton step in p toward the defective set, then rerun the pipeline.

    Returns the improved chain and the step record.  The adjoint derivative
    is checked against the finite-difference oracle before first use unless
    ``validate`` is switched off.
    """
    cfg = cfg or SubspaceConfig()
    first, sub, s = solve_chain(op, mu, cfg)
    g0 = g_of_S(s)
    scale = max(1.0, op.norm_est()) ** 2
    if op.is_complex or dadp.is_complex:
        dgdp, state = dg_dp_adjoint_complex(op, dadp, sub, s, convention=convention)
    else:
        dgdp, state = dg_dp_adjoint_real(op, dadp, sub, s, convention=convention)
    validated = False
    if validate:
        fd = dg_dp_finite_difference(op, dadp, mu, h=fd_step,
                                     cfg=SubspaceConfig(tol=min(cfg.tol, 1e-12),
                                                        refine_tol=min(cfg.refine_tol, 1e-12),
                                                        seed=cfg.seed))
        validated = validate_dgdp(dgdp, fd, scale)
        if not validated:
            raise AdjointValidationError(
                f"adjoint dg/dp {dgdp} disagrees with finite difference {fd}",
                dgdp_adjoint=dgdp, dgdp_fd=fd,
            )
    if dadp.norm_est() == 0.0 or abs(g0) <= 1e-14 * scale:
        p = 0.0 + 0.0j
    elif abs(dgdp) <= 1e-14 * scale:
        raise NewtonBreakdownError(
            f"|dg/dp|={abs(dgdp):.3e} too small for a Newton step (scale {scale:.3e})"
        )
    else:
        p = -complex(g0) / complex(dgdp)
    step = NewtonStep(g0=complex(g0), dgdp=complex(dgdp), p=complex(p), validated=validated)
    if p == 0:
        return first, step
    corrected = add_scaled(op, dadp, p)
    mu2 = (s.s11 + s.s22) / 2
    improved, _, _ = solve_chain(corrected, mu2, cfg, normalization=normalization)
    return improved, step


def newton_step_json(step: NewtonStep) -> dict:
    return {
        "g0": [step.g0.real, step.g0.imag],
        "dgdp": [step.dgdp.real, step.dgdp.imag],
        "p": [step.p.real, step.p.imag],
        "validated": bool(step.validated),
    }
