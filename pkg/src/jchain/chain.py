"""Jordan chain construction from a converged invariant-subspace basis.

The operator is projected onto the basis, the projection is replaced by the
nearest defective 2x2 surrogate (only the lower-left entry moves), and the
surrogate's exact chain is lifted back through the basis and normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SemisimpleDegeneracyError
from .linops import LinearOperator
from .subspace import Subspace

SEMISIMPLE_FACTOR = 1e-6


@dataclass(frozen=True)
class Reduced2x2:
    """Projection U* A U of the operator onto the subspace basis."""

    s11: complex
    s12: complex
    s21: complex
    s22: complex

    def as_array(self) -> np.ndarray:
        return np.array([[self.s11, self.s12], [self.s21, self.s22]])

    @classmethod
    def from_array(cls, arr) -> "Reduced2x2":
        arr = np.asarray(arr)
        return cls(complex(arr[0, 0]), complex(arr[0, 1]),
                   complex(arr[1, 0]), complex(arr[1, 1]))

    @property
    def scale(self) -> float:
        return max(abs(self.s11), abs(self.s12), abs(self.s21), abs(self.s22))


@dataclass(frozen=True)
class DefectiveParams:
    """(alpha, beta, lam) of the general defective 2x2 form
    [[lam + alpha*beta, alpha^2], [-beta^2, lam - alpha*beta]]."""

    alpha: complex
    beta: complex
    lam: complex

    def reconstruct(self) -> np.ndarray:
        a, b, l = self.alpha, self.beta, self.lam
        return np.array([[l + a * b, a * a], [-b * b, l - a * b]])


@dataclass
class JordanChain:
    lam: complex
    x: np.ndarray
    j: np.ndarray
    gamma: complex | None = None
    normalization: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)


def reduce_to_2x2(op: LinearOperator, sub: Subspace) -> Reduced2x2:
    """Project the operator: s_ij = u_i* A u_j, using exactly two products."""
    w1 = op.apply(sub.u1)
    w2 = op.apply(sub.u2)
    return Reduced2x2(
        s11=complex(sub.u1.conj() @ w1),
        s12=complex(sub.u1.conj() @ w2),
        s21=complex(sub.u2.conj() @ w1),
        s22=complex(sub.u2.conj() @ w2),
    )


def _require_jordan_coupling(s: Reduced2x2) -> None:
    gap = abs(s.s11 - s.s22)
    if abs(s.s12) <= SEMISIMPLE_FACTOR * max(gap, abs(s.s11), abs(s.s22)):
        raise SemisimpleDegeneracyError(
            "degenerate pair appears semisimple, not a 2x2 Jordan block "
            f"(|s12|={abs(s.s12):.3e}, |s11-s22|={gap:.3e})"
        )


def nearest_defective_2x2(s: Reduced2x2) -> Reduced2x2:
    """Defective surrogate: same matrix except the lower-left entry.

    Requires genuine off-diagonal coupling; a near-diagonal projection means
    the degeneracy is semisimple and no meaningful Jordan vector exists.
    """
    _require_jordan_coupling(s)
    return Reduced2x2(
        s11=s.s11,
        s12=s.s12,
        s21=-((s.s11 - s.s22) ** 2) / (4 * s.s12),
        s22=s.s22,
    )


def normalize_chain(x_raw, j_raw):
    """Rescale a chain pair to ||x|| = 1 and x* j = 0.

    The transformation x = x_raw/c, j = (j_raw + a*x_raw)/c preserves the
    chain relation A j = lam j + x whenever the raw pair satisfied it.
    """
    x_raw = np.asarray(x_raw)
    j_raw = np.asarray(j_raw)
    c = np.linalg.norm(x_raw)
    if c == 0:
        raise ValueError("cannot normalize a zero eigenvector")
    a = -(x_raw.conj() @ j_raw) / (x_raw.conj() @ x_raw)
    return x_raw / c, (j_raw + a * x_raw) / c


def normalize_chain_bilinear(x_raw, j_raw):
    """Alternative gauge with the unconjugated bilinear form:
    x^T j = 1 and j^T j = 0.

    Both conditions are quadratic in the remaining chain freedom
    (x, j) -> (c x, c (j + a x)); the self-orthogonality condition picks a,
    the pairing picks c.  Only meaningful for complex data, where a nonzero
    vector can be isotropic.
    """
    x_raw = np.asarray(x_raw, dtype=complex)
    j_raw = np.asarray(j_raw, dtype=complex)
    xx = x_raw @ x_raw
    if abs(xx) < 1e-300:
        raise ValueError("eigenvector is isotropic under the bilinear form")
    xj = x_raw @ j_raw
    jj = j_raw @ j_raw
    disc = np.sqrt(xj * xj - xx * jj)
    a = (-xj + disc) / xx
    j_shift = j_raw + a * x_raw
    pairing = x_raw @ j_shift
    if abs(pairing) < 1e-300:
        a = (-xj - disc) / xx
        j_shift = j_raw + a * x_raw
        pairing = x_raw @ j_shift
        if abs(pairing) < 1e-300:
            raise ValueError("chain pair is degenerate under the bilinear form")
    c = 1.0 / np.sqrt(pairing)
    return c * x_raw, c * j_shift


def chain_from_reduced(s: Reduced2x2, sub: Subspace, normalization="unit-orthogonal") -> JordanChain:
    """Lift the surrogate's exact chain through the basis and normalize.

    The raw pair x = u1 + gamma*u2, j = u2/s12 is the exact chain of the
    defective surrogate expressed in the basis coordinates.
    """
    _require_jordan_coupling(s)
    lam = (s.s11 + s.s22) / 2
    gamma = (s.s22 - s.s11) / (2 * s.s12)
    x_raw = sub.u1 + gamma * sub.u2
    j_raw = sub.u2 / s.s12
    if normalization == "unit-orthogonal":
        x, j = normalize_chain(x_raw, j_raw)
    elif normalization == "unit-bilinear":
        x, j = normalize_chain_bilinear(x_raw, j_raw)
    else:
        raise ValueError(f"unknown normalization mode {normalization!r}")
    return JordanChain(
        lam=complex(lam),
        x=x,
        j=j,
        gamma=complex(gamma),
        normalization={"mode": normalization},
    )


def defective_params(s: Reduced2x2, tol=1e-8) -> DefectiveParams:
    """Extract (alpha, beta, lam) of the general defective form.

    beta's sign is pinned by requiring alpha*beta = s11 - lam; the pair
    (alpha, beta) is otherwise only defined up to a simultaneous sign flip.
    """
    lam = (s.s11 + s.s22) / 2
    gval = ((s.s11 - s.s22) / 2) ** 2 + s.s12 * s.s21
    scale = max(s.scale, 1e-300) ** 2
    if abs(gval) > tol * scale:
        raise ValueError(f"matrix is not defective: |g|={abs(gval):.3e} vs scale {scale:.3e}")
    alpha = np.sqrt(complex(s.s12))
    beta = np.sqrt(complex(-s.s21))
    target = s.s11 - lam
    if abs(alpha * beta - target) > abs(-alpha * beta - target):
        beta = -beta
    return DefectiveParams(alpha=complex(alpha), beta=complex(beta), lam=complex(lam))


def chain_of_params(p: DefectiveParams):
    """Eigenvector and Jordan direction of the general defective form."""
    denom = abs(p.alpha) ** 2 + abs(p.beta) ** 2
    if denom == 0:
        raise ValueError("alpha and beta cannot both vanish")
    x = np.array([p.alpha, -p.beta]) / np.sqrt(denom)
    j = np.array([p.beta, p.alpha]) / denom
    return x, j


def chain_residual(op: LinearOperator, c: JordanChain):
    """(||A x - lam x||, ||A j - lam j - x||)."""
    r_x = np.linalg.norm(op.apply(c.x) - c.lam * c.x)
    r_j = np.linalg.norm(op.apply(c.j) - c.lam * c.j - c.x)
    return float(r_x), float(r_j)


def phase_align(x_ref, x, *others):
    """Rotate (x, others...) by the unit phase that best matches x to x_ref.

    The chain carries a global phase gauge; error metrics against a
    reference chain are computed after removing it.
    """
    overlap = np.asarray(x_ref).conj() @ np.asarray(x)
    if abs(overlap) == 0:
        return (x, *others) if others else x
    phase = overlap / abs(overlap)
    rotated = tuple(np.asarray(v) * phase.conjugate() for v in (x, *others))
    return rotated if others else rotated[0]


def chain_to_json_dict(c: JordanChain, x_path: str, j_path: str) -> dict:
    """JSON-ready summary; the vectors live in Matrix Market files."""
    out = {
        "lambda": [c.lam.real, c.lam.imag],
        "x": x_path,
        "j": j_path,
        "gamma": None if c.gamma is None else [c.gamma.real, c.gamma.imag],
        "residuals": c.residuals,
        "normalization": c.normalization,
    }
    return out
