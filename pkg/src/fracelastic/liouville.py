"""Liouville reduction of the fractional elasticity operator.

With ``Gamma = (mu, k)`` built from the square-root Lame parameters, the
substitution ``w = Gamma (x) u`` turns the elasticity equation into the
matrix Schroedinger-type problem

    (-Delta)^{s-1} D w - w . Q = G,

whose only coefficient is the matrix potential ``Q``.  Pair fields carry
the pair index on axis ``n`` and the vector index on axis ``n + 1``;
matrix fields put the two matrix indices last.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fracops as fo
from .elastic import DnMap, ElasticAssembly, _cg, assemble_elastic
from .gridfield import GridSpec, LameField, l2_inner


@dataclass
class GammaField:
    """``Gamma = (mu, k)`` of an admissible Lame field."""

    lame: LameField

    def __post_init__(self):
        self.gamma = self.lame.gamma
        self.gamma0 = self.lame.gamma0
        self.norm2 = np.sum(self.gamma ** 2, axis=-1)
        self.unit = self.gamma / self.norm2[..., None]

    @property
    def grid(self) -> GridSpec:
        return self.lame.grid

    @property
    def n(self) -> int:
        return self.lame.n

    @property
    def perturbation(self) -> np.ndarray:
        """``Gamma - gamma``, compactly supported."""
        return self.gamma - self.gamma0


def gauge_ratio(g1: GammaField, g2: GammaField) -> np.ndarray:
    """Scalar ``rho`` with ``Gamma_1 = rho Gamma_2``, as a least-squares ratio per node."""
    return np.sum(g1.gamma * g2.gamma, axis=-1) / g2.norm2


@dataclass
class QPotential:
    """Matrix potential on the grid, shape ``grid.shape + (n, n)``."""

    values: np.ndarray
    s: float

    def asymmetry(self) -> float:
        Q = self.values
        nrm = np.linalg.norm(Q)
        return float(np.linalg.norm(Q - np.swapaxes(Q, -1, -2)) / nrm) if nrm > 0 else 0.0


def forward_transform(u, gamma: GammaField) -> np.ndarray:
    """``w = Gamma (x) u``."""
    u = np.asarray(u, dtype=float)
    return gamma.gamma[..., :, None] * u[..., None, :]


def back_transform(w, gamma: GammaField) -> np.ndarray:
    """``u = Gamma . w / |Gamma|^2``."""
    return np.einsum("...r,...ri->...i", gamma.unit, np.asarray(w, dtype=float))


def _matrix_frac_d(plan: fo.FourierPlan, W, s: float) -> np.ndarray:
    """Columnwise ``(-Delta)^{s-1} D`` on a pair-of-matrix field ``(..., 2, n, n)``."""
    return np.stack([fo.frac_d_op(plan, W[..., j], s) for j in range(W.shape[-1])], axis=-1)


def q_potential(gamma: GammaField, plan: fo.FourierPlan, s: float) -> QPotential:
    """``Q = Gamma / |Gamma|^2 . (-Delta)^{s-1} D (Gamma (x) Id)``.

    Only the compactly supported part ``Gamma - gamma`` enters; the
    constant part is annihilated by the homogeneous multiplier.
    """
    n = gamma.n
    W = gamma.perturbation[..., :, None, None] * np.eye(n)
    X = _matrix_frac_d(plan, W, s)
    Q = np.einsum("...r,...rij->...ij", gamma.unit, X)
    return QPotential(Q, s)


def q_potential_explicit(gamma: GammaField, plan: fo.FourierPlan, s: float) -> QPotential:
    """Same potential written through ``(-Delta)^s`` and the Riesz Hessian.

    ``(-Delta)^{s-1} grad grad`` equals ``-riesz_hessian``.
    """
    n = gamma.n
    d1, d2, d3, d4 = fo.coefficients(n, s)
    I = np.eye(n)
    out = np.zeros(gamma.grid.shape + (n, n))
    for r, (d, dp) in enumerate(((d1, d2), (d3, d4))):
        pert = gamma.perturbation[..., r]
        lap = fo.frac_laplacian(plan, pert, s)
        hess = fo.riesz_hessian(plan, pert, s)
        out += gamma.gamma[..., r, None, None] * (d * lap[..., None, None] * I + dp * hess)
    return QPotential(out / gamma.norm2[..., None, None], s)


def apply_q(w, Q: QPotential) -> np.ndarray:
    """``(w . Q)_{r j} = sum_i w_{r i} Q_{i j}``."""
    return np.einsum("...ri,...ij->...rj", np.asarray(w, dtype=float), Q.values)


def transformed_operator(w, Q: QPotential, plan: fo.FourierPlan, s: float) -> np.ndarray:
    """``(-Delta)^{s-1} D w - w . Q`` evaluated spectrally."""
    return fo.frac_d_op(plan, w, s) - apply_q(w, Q)


def reduced_elasticity(u, gamma: GammaField, Q: QPotential, plan: fo.FourierPlan,
                       s: float) -> np.ndarray:
    """``Gamma . ((-Delta)^{s-1} D (Gamma (x) u) - (Gamma (x) u) . Q)``.

    Equals ``(n/2 + s)`` times the elasticity operator applied to ``u``.
    """
    X = transformed_operator(forward_transform(u, gamma), Q, plan, s)
    return np.einsum("...r,...ri->...i", gamma.gamma, X)


def bq_form(w1, w2, Q: QPotential, plan: fo.FourierPlan, s: float) -> float:
    """``B_Q(w1, w2) = <(-Delta)^{s-1} D w1, w2> - <w1 . Q, w2>`` on the grid."""
    grid = plan.grid
    return l2_inner(grid, transformed_operator(w1, Q, plan, s), w2)


def bq_star(w1, w2, Q: QPotential, plan: fo.FourierPlan, s: float) -> float:
    """Adjoint form: ``B*_Q(w1, w2) = B_Q(w2, w1)``."""
    return bq_form(w2, w1, Q, plan, s)


@dataclass
class TransformedProblem:
    Q: QPotential
    gamma: GammaField
    s: float
    g: np.ndarray
    G: np.ndarray | None = None


def solve_transformed(problem: TransformedProblem, asm: ElasticAssembly | None = None,
                      rtol: float = 1e-10, maxiter: int = 20000, return_info: bool = False):
    """Solve the transformed problem on the cone ``w = Gamma (x) v``.

    The unknown is the vector field ``v`` with ``v = f`` outside omega.
    On that cone the discrete form is ``(n/2 + s)`` times the quadrature
    assembly, and the right-hand side pairs ``G`` with ``Gamma (x) phi``,
    i.e. ``<Gamma . G, phi>``.
    """
    gamma, s = problem.gamma, problem.s
    n = gamma.n
    asm = asm or assemble_elastic(gamma.lame, s)
    grid, omega = asm.grid, asm.masks.omega
    f = back_transform(problem.g, gamma)
    f[omega] = 0.0
    if problem.g[omega].any():
        raise ValueError("exterior pair datum must vanish in omega")
    scale = n / 2 + s
    rhs_full = -scale * asm.apply(f)
    if problem.G is not None:
        G = np.asarray(problem.G, dtype=float)
        if G[~omega].any():
            raise ValueError("interior source must be supported in omega")
        rhs_full += grid.cell_volume * np.einsum("...r,...ri->...i", gamma.gamma, G)
    rhs = rhs_full[omega].ravel()
    diag = scale * asm.diagonal()[omega].ravel()

    def matvec(x):
        full = np.zeros(grid.shape + (n,))
        full[omega] = x.reshape(-1, n)
        return scale * asm.apply(full)[omega].ravel()

    x, info = _cg(matvec, rhs, diag, rtol, maxiter)
    v = f.copy()
    v[omega] = x.reshape(-1, n)
    w = forward_transform(v, gamma)
    return (w, info) if return_info else w


@dataclass
class ReductionReport:
    residual: float
    residual_l2: float
    c_star: float
    pairs: int
    spectral: np.ndarray = field(repr=False, default=None)
    quadrature: np.ndarray = field(repr=False, default=None)


def reduction_residual(u, lame: LameField, plan: fo.FourierPlan, s: float, tests=None,
                       asm: ElasticAssembly | None = None, c_star: float | None = None
                       ) -> ReductionReport:
    """Weak mismatch between the reduced spectral path and the quadrature assembly.

    For every field ``u_a`` and test field ``phi_b`` compares
    ``<Gamma . (...), phi_b> / (n/2 + s)`` with ``c* Q_asm(u_a, phi_b)``.
    ``c*`` is fitted by least squares unless given.  The residual is the
    largest mismatch normalised by ``||u||_{H^s} ||phi||_{H^s}``; the
    L2-normalised variant is reported alongside.
    """
    us = [u] if np.ndim(u) == lame.n + 1 else list(u)
    tests = us if tests is None else ([tests] if np.ndim(tests) == lame.n + 1 else list(tests))
    gamma = GammaField(lame)
    Q = q_potential(gamma, plan, s)
    asm = asm or assemble_elastic(lame, s)
    scale = lame.n / 2 + s
    spec = np.zeros((len(us), len(tests)))
    quad = np.zeros_like(spec)
    for a, ua in enumerate(us):
        R = reduced_elasticity(ua, gamma, Q, plan, s) / scale
        Au = asm.apply(ua)
        for b, phi in enumerate(tests):
            spec[a, b] = l2_inner(lame.grid, R, phi)
            quad[a, b] = float(np.sum(phi * Au))
    if not np.any(spec):
        return ReductionReport(0.0, 0.0, c_star or 1.0, spec.size, spec, quad)
    if c_star is None:
        # Q_asm ~ c* <reduced, phi>
        c_star = float(np.sum(spec * quad) / np.sum(spec * spec))
    mism = np.abs(c_star * spec - quad)
    hs_u = np.array([fo.h_norm(plan, x, s) for x in us])
    hs_t = np.array([fo.h_norm(plan, x, s) for x in tests])
    l2_u = np.array([np.sqrt(l2_inner(lame.grid, x, x)) for x in us])
    l2_t = np.array([np.sqrt(l2_inner(lame.grid, x, x)) for x in tests])
    res = float(np.max(mism / np.outer(hs_u, hs_t)))
    res2 = float(np.max(mism / np.outer(l2_u, l2_t)))
    return ReductionReport(res, res2, c_star, spec.size, spec, quad)


def dn_map_q(Q: QPotential, gamma: GammaField, basis1, basis2, plan: fo.FourierPlan,
             asm: ElasticAssembly | None = None, rtol: float = 1e-10,
             return_solutions: bool = False):
    """Transformed DN matrix ``[j, i] = B_Q(P_Q(Gamma (x) f_i), gamma (x) g_j)``.

    Solutions come from :func:`solve_transformed`; the pairing is the
    spectral ``B_Q``.
    """
    s = Q.s
    asm = asm or assemble_elastic(gamma.lame, s)
    cols, infos, sols = [], [], []
    tests = [forward_transform(g, gamma) for g in basis2]
    for f in basis1:
        prob = TransformedProblem(Q, gamma, s, forward_transform(f, gamma))
        w, info = solve_transformed(prob, asm, rtol=rtol, return_info=True)
        X = transformed_operator(w, Q, plan, s)
        cols.append([l2_inner(gamma.grid, X, t) for t in tests])
        infos.append(info)
        if return_solutions:
            sols.append(w)
    dn = DnMap(np.array(cols).T, list(basis1), list(basis2), "B_Q", infos,
               {"s": s, "grid": gamma.grid.to_dict(), "rtol": rtol})
    return (dn, sols) if return_solutions else dn
