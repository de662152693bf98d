"""Inverse-problem pipeline built on the Liouville reduction.

Covers the two-path Alessandrini identity, Runge control synthesis, a
probe-based recovery of the weighted potential difference, the gauge
step for the scalar factor ``r``, output least-squares reconstruction of
the shear modulus under a fixed Poisson ratio, and the 1D gauge demo.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, cg

from . import fracops as fo
from .elastic import ElasticAssembly, SolverError, assemble_elastic, dn_map, exterior_basis
from .gridfield import GridSpec, LameField, RegionMasks, l2_inner, smooth_bump
from .liouville import (GammaField, QPotential, TransformedProblem, apply_q,
                        back_transform, forward_transform, q_potential, solve_transformed)

log = logging.getLogger(__name__)


class GaugeError(ValueError):
    """Two Lame fields are not gauge-equivalent."""


class LineSearchError(RuntimeError):
    pass


def check_gauge(set1: LameField, set2: LameField, tol: float = 1e-10) -> None:
    """Require equal Poisson ratio everywhere and equal exterior constants."""
    if set1.grid != set2.grid:
        raise GaugeError("fields live on different grids")
    dnu = float(np.max(np.abs(set1.nu - set2.nu)))
    if dnu > tol:
        raise GaugeError(f"Poisson ratios differ by {dnu:.2e}")
    if abs(set1.L0 - set2.L0) > tol or abs(set1.M0 - set2.M0) > tol:
        raise GaugeError("exterior constants differ")


def _cone_pairing(grid: GridSpec, w1, dQ: np.ndarray, w2) -> float:
    return l2_inner(grid, apply_q(w1, QPotential(dQ, 0.0)), w2)


# Alessandrini identity ---------------------------------------------------------

@dataclass
class AlessandriniResult:
    lhs: float
    rhs: float
    residual: float


def alessandrini_check(set1: LameField, set2: LameField, f1, f2, s: float,
                       plan: fo.FourierPlan | None = None, c_star: float = 1.0,
                       asm1: ElasticAssembly | None = None,
                       asm2: ElasticAssembly | None = None,
                       rtol: float = 1e-10) -> AlessandriniResult:
    """Evaluate both sides of the DN-difference identity.

    ``lhs = c* (n/2 + s) <(Lambda_1 - Lambda_2) f1, f2>`` from the quadrature
    DN maps; ``rhs = -<w1 . (Q1 - Q2), w2>`` with ``w1 = P_{Q1}(gamma (x) f1)``
    and ``w2 = P*_{Q2}(gamma (x) f2)`` (the adjoint solution equals the
    primal one since the forms are symmetric).  The sign follows from
    ``B_Q = <(-Delta)^{s-1} D w1, w2> - <w1 . Q, w2>`` with the DN pairing
    ``<Lambda_Q g1, g2> = B_Q(P_Q g1, g2)``.
    """
    check_gauge(set1, set2)
    n = set1.n
    plan = plan or fo.FourierPlan(set1.grid)
    asm1 = asm1 or assemble_elastic(set1, s)
    asm2 = asm2 or assemble_elastic(set2, s)
    gm1, gm2 = GammaField(set1), GammaField(set2)
    Q1, Q2 = q_potential(gm1, plan, s), q_potential(gm2, plan, s)

    def dn_pair(asm):
        return dn_map(asm, [f1], [f2], rtol=rtol).matrix[0, 0]

    lhs = c_star * (n / 2 + s) * (dn_pair(asm1) - dn_pair(asm2))
    w1 = solve_transformed(TransformedProblem(Q1, gm1, s, forward_transform(f1, gm1)), asm1, rtol)
    w2 = solve_transformed(TransformedProblem(Q2, gm2, s, forward_transform(f2, gm2)), asm2, rtol)
    rhs = -_cone_pairing(set1.grid, w1, Q1.values - Q2.values, w2)
    res = abs(lhs - rhs) / (abs(lhs) + abs(rhs) + np.finfo(float).eps)
    return AlessandriniResult(float(lhs), float(rhs), float(res))


# Runge approximation -----------------------------------------------------------

@dataclass
class RungeProblem:
    target: np.ndarray
    control: np.ndarray
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass
class RungeResult:
    control: np.ndarray
    misfit: float
    relative_misfit: float
    iterations: int


def control_to_state(gamma: GammaField, Q: QPotential, basis, asm: ElasticAssembly | None = None,
                     rtol: float = 1e-11) -> np.ndarray:
    """Matrix of ``f -> (Gamma . P*_Q(Gamma (x) f) / |Gamma|^2 - f)|_omega`` over ``basis``.

    Rows run over omega nodes (node-major, component-minor).
    """
    asm = asm or assemble_elastic(gamma.lame, Q.s)
    omega = asm.masks.omega
    cols = []
    for f in basis:
        w = solve_transformed(TransformedProblem(Q, gamma, Q.s, forward_transform(f, gamma)),
                              asm, rtol)
        cols.append((back_transform(w, gamma) - f)[omega].ravel())
    return np.array(cols).T


def node_basis(grid: GridSpec, mask: np.ndarray) -> list[np.ndarray]:
    """Unit nodal fields on ``mask``, one per node and component."""
    n = grid.n
    out = []
    for node in np.argwhere(mask):
        for c in range(n):
            f = np.zeros(grid.shape + (n,))
            f[tuple(node) + (c,)] = 1.0
            out.append(f)
    return out


def _tikhonov_cg(S: np.ndarray, Gram: np.ndarray, b: np.ndarray, alpha: float, h_n: float,
                 rtol: float = 1e-13):
    """Minimise ``h_n |S a - b|^2 + alpha sigma^2 a^T Gram a`` by CG on the normal equations.

    ``sigma`` is the norm of ``S`` from the ``Gram`` metric to the L2(omega)
    metric, so ``alpha`` is dimensionless.
    """
    N = S.shape[1]
    StS = h_n * (S.T @ S)
    sigma2 = float(np.max(np.abs(scipy.linalg.eigh(StS, Gram, eigvals_only=True))))
    alpha = alpha * sigma2
    op = LinearOperator((N, N), matvec=lambda a: StS @ a + alpha * (Gram @ a), dtype=float)
    rhs = h_n * (S.T @ b)
    if not np.any(rhs):
        return np.zeros(N), 0
    it = [0]
    a, info = cg(op, rhs, rtol=rtol, atol=0.0, maxiter=20 * N,
                 callback=lambda _: it.__setitem__(0, it[0] + 1))
    if info != 0:
        raise SolverError(f"Runge normal equations: CG did not converge ({info})")
    return a, it[0]


def runge_control(problem: RungeProblem, Q: QPotential, gamma: GammaField, basis=None,
                  asm: ElasticAssembly | None = None, S: np.ndarray | None = None) -> RungeResult:
    """Tikhonov-regularised control on ``W`` whose solution residual matches ``target`` in omega.

    The penalty is ``alpha ||S||^2 ||f||^2_{L2(W)}``, with ``||S||`` the
    norm of the control-to-state map, which keeps ``alpha`` unit-free.

    ``basis`` defaults to unit nodal fields on the control mask.  ``S`` may
    carry a precomputed :func:`control_to_state` matrix for the same basis.
    """
    grid = gamma.grid
    asm = asm or assemble_elastic(gamma.lame, Q.s)
    omega = asm.masks.omega
    target = np.asarray(problem.target, dtype=float)
    if target[~omega].any():
        raise ValueError("Runge target must be supported in omega")
    basis = node_basis(grid, problem.control) if basis is None else basis
    if S is None:
        S = control_to_state(gamma, Q, basis, asm)
    B = np.stack([np.asarray(f).ravel() for f in basis], axis=1)
    Gram = B.T @ B * grid.cell_volume
    b = target[omega].ravel()
    a, its = _tikhonov_cg(S, Gram, b, problem.alpha, grid.cell_volume)
    f = (B @ a).reshape(grid.shape + (grid.n,))
    mis = float(np.sqrt(grid.cell_volume * np.sum((S @ a - b) ** 2)))
    tn = float(np.sqrt(grid.cell_volume * np.sum(b ** 2)))
    return RungeResult(f, mis, mis / tn if tn > 0 else 0.0, its)


# weighted potential difference ----------------------------------------------------

@dataclass
class DnData:
    """DN maps of one or two parameter sets on a shared geometry."""

    maps: list
    s: float
    grid: GridSpec
    noise: float = 0.0

    def __post_init__(self):
        ref = self.maps[0]
        for m in self.maps[1:]:
            if m.matrix.shape != ref.matrix.shape:
                raise ValueError("DN maps have mismatched bases")


def probe_centers(grid: GridSpec, masks: RegionMasks, count: int = 8, radius: float | None = None):
    """Uniform 1D lattice of probe centres whose bumps fit inside omega."""
    radius = radius or 8 * grid.h
    x = grid.axis[np.any(masks.omega, axis=tuple(range(1, grid.n)))] if grid.n > 1 else grid.axis[masks.omega]
    lo, hi = x.min() + radius, x.max() - radius
    return np.linspace(lo, hi, count), radius


@dataclass
class QDiffEstimate:
    centers: np.ndarray
    estimate: np.ndarray
    truth: np.ndarray | None = None
    misfits: list = field(default_factory=list)

    def correlation(self) -> float:
        a, b = self.estimate.ravel(), self.truth.ravel()
        return float(np.corrcoef(a, b)[0, 1])


def recover_weighted_qdiff(data: DnData, set1: LameField, set2: LameField, centers, radius: float,
                           alpha: float, basis1, basis2, plan: fo.FourierPlan | None = None
                           ) -> QDiffEstimate:
    """Probe estimate of ``((Gamma_1 . Gamma_2)(Q_1 - Q_2))_{ij}`` at probe centres (1D lattice).

    Runge controls for the probe ``chi e_i`` are synthesised on ``W1`` for
    set 1 and on ``W2`` for set 2 over the DN bases; the pairing itself uses
    only the DN matrices, ``-(n/2 + s) g2^T (Lambda_1 - Lambda_2) g1``.
    """
    grid, s, n = data.grid, data.s, data.grid.n
    plan = plan or fo.FourierPlan(grid)
    L1, L2 = data.maps
    dL = L1.matrix - L2.matrix
    gm1, gm2 = GammaField(set1), GammaField(set2)
    Q1, Q2 = q_potential(gm1, plan, s), q_potential(gm2, plan, s)
    asm1, asm2 = assemble_elastic(set1, s), assemble_elastic(set2, s)
    S1 = control_to_state(gm1, Q1, basis1, asm1)
    S2 = control_to_state(gm2, Q2, basis2, asm2)
    B1 = np.stack([np.asarray(f).ravel() for f in basis1], axis=1)
    B2 = np.stack([np.asarray(f).ravel() for f in basis2], axis=1)
    G1, G2 = B1.T @ B1 * grid.cell_volume, B2.T @ B2 * grid.cell_volume
    omega = asm1.masks.omega
    est = np.zeros((len(centers), n, n))
    truth = np.zeros_like(est)
    weight = np.einsum("...r,...r->...", gm1.gamma, gm2.gamma)
    wdiff = weight[..., None, None] * (Q1.values - Q2.values)
    misfits = []
    for c_idx, c in enumerate(centers):
        chi = smooth_bump(grid, np.full(n, c) if n == 1 else np.array([c] + [0.0] * (n - 1)), radius)
        chi = chi / np.sqrt(l2_inner(grid, chi, chi))
        mass = l2_inner(grid, chi, chi)
        coef1, coef2 = [], []
        for i in range(n):
            tgt = np.zeros(grid.shape + (n,))
            tgt[..., i] = chi
            a1, _ = _tikhonov_cg(S1, G1, tgt[omega].ravel(), alpha, grid.cell_volume)
            a2, _ = _tikhonov_cg(S2, G2, tgt[omega].ravel(), alpha, grid.cell_volume)
            misfits.append(float(np.linalg.norm(S1 @ a1 - tgt[omega].ravel())
                                 * np.sqrt(grid.cell_volume)))
            coef1.append(a1)
            coef2.append(a2)
        for i, j in itertools.product(range(n), range(n)):
            est[c_idx, i, j] = -(n / 2 + s) * float(coef2[j] @ dL @ coef1[i]) / mass
            truth[c_idx, i, j] = np.sum(chi ** 2 * wdiff[..., i, j]) * grid.cell_volume / mass
    return QDiffEstimate(np.asarray(centers), est, truth, misfits)


# gauge step ---------------------------------------------------------------------

def gauge_operator_matrix(Q: QPotential, gamma: GammaField, plan: fo.FourierPlan,
                          s: float) -> tuple[np.ndarray, np.ndarray]:
    """Linear map ``r~ -> Gamma . ((-Delta)^{s-1} D (Gamma (x) r~ Id) - (Gamma (x) r~ Id) . Q)``.

    Returns ``(A, b)`` with columns over omega nodes and rows over omega
    nodes times matrix entries, and ``b`` the same map applied to ``r = 1``.
    """
    grid, n = gamma.grid, gamma.n
    omega = gamma.lame.masks.omega

    def op(r):
        W = (gamma.gamma[..., :, None, None] * np.eye(n)) * r[..., None, None, None]
        X = np.stack([fo.frac_d_op(plan, W[..., j], s) for j in range(n)], axis=-1)
        X = X - np.einsum("...rij,...jk->...rik", W, Q.values)
        return np.einsum("...r,...rij->...ij", gamma.gamma, X)

    nodes = np.argwhere(omega)
    A = np.empty((nodes.shape[0] * n * n, nodes.shape[0]))
    for c, node in enumerate(nodes):
        e = np.zeros(grid.shape)
        e[tuple(node)] = 1.0
        A[:, c] = op(e)[omega].ravel()
    # only the perturbation of Gamma feels the multiplier; the constant part is annihilated
    Wc = (gamma.perturbation[..., :, None, None] * np.eye(n))
    X = np.stack([fo.frac_d_op(plan, Wc[..., j], s) for j in range(n)], axis=-1)
    X = X - np.einsum("...rij,...jk->...rik", gamma.gamma[..., :, None, None] * np.eye(n), Q.values)
    b = np.einsum("...r,...rij->...ij", gamma.gamma, X)[omega].ravel()
    return A, b


def gauge_solve(Q: QPotential, gamma: GammaField, s: float, plan: fo.FourierPlan | None = None
                ) -> np.ndarray:
    """Scalar field ``r`` with ``r = 1`` outside omega solving the matrix-valued gauge equation.

    Unknowns are ``r - 1`` on omega nodes, found by linear least squares
    over all matrix entries.
    """
    plan = plan or fo.FourierPlan(gamma.grid)
    A, b = gauge_operator_matrix(Q, gamma, plan, s)
    x, *_ = np.linalg.lstsq(A, -b, rcond=None)
    r = np.ones(gamma.grid.shape)
    r[gamma.lame.masks.omega] += x
    return r


# reconstruction -----------------------------------------------------------------

@dataclass
class ReconstructionConfig:
    nu: float
    s: float
    beta: float = 1e-8
    max_iter: int = 20
    gradient: str = "fd"
    fd_step: float = 1e-6
    tol: float = 1e-14
    floor: float = 0.1

    def __post_init__(self):
        if self.gradient not in ("fd", "adjoint"):
            raise ValueError("gradient must be 'fd' or 'adjoint'")


@dataclass
class ReconstructionResult:
    lame: LameField
    history: list
    rel_error_M: float | None = None
    rel_error_L: float | None = None
    rel_error_dM: float | None = None


def _field_from_m(template: LameField, m: np.ndarray, nu: float) -> LameField:
    M = np.full(template.grid.shape, template.M0)
    M[template.masks.omega] += m
    return template.with_M(M, nu=nu)


def _smooth_penalty(grid: GridSpec, omega: np.ndarray) -> np.ndarray:
    """Gram matrix of ``||m||^2 + ||grad m||^2`` for nodal ``m`` on omega (zero outside)."""
    idx = -np.ones(grid.shape, dtype=int)
    idx[omega] = np.arange(int(omega.sum()))
    k = int(omega.sum())
    rows = []
    for a in range(grid.n):
        for node in np.argwhere(omega):
            nb = node.copy()
            nb[a] += 1
            row = np.zeros(k)
            row[idx[tuple(node)]] = -1.0 / grid.h
            if nb[a] < grid.N and idx[tuple(nb)] >= 0:
                row[idx[tuple(nb)]] = 1.0 / grid.h
            rows.append(row)
    D = np.array(rows)
    return grid.cell_volume * (np.eye(k) + D.T @ D)


def forward_dn(lame: LameField, s: float, basis1, basis2, method: str = "direct") -> np.ndarray:
    return dn_map(assemble_elastic(lame, s), basis1, basis2, method=method).matrix


def _jacobian_adjoint(lame: LameField, s: float, basis1, basis2, nu: float, eps: float):
    """Columns ``d Lambda / d m_k`` from stored solutions only.

    ``Lambda_ji = Q(u_i, u_j)`` with ``u`` the Dirichlet solutions of both
    bases, so a parameter perturbation changes an entry by the perturbed
    form on the unperturbed solutions.  The form is evaluated by central
    differences of the assembly in the parameter (no new solves).
    """
    asm = assemble_elastic(lame, s)
    _, U1 = dn_map(asm, basis1, basis1[:1], return_solutions=True,
                   method="direct" if lame.n == 1 else "cg")
    _, U2 = dn_map(asm, basis2, basis2[:1], return_solutions=True,
                   method="direct" if lame.n == 1 else "cg")
    omega = lame.masks.omega
    m0 = lame.M[omega] - lame.M0
    cols = []
    for k in range(m0.size):
        vals = []
        for sign in (1.0, -1.0):
            m = m0.copy()
            m[k] += sign * eps
            a = assemble_elastic(_field_from_m(lame, m, nu), s)
            AU = [a.apply(u) for u in U1]
            vals.append(np.array([[float(np.sum(v * au)) for au in AU] for v in U2]))
        cols.append(((vals[0] - vals[1]) / (2 * eps)).ravel())
    return np.array(cols).T


def reconstruct_lame(obs: DnData, template: LameField, cfg: ReconstructionConfig, basis1, basis2,
                     truth: LameField | None = None) -> ReconstructionResult:
    """Gauss-Newton output least squares for nodal ``M`` in omega with ``L`` slaved through ``nu``.

    Objective ``||Lambda(M) - Lambda_obs||_F^2 / ||Lambda_obs||_F^2
    + beta ||M - M0||^2_smooth``.  Accepted steps strictly decrease the
    objective (backtracking line search); iterates are projected onto the
    positivity floor ``floor * M0``.
    """
    s, n = cfg.s, template.n
    data = obs.maps[0].matrix
    scale = float(np.sum(data ** 2))
    omega = template.masks.omega
    Pm = _smooth_penalty(template.grid, omega)
    m = np.zeros(int(omega.sum()))
    method = "direct" if n == 1 else "cg"

    def objective(mv):
        lf = _field_from_m(template, mv, cfg.nu)
        r = forward_dn(lf, s, basis1, basis2, method) - data
        return np.sum(r ** 2) / scale + cfg.beta * mv @ Pm @ mv, r, lf

    J_obj, r, lf = objective(m)
    hist = []

    def record(it, step):
        entry = {"iter": it, "objective": float(J_obj), "step": step}
        if truth is not None:
            entry.update(_errors(lf, truth))
        hist.append(entry)

    record(0, 0.0)
    # kept a hair above the admissibility floor so rounding in M0 + m cannot undercut it
    floor = cfg.floor * (1 + 1e-9) * template.M0 - template.M0
    for it in range(1, cfg.max_iter + 1):
        if J_obj <= cfg.tol:
            break
        if cfg.gradient == "fd":
            J = np.empty((r.size, m.size))
            for k in range(m.size):
                mp = m.copy()
                mp[k] += cfg.fd_step
                J[:, k] = ((forward_dn(_field_from_m(template, mp, cfg.nu), s, basis1, basis2, method)
                            - data).ravel() - r.ravel()) / cfg.fd_step
        else:
            J = _jacobian_adjoint(lf, s, basis1, basis2, cfg.nu, 1e-3 * template.M0)
        H = J.T @ J / scale + cfg.beta * Pm
        g = J.T @ r.ravel() / scale + cfg.beta * Pm @ m
        dm = -np.linalg.solve(H, g)
        step = 1.0
        while True:
            trial = np.maximum(m + step * dm, floor)
            if np.any(trial != m + step * dm):
                log.info("positivity projection active at iteration %d", it)
            J_new, r_new, lf_new = objective(trial)
            if J_new < J_obj:
                break
            step *= 0.5
            if step < 1e-6:
                if it == 1:
                    raise LineSearchError(f"no decrease at iteration {it}")
                step = 0.0
                break
        if step == 0.0:
            break
        m, J_obj, r, lf = trial, J_new, r_new, lf_new
        record(it, step)
        if step == 1.0 and np.linalg.norm(dm) <= 1e-10 * max(np.linalg.norm(m), 1e-300):
            break
    res = ReconstructionResult(lf, hist)
    if truth is not None:
        e = _errors(lf, truth)
        res.rel_error_M, res.rel_error_L, res.rel_error_dM = e["relM"], e["relL"], e["reldM"]
    return res


def _errors(est: LameField, truth: LameField) -> dict:
    om = truth.masks.omega

    def rel(a, b):
        d = np.linalg.norm(b[om])
        return float(np.linalg.norm(a[om] - b[om]) / d) if d > 0 else float(np.linalg.norm(a[om]))

    return {"relM": rel(est.M, truth.M), "relL": rel(est.L, truth.L),
            "reldM": rel(est.M - est.M0, truth.M - truth.M0)}


# 1D gauge demo ------------------------------------------------------------------

@dataclass
class GaugeTable:
    labels: list
    distances: np.ndarray
    rows: list


def _dn_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(a))


def gauge_demo_1d(K: float, Mlist, grid: GridSpec, masks: RegionMasks, s: float = 0.5,
                  K_contrast: float | None = None, k_bump: float = 0.3) -> GaugeTable:
    """Pairwise DN distances for 1D fields sharing ``K = L + 2M``.

    Each entry of ``Mlist`` gives a constant shear modulus; ``L = K(x) - 2M``
    with a common bulk-modulus bump inside omega.  With ``K_contrast`` an
    extra field of a different bulk class is added for comparison.
    """
    if grid.n != 1:
        raise ValueError("the gauge demo is one-dimensional")
    bump = k_bump * smooth_bump(grid, [0.0], 0.8)
    b1 = exterior_basis(grid, masks.w1, stride=4)
    b2 = exterior_basis(grid, masks.w2, stride=4)
    entries = [(f"K={K:g},M={M:g}", K, M) for M in Mlist]
    if K_contrast is not None and Mlist:
        entries.append((f"K={K_contrast:g},M={Mlist[0]:g}", K_contrast, Mlist[0]))
    maps = []
    for _, Kv, M in entries:
        Kx = Kv * (1.0 + bump)
        Mx = np.full(grid.shape, float(M))
        lf = LameField(grid, masks, Kv - 2 * M, float(M), Kx - 2 * Mx, Mx)
        maps.append(forward_dn(lf, s, b1, b2))
    labels = [e[0] for e in entries]
    D = np.zeros((len(maps), len(maps)))
    rows = []
    for i, j in itertools.combinations(range(len(maps)), 2):
        D[i, j] = D[j, i] = _dn_distance(maps[i], maps[j])
        rows.append({"a": labels[i], "b": labels[j], "same_class": entries[i][1] == entries[j][1],
                     "distance": D[i, j]})
    return GaugeTable(labels, D, rows)
