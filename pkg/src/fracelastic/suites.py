"""Measurement protocols shared by the ``verify`` command and the acceptance tests.

Every check returns a :class:`Check` holding the measured value, the
tolerance it is compared against, and free-form details.  Checks never
raise on a failed tolerance; they only report.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fracops as fo
from .elastic import assemble_elastic, dn_map, exterior_basis, solve_dirichlet
from .gridfield import Bump, GridSpec, default_grid, make_lame_field, make_masks, smooth_bump
from .inversion import (DnData, ReconstructionConfig, RungeProblem, alessandrini_check,
                        control_to_state, gauge_demo_1d, gauge_solve, node_basis,
                        reconstruct_lame, runge_control)
from .liouville import (GammaField, TransformedProblem, gauge_ratio, back_transform, dn_map_q,
                        forward_transform, q_potential, reduction_residual, solve_transformed)
from .tensorlab import (IsotropicParams, contract, isotropic_stiffness, lame_from_poisson,
                        product_identities, sqrt_lame, sqrt_stiffness, two_point_coeffs)


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: {self.value:.3e} (tol {self.tol:.1e})"

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "tol": self.tol, "passed": self.passed,
                "seconds": self.seconds, "details": _jsonable(self.details)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def _timed(fn):
    def wrap(*a, **k):
        t0 = time.perf_counter()
        c = fn(*a, **k)
        c.seconds = time.perf_counter() - t0
        return c
    wrap.__name__ = fn.__name__
    wrap.__doc__ = fn.__doc__
    return wrap


def random_params(rng: np.random.Generator, n: int) -> IsotropicParams:
    """Admissible ``(L, M)``: ``M`` in (0.1, 3), ``K`` in (0.1, 3)."""
    M = rng.uniform(0.1, 3.0)
    K = rng.uniform(0.1, 3.0)
    return IsotropicParams(n, K - 2 * M / n, M)


def random_field(grid: GridSpec, rng: np.random.Generator, comps: tuple = (), bumps: int = 3,
                 reach: float | None = None) -> np.ndarray:
    """Sum of random smooth bumps kept a quarter box away from the boundary."""
    reach = grid.half_width / 2 if reach is None else reach
    out = np.zeros(grid.shape + comps)
    for _ in range(bumps):
        r = rng.uniform(0.3, 0.6) * reach
        c = rng.uniform(-(reach - r), reach - r, size=grid.n)
        amp = rng.standard_normal(comps) if comps else rng.standard_normal()
        out += smooth_bump(grid, c, r)[(...,) + (None,) * len(comps)] * amp
    return out


# tensor algebra ---------------------------------------------------------------------

@_timed
def sqrt_roundtrip(rng: np.random.Generator, count: int = 100, fault: str | None = None) -> Check:
    """``C^{1/2} : C^{1/2} = C`` and the two-point trace-coefficient symmetry."""
    err = sym = 0.0
    for _ in range(count):
        for n in (1, 2, 3):
            p = random_params(rng, n)
            S = sqrt_stiffness(p)
            if fault == "negate_lambda":
                sp = sqrt_lame(p)
                d = np.eye(n)
                S = S - 2 * sp.lam * np.einsum("ij,lm->ijlm", d, d)
            err = max(err, float(np.max(np.abs(contract(S, S, 2) - isotropic_stiffness(p)))))
            q = random_params(rng, n)
            sx, sy = sqrt_lame(p), sqrt_lame(q)
            sym = max(sym, abs(two_point_coeffs(sx, sy, n)[0] - two_point_coeffs(sy, sx, n)[0]))
    ok = err <= 1e-12 and sym == 0.0
    return Check("sqrt_roundtrip", err, 1e-12, ok, {"trace_coeff_asymmetry": sym})


@_timed
def tensor_rules(rng: np.random.Generator, repeats: int = 20) -> Check:
    worst: dict = {}
    for _ in range(repeats):
        for k, v in product_identities(rng).items():
            worst[k] = max(worst.get(k, 0.0), v)
    alg = max(worst[k] for k in ("i", "ii", "iii", "iv"))
    fd = max(worst[k] for k in ("v", "vi", "vii"))
    return Check("tensor_rules", max(alg / 1e-12, fd / 1e-6), 1.0, alg <= 1e-12 and fd <= 1e-6,
                 {"items": worst, "algebraic": alg, "finite_difference": fd})


# operator identities -----------------------------------------------------------------

@_timed
def operator_identities(rng: np.random.Generator, n: int = 1, N: int = 1024,
                        s_list=(0.25, 0.5, 0.75), count: int = 20) -> Check:
    """Pure multiplier identities on the padded lattice, worst relative error."""
    grid = default_grid(n, N)
    plan = fo.FourierPlan(grid)
    worst = {"D_prime": 0.0, "frac_D": 0.0, "trace": 0.0, "semigroup": 0.0}

    def rel(a, b):
        return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))

    for s in s_list:
        for _ in range(count):
            w = plan.pad(random_field(grid, rng, (2, n)))
            u = plan.pad(random_field(grid, rng))
            prime = fo.prime_op(plan, w, s)
            worst["D_prime"] = max(worst["D_prime"], rel(fo.d_op(plan, w, s), -fo.laplacian(plan, prime)))
            worst["frac_D"] = max(worst["frac_D"], rel(fo.frac_d_op(plan, w, s),
                                                       fo.frac_laplacian(plan, prime, s)))
            H = fo.riesz_hessian(plan, u, s)
            worst["trace"] = max(worst["trace"], rel(np.einsum("...ii->...", H),
                                                     fo.frac_laplacian(plan, u, s)))
            s1 = rng.uniform(0.05, 1.0 - s)
            worst["semigroup"] = max(worst["semigroup"], rel(
                fo.frac_laplacian(plan, fo.frac_laplacian(plan, u, s1), s),
                fo.frac_laplacian(plan, u, s1 + s)))
    v = max(worst.values())
    return Check("operator_identities", v, 1e-10, v <= 1e-10, worst)


@_timed
def cross_laplacian(N_list=(256, 512, 1024, 2048), s: float = 0.5, at: int = 512) -> Check:
    """Spectral vs singular-quadrature fractional Laplacian on a bump (n=1)."""
    errs = []
    for N in N_list:
        grid = default_grid(1, N)
        plan = fo.FourierPlan(grid)
        u = smooth_bump(grid, [0.3], 1.5) + 0.5 * smooth_bump(grid, [-1.0], 0.8)
        a = fo.frac_laplacian(plan, u, s)
        b = fo.frac_laplacian_quadrature(grid, u, s)
        errs.append(float(np.sqrt(np.sum((a - b) ** 2) / np.sum(a ** 2))))
    e_at = errs[list(N_list).index(at)]
    mono = all(x > y for x, y in zip(errs, errs[1:]))
    return Check("cross_laplacian", e_at, 2e-2, e_at <= 2e-2 and mono,
                 {"N": list(N_list), "rel_l2": errs, "monotone": mono})


# reduction identity -------------------------------------------------------------------

def _default_lame(grid: GridSpec, masks=None):
    masks = masks or make_masks(grid)
    n = grid.n
    return make_lame_field(grid, masks, 1.0, 1.0, [Bump((0.2,) * n, 0.7, 0.4)],
                           [Bump((-0.1,) * n, 0.8, 0.6)])


def reduction_fields(grid: GridSpec):
    n = grid.n
    if n == 1:
        us = [smooth_bump(grid, [c], r)[..., None] for c, r in ((0.0, 0.9), (0.3, 0.6), (-2.5, 0.6))]
        ps = [smooth_bump(grid, [c], r)[..., None] for c, r in ((0.1, 0.8), (-0.4, 0.5), (2.5, 0.5))]
        return us, ps
    rng = np.random.default_rng(1)
    us = [smooth_bump(grid, c, 1.2)[..., None] * rng.standard_normal(2) for c in ([0, 0], [0.3, -0.2])]
    return us, us


@_timed
def reduction_sweep(n: int = 1, N_list=None, s: float = 0.5, tol: float = 1e-2,
                    at: int | None = None) -> Check:
    """Weak residual of the reduced formula vs the assembly with fitted ``c*``."""
    N_list = N_list or ((256, 512, 1024) if n == 1 else (64, 96, 128))
    res, res2, cs = [], [], []
    for N in N_list:
        grid = default_grid(n, N)
        plan = fo.FourierPlan(grid)
        lame = _default_lame(grid)
        us, ps = reduction_fields(grid)
        r = reduction_residual(us, lame, plan, s, tests=ps)
        res.append(r.residual)
        res2.append(r.residual_l2)
        cs.append(r.c_star)
    at = N_list[-1] if at is None else at
    val = res[list(N_list).index(at)]
    mono = all(x > y for x, y in zip(res, res[1:]))
    spread = max(cs) - min(cs)
    cref = min((0.5, 1.0, 2.0), key=lambda c: abs(c - np.mean(cs)))
    c_ok = spread <= 1e-3 and abs(np.mean(cs) - cref) <= 1e-3
    return Check(f"reduction_n{n}_s{s:g}", val, tol, val <= tol and mono and c_ok,
                 {"N": list(N_list), "residual_Hs": res, "residual_L2": res2, "c_star": cs,
                  "monotone": mono, "c_star_spread": spread, "c_star_nearest": cref})


# Q potential and Liouville equivalence ----------------------------------------------

@_timed
def q_identity(n: int = 1, N: int = 512, s: float = 0.5, count: int = 20, seed: int = 0,
               rtol: float = 1e-12) -> Check:
    """Nodewise Q-coefficient identity and the Liouville solution equivalence."""
    rng = np.random.default_rng(seed)
    grid = default_grid(n, N)
    masks = make_masks(grid)
    plan = fo.FourierPlan(grid)
    lame = _default_lame(grid, masks)
    gm = GammaField(lame)
    Q = q_potential(gm, plan, s)
    d1, d2, d3, d4 = fo.coefficients(n, s)
    nprime = 2 * (n - 2) / n
    mu, k = gm.gamma[..., 0], gm.gamma[..., 1]
    mut, kt = gm.perturbation[..., 0], gm.perturbation[..., 1]
    # (-Delta)^{s-1} grad grad = -riesz_hessian
    Hm, Hk = -fo.riesz_hessian(plan, mut, s), -fo.riesz_hessian(plan, kt, s)
    Lm, Lk = fo.frac_laplacian(plan, mut, s), fo.frac_laplacian(plan, kt, s)
    qerr = 0.0
    for _ in range(count):
        u = random_field(grid, rng, (n,), reach=1.0)
        lhs = -gm.norm2[..., None] * np.einsum("...i,...ij->...j", u, Q.values)
        rhs = (2 * s * np.einsum("...i,...ij->...j", u, nprime * mu[..., None, None] * Hm
                                 + n * k[..., None, None] * Hk)
               - u * ((2 * n + 4 * s + nprime) * mu * Lm + n * k * Lk)[..., None])
        qerr = max(qerr, float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs))))
    asm = assemble_elastic(lame, s)
    W = masks.w1 | masks.w2
    eq = 0.0
    for _ in range(count):
        f = np.zeros(grid.shape + (n,))
        f[W] = rng.standard_normal((int(W.sum()), n)) * rng.uniform(0, 1, (int(W.sum()), 1))
        u = solve_dirichlet(asm, f, rtol=rtol)
        w = solve_transformed(TransformedProblem(Q, gm, s, forward_transform(f, gm)), asm, rtol)
        v = back_transform(w, gm)
        eq = max(eq, float(np.linalg.norm(v - u) / np.linalg.norm(u)))
    ok = qerr <= 1e-10 and eq <= 1e-8
    return Check("q_identity", max(qerr / 1e-10, eq / 1e-8), 1.0, ok,
                 {"q_coefficient_rel": qerr, "liouville_equivalence_rel": eq,
                  "q_asymmetry": Q.asymmetry()})


# DN maps ------------------------------------------------------------------------------

def _dn_setup(n, N, s, radius, stride):
    grid = default_grid(n, N)
    masks = make_masks(grid)
    lame = _default_lame(grid, masks)
    plan = fo.FourierPlan(grid)
    b1 = exterior_basis(grid, masks.w1, stride=stride, kind="bump", radius=radius)
    b2 = exterior_basis(grid, masks.w2, stride=stride, kind="bump", radius=radius)
    return grid, masks, lame, plan, b1, b2


@_timed
def dn_structure(n: int = 1, N_list=(1024, 1536, 2048), s_list=(0.25, 0.5, 0.75),
                 radius: float = 0.25, stride: int = 4, rel_tol: float = 1e-6,
                 sym_stride: int = 1) -> Check:
    """CG residuals, DN self-adjointness and the relation ``c*(n/2+s) Lambda = Lambda_Q``."""
    cg_res = sym = rel = 0.0
    cs = {}
    rows = []
    for s in s_list:
        for N in N_list:
            grid, masks, lame, plan, b1, b2 = _dn_setup(n, N, s, radius, stride)
            asm = assemble_elastic(lame, s)
            L = dn_map(asm, b1, b2)
            gm = GammaField(lame)
            LQ = dn_map_q(q_potential(gm, plan, s), gm, b1, b2, plan, asm)
            sc = n / 2 + s
            c = float(np.sum(LQ.matrix * L.matrix) / np.sum(L.matrix ** 2) / sc)
            r = float(np.max(np.abs(LQ.matrix - c * sc * L.matrix)) / np.max(np.abs(LQ.matrix)))
            cs[(s, N)] = c
            rel = max(rel, r)
            cg_res = max(cg_res, L.max_residual, LQ.max_residual)
            rows.append({"s": s, "N": N, "c_star": c, "relation": r})
        node = exterior_basis(grid, masks.w1, stride=sym_stride)
        S = dn_map(asm, node, node)
        sym = max(sym, S.symmetry_defect())
        cg_res = max(cg_res, S.max_residual)
    cvals = np.array(list(cs.values()))
    spread = float(cvals.max() - cvals.min())
    ok = cg_res <= 1e-10 and sym <= 1e-8 and rel <= rel_tol and spread <= 1e-3
    return Check(f"dn_structure_n{n}", rel, rel_tol, ok,
                 {"cg_max_residual": cg_res, "symmetry": sym, "c_star_spread": spread,
                  "rows": rows})


# Alessandrini identity ------------------------------------------------------------------

def gauged_pair(grid: GridSpec, masks, rng: np.random.Generator, nu: float = 0.25):
    """Two fields with equal Poisson ratio and exterior constants, different M bumps."""
    n = grid.n
    base = make_lame_field(grid, masks, lame_from_nu(1.0, nu, n), 1.0)
    out = []
    for _ in range(2):
        c = rng.uniform(-0.3, 0.3, size=n)
        M = np.full(grid.shape, 1.0) + smooth_bump(grid, c, rng.uniform(0.4, 0.65),
                                                   rng.uniform(-0.4, 0.6))
        out.append(base.with_M(M, nu=nu))
    return out


def lame_from_nu(M: float, nu: float, n: int) -> float:
    return float(lame_from_poisson(M, nu, n))


@_timed
def alessandrini_sweep(n: int = 1, N_list=(256, 512, 1024), s: float = 0.5, pairs: int = 10,
                       seed: int = 3, at: int = 512, tol: float = 1e-2) -> Check:
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(pairs):
        specs.append((rng.integers(1 << 31), rng.integers(0, 3), rng.integers(0, 3)))
    table = {}
    for N in N_list:
        grid = default_grid(n, N)
        masks = make_masks(grid)
        plan = fo.FourierPlan(grid)
        b1 = exterior_basis(grid, masks.w1, kind="bump", radius=0.3)
        b2 = exterior_basis(grid, masks.w2, kind="bump", radius=0.3)
        res = []
        for pseed, i, j in specs:
            s1, s2 = gauged_pair(grid, masks, np.random.default_rng(pseed))
            f1 = b1[int(i * (len(b1) - 1) / 2)]
            f2 = b2[int(j * (len(b2) - 1) / 2)]
            res.append(alessandrini_check(s1, s2, f1, f2, s, plan).residual)
        table[N] = res
    worst = {N: max(v) for N, v in table.items()}
    per_pair = np.array([table[N] for N in N_list])
    mono = bool(np.all(np.diff(per_pair, axis=0) < 0))
    val = worst[at]
    return Check("alessandrini", val, tol, val <= tol and mono,
                 {"N": list(N_list), "worst": list(worst.values()), "monotone_every_pair": mono})


# gauge ---------------------------------------------------------------------------------

@_timed
def gauge_checks(N: int = 512, s: float = 0.5) -> Check:
    grid = default_grid(1, N)
    masks = make_masks(grid)
    T = gauge_demo_1d(3.0, [1.0, 0.5, 1.25], grid, masks, s, K_contrast=3.5)
    same = max(r["distance"] for r in T.rows if r["same_class"])
    other = min(r["distance"] for r in T.rows if not r["same_class"])
    plan = fo.FourierPlan(grid)
    lame = make_lame_field(grid, masks, 0.5, 1.0, [], [Bump((0.1,), 0.6, 0.5)])
    lame = lame.with_M(lame.M, nu=0.25)
    gm = GammaField(lame)
    r = gauge_solve(q_potential(gm, plan, s), gm, s, plan)
    r_err = float(np.max(np.abs(r - 1)))
    rho = 1 + smooth_bump(grid, [0.0], 0.7, 0.3)
    gm2 = GammaField(lame.with_M(lame.M * rho ** 2, nu=0.25))
    r2 = gauge_solve(q_potential(gm2, plan, s), gm, s, plan)
    rho_err = float(np.max(np.abs(r2 - rho)) / np.max(np.abs(rho - 1)))
    ok = same <= 1e-10 and other >= 1e-3 and r_err <= 1e-6 and rho_err <= 5e-2
    return Check("gauge", same, 1e-10, ok,
                 {"same_class_max": same, "cross_class_min": other, "r_minus_1": r_err,
                  "rho_recovery_rel": rho_err, "ratio_check": float(np.max(np.abs(
                      gauge_ratio(gm2, gm) - rho)))})


# reconstruction ----------------------------------------------------------------------

@_timed
def closed_loop(N: int = 512, s: float = 0.5, nu: float = 0.25, beta: float = 1e-14,
                max_iter: int = 15, tol: float = 0.10) -> Check:
    grid = default_grid(1, N)
    masks = make_masks(grid)
    base = make_lame_field(grid, masks, lame_from_nu(1.0, nu, 1), 1.0)
    truth = base.with_M(np.full(grid.shape, 1.0) + smooth_bump(grid, [0.15], 0.6, 0.5), nu=nu)
    b1 = exterior_basis(grid, masks.w1)
    b2 = exterior_basis(grid, masks.w2)
    obs = DnData([dn_map(assemble_elastic(truth, s), b1, b2, method="direct")], s, grid)
    cfg = ReconstructionConfig(nu=nu, s=s, beta=beta, max_iter=max_iter)
    res = reconstruct_lame(obs, base, cfg, b1, b2, truth=truth)
    objs = [h["objective"] for h in res.history]
    mono = all(a > b for a, b in zip(objs, objs[1:]))
    ok = res.rel_error_M <= tol and res.rel_error_L <= tol and mono
    return Check("closed_loop", res.rel_error_M, tol, ok,
                 {"rel_error_L": res.rel_error_L, "rel_error_perturbation": res.rel_error_dM,
                  "objective": objs, "monotone": mono, "iterations": len(objs) - 1})


# Runge ------------------------------------------------------------------------------------

@_timed
def runge_study(N: int = 512, s: float = 0.5, alphas=tuple(10.0 ** -np.arange(1, 7)),
                center: float = 0.0, radius: float = 0.9, tol: float = 0.2) -> Check:
    grid = default_grid(1, N)
    masks = make_masks(grid)
    plan = fo.FourierPlan(grid)
    lame = make_lame_field(grid, masks, 0.5, 1.0, [], [Bump((0.1,), 0.6, 0.5)])
    lame = lame.with_M(lame.M, nu=0.25)
    gm = GammaField(lame)
    Q = q_potential(gm, plan, s)
    W = masks.w1 | masks.w2
    basis = node_basis(grid, W)
    S = control_to_state(gm, Q, basis)
    target = smooth_bump(grid, [center], radius)[..., None]
    mis = [runge_control(RungeProblem(target, W, a), Q, gm, basis=basis, S=S).relative_misfit
           for a in alphas]
    zero = runge_control(RungeProblem(np.zeros_like(target), W, 1e-3), Q, gm, basis=basis, S=S)
    mono = all(b <= a * (1 + 1e-12) for a, b in zip(mis, mis[1:]))
    last = mis[-1]
    return Check("runge", last, tol, last <= tol and mono and zero.misfit == 0.0,
                 {"alpha": list(alphas), "relative_misfit": mis, "monotone": mono,
                  "zero_target_control_norm": float(np.abs(zero.control).max())})


# name -> (function, takes an rng as first argument)
CHECKS = {
    "sqrt": (sqrt_roundtrip, True),
    "tensor": (tensor_rules, True),
    "operators": (operator_identities, True),
    "cross_laplacian": (cross_laplacian, False),
    "reduction": (reduction_sweep, False),
    "q_identity": (q_identity, False),
    "dn": (dn_structure, False),
    "alessandrini": (alessandrini_sweep, False),
    "gauge": (gauge_checks, False),
    "closed_loop": (closed_loop, False),
    "runge": (runge_study, False),
}

DEFAULT_VERIFY = ("tensor", "operators", "sqrt", "reduction", "dn", "alessandrini")


def run_check(name: str, rng: np.random.Generator, **kwargs) -> Check:
    fn, takes_rng = CHECKS[name]
    return fn(rng, **kwargs) if takes_rng else fn(**kwargs)
