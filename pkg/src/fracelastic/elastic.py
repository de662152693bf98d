"""Fractional elasticity: kernel assembly, reduced spectral formula, solver, DN map.

The quadratic form realised here is

    Q(u, v) = iint a(x,y) |zeta|^2 du.dv + b(x,y) (zeta.du)(zeta.dv) dx dy,

with ``du = u(y) - u(x)``, ``a = 4 mu(x) mu(y)`` and
``b = 2 (n k(x) k(y) + n' mu(x) mu(y))``.  It is discretised by the
midpoint rule on node pairs, a Taylor estimate on the singular cell and
closed-form lattice/far-field sums for the region outside the box.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from scipy.linalg import cho_factor, cho_solve

from . import fracops as fo
from .gridfield import GridSpec, LameField, RegionMasks, smooth_bump
from .tensorlab import SqrtParams


class SolverError(RuntimeError):
    """Conjugate gradients did not reach the requested tolerance."""


def _nprime(n: int) -> float:
    return 2.0 * (n - 2) / n


def _second_moment_stencil(grid: GridSpec, s: float) -> np.ndarray:
    """``z_i z_j |z|^{-n-2s-2}`` on node offsets, shape ``(2N-1,)*n + (n, n)``."""
    n, N, h = grid.n, grid.N, grid.h
    off = np.arange(-(N - 1), N, dtype=float) * h
    Z = np.stack(np.meshgrid(*([off] * n), indexing="ij"), axis=-1)
    z2 = np.sum(Z ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        w = np.where(z2 > 0, z2 ** (-(n + 2 * s + 2) / 2), 0.0)
    return Z[..., :, None] * Z[..., None, :] * w[..., None, None]


@dataclass(eq=False)
class ElasticAssembly:
    """Matrix-free (and, in 1D, dense) realisation of ``Q``.

    ``apply(u)`` returns the nodal vector ``A u`` with ``Q(u, v) = sum(v * A u)``
    for fields that vanish outside the grid.
    """

    lame: LameField
    s: float
    radius: float | None = None
    _dense: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        g = self.grid
        n, h, s = g.n, g.h, self.s
        R = fo.default_radius(g) if self.radius is None else self.radius
        self.C = fo.cns(n, s)
        self.c = h ** (2 * n) * self.C / 2.0
        self.sigma = fo.lattice_sum(n, s, h, R) + fo.tail_integral(n, s, R) / h ** n
        m2, a4, b4 = fo.lattice_moments(n, s)
        # Taylor weights of the singular cell, scaled to gradient products
        scale = -h ** (2 - 2 * s) * h ** n * self.C / 2.0 / h ** 2
        self.w_iso, self.w_aligned, self.w_cross = scale * m2, scale * a4, scale * b4
        self.K0 = fo.kernel_stencil(g, s)
        self.K2 = _second_moment_stencil(g, s) if n > 1 else None
        self.mu = self.lame.mu
        self.k = self.lame.k
        self.mu0 = self.lame.mu0
        self.k0 = self.lame.k0
        self._rowsum = self._build_rowsum()

    @property
    def grid(self) -> GridSpec:
        return self.lame.grid

    @property
    def masks(self) -> RegionMasks:
        return self.lame.masks

    @property
    def n(self) -> int:
        return self.grid.n

    # kernel pieces ------------------------------------------------------------
    def _conv0(self, f):
        return fo.grid_convolve(self.grid, f, self.K0)

    def _conv2(self, f):
        """``sum_y K2(x-y) f(y)`` for scalar ``f`` (matrix result) or vector ``f``."""
        n = self.n
        if n == 1:
            out = self._conv0(f)
            return out[..., None, None] if f.ndim == n else out
        if f.ndim == n:
            out = np.empty(f.shape + (n, n))
            for i in range(n):
                for j in range(i, n):
                    out[..., i, j] = out[..., j, i] = fo.grid_convolve(self.grid, f, self.K2[..., i, j])
            return out
        out = np.zeros_like(f)
        for i in range(n):
            for j in range(n):
                out[..., i] += fo.grid_convolve(self.grid, f[..., j], self.K2[..., i, j])
        return out

    def _build_rowsum(self) -> np.ndarray:
        n = self.n
        mu, k = self.mu, self.k
        mut, kt = mu - self.mu0, k - self.k0
        I = np.eye(n)
        np_ = _nprime(n)
        s0 = self._conv0(mut) + self.mu0 * self.sigma
        s2k = self._conv2(kt) + self.k0 * self.sigma / n * I
        s2m = self._conv2(mut) + self.mu0 * self.sigma / n * I
        return self.c * (4 * mu[..., None, None] * s0[..., None, None] * I
                         + 2 * n * k[..., None, None] * s2k
                         + 2 * np_ * mu[..., None, None] * s2m)

    def _edges(self):
        """Forward nearest-neighbour edges ``(axis, slice_x, slice_y)``."""
        n = self.n
        for p in range(n):
            a = [slice(None)] * n
            b = [slice(None)] * n
            a[p], b[p] = slice(0, -1), slice(1, None)
            yield p, tuple(a), tuple(b)

    def _edge_coeffs(self, p, sa, sb) -> np.ndarray:
        """Per-component weights of the singular-cell term on edges along axis ``p``."""
        n = self.n
        mux, muy, kx, ky = self.mu[sa], self.mu[sb], self.k[sa], self.k[sb]
        a = 4 * mux * muy
        b = 2 * (n * kx * ky + _nprime(n) * mux * muy)
        w = np.empty(a.shape + (n,))
        for alpha in range(n):
            w[..., alpha] = self.w_iso * a + (self.w_aligned if alpha == p else self.w_cross) * b
        return w

    def _cross(self, u) -> np.ndarray:
        """Mixed-derivative part of the singular-cell term (2D only)."""
        out = np.zeros_like(u)
        if self.n != 2 or self.w_cross == 0.0:
            return out
        h = self.grid.h
        b = 2 * (2 * self.k ** 2)  # n' = 0 when n = 2
        c = self.w_cross * h ** 2 * b
        g = {(p, a): _central(u[..., a], p, h) for p in range(2) for a in range(2)}
        pairs = {(0, 0): (1, 1), (1, 1): (0, 0), (1, 0): (0, 1), (0, 1): (1, 0)}
        for (q, beta), (p, alpha) in pairs.items():
            out[..., beta] -= _central(c * g[(p, alpha)], q, h)
        return out

    # public -------------------------------------------------------------------
    def apply(self, u) -> np.ndarray:
        """``A u`` for a vector field ``u`` of shape ``grid.shape + (n,)``."""
        u = np.asarray(u, dtype=float)
        n = self.n
        mu, k = self.mu, self.k
        np_ = _nprime(n)
        Wu = self.c * (4 * mu[..., None] * self._conv0_vec(mu[..., None] * u)
                       + 2 * n * k[..., None] * self._conv2(k[..., None] * u)
                       + 2 * np_ * mu[..., None] * self._conv2(mu[..., None] * u))
        out = 2.0 * (np.einsum("...ij,...j->...i", self._rowsum, u) - Wu)
        for p, sa, sb in self._edges():
            flux = self._edge_coeffs(p, sa, sb) * (u[sb] - u[sa])
            out[sa] -= flux
            out[sb] += flux
        return out + self._cross(u)

    def _conv0_vec(self, f):
        return np.stack([self._conv0(f[..., i]) for i in range(self.n)], axis=-1)

    def form(self, u, v) -> float:
        """Quadratic form ``Q(u, v)``."""
        return float(np.sum(np.asarray(v) * self.apply(u)))

    def diagonal(self) -> np.ndarray:
        """Diagonal of ``A`` per node and component."""
        d = 2.0 * np.einsum("...ii->...i", self._rowsum).copy()
        for p, sa, sb in self._edges():
            w = self._edge_coeffs(p, sa, sb)
            d[sa] += w
            d[sb] += w
        return d

    def dense(self) -> np.ndarray:
        """Dense ``A`` over all ``N^n * n`` unknowns (node-major, component-minor)."""
        if self._dense is None:
            g = self.grid
            size = g.N ** g.n * g.n
            if g.n == 1:
                self._dense = self._dense_1d()
            else:
                cols = []
                for j in range(size):
                    e = np.zeros(size)
                    e[j] = 1.0
                    cols.append(self.apply(e.reshape(g.shape + (g.n,))).ravel())
                self._dense = np.array(cols).T
        return self._dense

    def _dense_1d(self) -> np.ndarray:
        g = self.grid
        x = g.axis
        k = self.k
        d = np.abs(x[:, None] - x[None, :])
        with np.errstate(divide="ignore"):
            K = np.where(d > 0, d ** (-1 - 2 * self.s), 0.0)
        # in one dimension a + b = 2 k(x) k(y)
        W = 2.0 * self.c * k[:, None] * k[None, :] * K
        A = -2.0 * W
        A[np.diag_indices_from(A)] += 2.0 * self._rowsum[:, 0, 0]
        w = self._edge_coeffs(0, slice(0, -1), slice(1, None))[:, 0]
        i = np.arange(g.N - 1)
        A[i, i] += w
        A[i + 1, i + 1] += w
        A[i, i + 1] -= w
        A[i + 1, i] -= w
        return A


def _central(f, p, h):
    """Central difference along axis ``p`` with zero values outside the grid."""
    out = np.zeros_like(f)
    a = [slice(None)] * f.ndim
    b = [slice(None)] * f.ndim
    a[p], b[p] = slice(1, None), slice(0, -1)
    out[tuple(b)] += f[tuple(a)]
    out[tuple(a)] -= f[tuple(b)]
    return out / (2 * h)


def assemble_elastic(lame: LameField, s: float) -> ElasticAssembly:
    return ElasticAssembly(lame, s)


# reduced spectral formula ---------------------------------------------------------

def apply_es_reduced(lame: LameField, u, s: float, plan: fo.FourierPlan | None = None) -> np.ndarray:
    """Spectral evaluation of the reduced expression for ``E^s u``."""
    g = lame.grid
    n = g.n
    plan = plan or fo.FourierPlan(g)
    u = np.asarray(u, dtype=float)
    mu, k = lame.mu, lame.k
    mut, kt = mu - lame.mu0, k - lame.k0
    np_ = _nprime(n)
    c1 = 2 * n + 4 * s + np_

    def riesz_div(f):
        # (-Delta)^{s-1} grad div f has multiplier -|xi|^{2s} P
        return -fo.riesz_apply(plan, f, s)

    mu_v, k_v = mu[..., None], k[..., None]
    out = (c1 * mu_v * fo.frac_laplacian(plan, mu_v * u, s)
           + n * k_v * fo.frac_laplacian(plan, k_v * u, s)
           - 2 * np_ * s * mu_v * riesz_div(mu_v * u)
           - 2 * n * s * k_v * riesz_div(k_v * u))
    # (-Delta)^{s-1} Hess f = -riesz_hessian(f)
    Hm = -fo.riesz_hessian(plan, mut, s)
    Hk = -fo.riesz_hessian(plan, kt, s)
    M = np_ * mu[..., None, None] * Hm + n * k[..., None, None] * Hk
    out += 2 * s * np.einsum("...i,...ij->...j", u, M)
    scal = c1 * mu * fo.frac_laplacian(plan, mut, s) + n * k * fo.frac_laplacian(plan, kt, s)
    out -= u * scal[..., None]
    return out / (n / 2 + s)


# potential energy -----------------------------------------------------------------

def potential_energy(lame: LameField, u, s: float, chunk: int = 256) -> float:
    """``U^s(u)`` from the symmetrised fractional strain, node pair by node pair.

    Uses explicit two-point stiffness tensors and strain tensors, with the
    same quadrature rule as :class:`ElasticAssembly`.
    """
    g = lame.grid
    n, h = g.n, g.h
    C = fo.cns(n, s)
    X = g.coords().reshape(-1, n)
    U = np.asarray(u, float).reshape(-1, n)
    lam, mu = lame.lam.ravel(), lame.mu.ravel()
    sp0 = SqrtParams(float(np.sqrt(2 * lame.M0 + n * lame.L0) - np.sqrt(2 * lame.M0)) / n,
                     lame.mu0, lame.k0)

    def density(lx, mx, ly, my, du, zeta):
        # (C^{1/2}(x):C^{1/2}(y) eps) : eps with eps = sym(du (x) zeta)
        eps = 0.5 * (du[:, :, None] * zeta[:, None, :] + du[:, None, :] * zeta[:, :, None])
        tr = np.einsum("pii->p", eps)
        c_tr = n * lx * ly + 2 * lx * my + 2 * ly * mx
        c_sym = 2 * mx * my
        return c_tr * tr ** 2 + 2 * c_sym * np.einsum("pij,pij->p", eps, eps)

    total = 0.0
    idx = np.arange(len(X))
    for start in range(0, len(X), chunk):
        i = idx[start:start + chunk]
        ii = np.repeat(i, len(X))
        jj = np.tile(idx, len(i))
        keep = ii != jj
        ii, jj = ii[keep], jj[keep]
        z = X[ii] - X[jj]
        r = np.linalg.norm(z, axis=1)
        zeta = np.sqrt(C / 2.0) * z / r[:, None] ** (n / 2 + s + 1)
        du = U[jj] - U[ii]
        total += h ** (2 * n) * np.sum(density(lam[ii], mu[ii], lam[jj], mu[jj], du, zeta))
    # outside the box: du = -u(x), coefficients at infinity on the y side
    asm = ElasticAssembly(lame, s)
    one = np.ones(g.shape)
    S0 = asm.sigma - asm._conv0(one)
    if n == 1:
        S2 = S0[..., None, None]
    else:
        S2 = asm.sigma / n * np.eye(n) - asm._conv2(one)
    ux = np.asarray(u, float)
    lamx, mux = lame.lam, lame.mu
    c_tr = n * lamx * sp0.lam + 2 * lamx * sp0.mu + 2 * sp0.lam * mux
    c_sym = 2 * mux * sp0.mu
    # density = (C/2)|z|^{-n-2s} [c_sym |du|^2 + (c_tr + c_sym)(e.du)^2]
    quad = np.einsum("...i,...ij,...j->...", ux, S2, ux)
    total += 2 * h ** (2 * n) * C / 2 * np.sum(c_sym * np.sum(ux ** 2, -1) * S0 + (c_tr + c_sym) * quad)
    # singular cell: lattice-regularised Taylor term, same stencils as the assembly
    m2, a4, b4 = fo.lattice_moments(n, s)
    scale = -h ** (2 - 2 * s) * h ** n * C / 2 / h ** 2
    for p, sa, sb in asm._edges():
        du = ux[sb] - ux[sa]
        lx, ly, mx, my = lamx[sa], lamx[sb], mux[sa], mux[sb]
        c_tr = n * lx * ly + 2 * lx * my + 2 * ly * mx
        c_sym = 2 * mx * my
        for alpha in range(n):
            mom = a4 if alpha == p else b4
            total += scale * np.sum((m2 * c_sym + mom * (c_tr + c_sym)) * du[..., alpha] ** 2)
    if n == 2:
        c_both = n * lamx ** 2 + 4 * lamx * mux + 2 * mux ** 2
        D = lambda f, q: _central(f, q, h)
        mixed = D(ux[..., 0], 0) * D(ux[..., 1], 1) + D(ux[..., 0], 1) * D(ux[..., 1], 0)
        total += 2 * scale * b4 * h ** 2 * np.sum(c_both * mixed)
    return 0.5 * total


# Dirichlet problem and DN map -------------------------------------------------------

@dataclass
class SolveInfo:
    iterations: int
    residual: float
    seconds: float


def _cg(matvec, rhs, diag, rtol, maxiter):
    size = rhs.size
    op = LinearOperator((size, size), matvec=matvec, dtype=float)
    prec = LinearOperator((size, size), matvec=lambda r: r / diag, dtype=float)
    it = [0]

    def count(_):
        it[0] += 1

    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros(size), SolveInfo(0, 0.0, 0.0)
    t0 = time.perf_counter()
    x, info = cg(op, rhs, rtol=rtol * 0.5, atol=0.0, maxiter=maxiter, M=prec, callback=count)
    res = np.linalg.norm(rhs - matvec(x)) / bnorm
    # polish: recycle the true residual until the relative target is met
    while res > rtol and it[0] < maxiter:
        dx, info = cg(op, rhs - matvec(x), rtol=0.1, atol=0.0, maxiter=maxiter, M=prec, callback=count)
        x = x + dx
        res = np.linalg.norm(rhs - matvec(x)) / bnorm
    if res > rtol:
        raise SolverError(f"CG stopped at relative residual {res:.2e} after {it[0]} iterations")
    return x, SolveInfo(it[0], float(res), time.perf_counter() - t0)


def solve_dirichlet(asm: ElasticAssembly, f, F=None, rtol: float = 1e-10,
                    maxiter: int = 20000, return_info: bool = False):
    """Solve ``Q(u, phi) = <F, phi>`` for interior test fields with ``u = f`` outside omega."""
    g = asm.grid
    n = g.n
    omega = asm.masks.omega
    f = np.asarray(f, dtype=float).reshape(g.shape + (n,))
    if np.any(f[omega] != 0):
        raise ValueError("exterior datum must vanish in omega")
    rhs_full = -asm.apply(f)
    if F is not None:
        F = np.asarray(F, dtype=float).reshape(g.shape + (n,))
        if np.any(F[~omega] != 0):
            raise ValueError("interior source must be supported in omega")
        rhs_full = rhs_full + g.cell_volume * F
    rhs = rhs_full[omega].ravel()
    diag = asm.diagonal()[omega].ravel()
    if n == 1:
        sel = np.flatnonzero(omega.ravel())
        A_ii = asm.dense()[np.ix_(sel, sel)]
        matvec = lambda x: A_ii @ x
    else:
        def matvec(x):
            full = np.zeros(g.shape + (n,))
            full[omega] = x.reshape(-1, n)
            return asm.apply(full)[omega].ravel()
    x, info = _cg(matvec, rhs, diag, rtol, maxiter)
    u = f.copy()
    u[omega] = x.reshape(-1, n)
    return (u, info) if return_info else u


def exterior_basis(grid: GridSpec, mask: np.ndarray, stride: int = 1,
                   kind: str = "node", radius: float | None = None) -> list[np.ndarray]:
    """Vector basis on an exterior mask.

    ``kind="node"``: node indicators smoothed by one Jacobi sweep, cut to
    ``mask``.  ``kind="bump"``: smooth bumps of physical ``radius`` centred
    on mask nodes whose whole bump fits inside the mask.  Nodes are taken
    in C order, every ``stride``-th one, each paired with every unit vector.
    """
    n = grid.n
    if kind == "node":
        nodes = np.argwhere(mask)[::stride]
    elif kind == "bump":
        radius = radius or 4 * grid.h
        X = grid.coords()
        ok = [tuple(i) for i in np.argwhere(mask)
              if np.all(mask[np.sum((X - X[tuple(i)]) ** 2, -1) < radius ** 2])]
        nodes = np.array(ok, dtype=int).reshape(-1, n)[::stride]
    else:
        raise ValueError(f"unknown basis kind {kind!r}")
    out = []
    for node in nodes:
        if kind == "node":
            e = np.zeros(grid.shape)
            e[tuple(node)] = 1.0
            avg = np.zeros_like(e)
            for a in range(n):
                avg += np.roll(e, 1, axis=a) + np.roll(e, -1, axis=a)
            v = 0.5 * e + 0.5 * avg / (2 * n)
            v = np.where(mask, v, 0.0)
        else:
            v = smooth_bump(grid, grid.coords()[tuple(node)], radius)
        for c in range(n):
            f = np.zeros(grid.shape + (n,))
            f[..., c] = v
            out.append(f)
    return out


@dataclass
class DnMap:
    """Exterior measurement matrix ``matrix[j, i] = <Lambda f_i, g_j>``."""

    matrix: np.ndarray
    basis1: list
    basis2: list
    scale: str = "Q"
    solves: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def max_residual(self) -> float:
        return max((i.residual for i in self.solves), default=0.0)

    def symmetry_defect(self) -> float:
        M = self.matrix
        return float(np.linalg.norm(M - M.T) / np.linalg.norm(M))


def dn_map(asm: ElasticAssembly, basis1, basis2, rtol: float = 1e-10,
           return_solutions: bool = False, method: str = "cg"):
    """DN matrix with entries ``Q(P f_i, g_j)``.

    ``method="direct"`` factors the dense interior block once (any ``n``,
    sensible only for small grids) instead of running CG per datum.
    """
    if method == "direct":
        return _dn_map_direct(asm, basis1, basis2, return_solutions)
    cols, infos, sols = [], [], []
    for f in basis1:
        u, info = solve_dirichlet(asm, f, rtol=rtol, return_info=True)
        Au = asm.apply(u)
        cols.append([float(np.sum(gj * Au)) for gj in basis2])
        infos.append(info)
        if return_solutions:
            sols.append(u)
    dn = DnMap(np.array(cols).T, list(basis1), list(basis2), "Q", infos,
               {"s": asm.s, "grid": asm.grid.to_dict(), "rtol": rtol})
    return (dn, sols) if return_solutions else dn


def _dn_map_direct(asm: ElasticAssembly, basis1, basis2, return_solutions: bool):
    t0 = time.perf_counter()
    g = asm.grid
    A = asm.dense()
    sel = np.flatnonzero(np.repeat(asm.masks.omega.ravel(), g.n))
    F = np.stack([np.asarray(f).ravel() for f in basis1], axis=1)
    Gm = np.stack([np.asarray(b).ravel() for b in basis2], axis=1)
    chol = cho_factor(A[np.ix_(sel, sel)])
    U = F.copy()
    U[sel] = -cho_solve(chol, A[sel] @ F)
    AU = A @ U
    res = np.linalg.norm(AU[sel], axis=0) / np.maximum(np.linalg.norm((A @ F)[sel], axis=0), 1e-300)
    secs = (time.perf_counter() - t0) / max(F.shape[1], 1)
    infos = [SolveInfo(0, float(r), secs) for r in res]
    dn = DnMap(Gm.T @ AU, list(basis1), list(basis2), "Q", infos,
               {"s": asm.s, "grid": g.to_dict(), "method": "direct"})
    if return_solutions:
        sols = [U[:, i].reshape(g.shape + (g.n,)) for i in range(U.shape[1])]
        return dn, sols
    return dn
