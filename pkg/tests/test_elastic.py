import numpy as np
import pytest

from fracelastic import fracops as fo
from fracelastic.elastic import (apply_es_reduced, assemble_elastic, dn_map, exterior_basis,
                                 potential_energy, solve_dirichlet)
from fracelastic.gridfield import (Bump, default_grid, make_lame_field, make_masks,
                                   smooth_bump)
from fracelastic.tensorlab import IsotropicParams, sqrt_lame


def field(n, N, bumps=True):
    g = default_grid(n, N)
    m = make_masks(g)
    if not bumps:
        return make_lame_field(g, m, 1.0, 1.0)
    return make_lame_field(g, m, 1.0, 1.0, [Bump((0.2,) * n, 0.7, 0.4)],
                           [Bump((-0.1,) * n, 0.8, 0.6)])


def rand_vec(grid, rng, reach=1.0):
    u = np.zeros(grid.shape + (grid.n,))
    for _ in range(3):
        c = rng.uniform(-reach / 2, reach / 2, grid.n)
        u += smooth_bump(grid, c, reach / 2)[..., None] * rng.standard_normal(grid.n)
    return u


@pytest.mark.parametrize("n,N", [(1, 256), (2, 32)])
def test_form_symmetric_and_positive(n, N):
    lf = field(n, N)
    rng = np.random.default_rng(0)
    asm = assemble_elastic(lf, 0.4)
    for _ in range(5):
        u, v = rand_vec(lf.grid, rng, 3.0), rand_vec(lf.grid, rng, 3.0)
        assert abs(asm.form(u, v) - asm.form(v, u)) <= 1e-10 * np.linalg.norm(u) * np.linalg.norm(v)
        assert asm.form(u, u) > 0
    c = assemble_elastic(field(n, N, bumps=False), 0.6)
    u = smooth_bump(lf.grid, [0.0] * n, 1.0)[..., None] * np.ones(n)
    assert c.form(u, u) > 0


def test_dense_matches_apply_1d():
    asm = assemble_elastic(field(1, 128), 0.3)
    u = rand_vec(asm.grid, np.random.default_rng(1), 4.0)
    assert np.allclose(asm.dense() @ u.ravel(), asm.apply(u).ravel(), rtol=0, atol=1e-12)
    assert np.allclose(np.diag(asm.dense()), asm.diagonal().ravel(), rtol=1e-13)


def test_one_dimension_depends_on_k_only():
    g = default_grid(1, 256)
    m = make_masks(g)
    a = make_lame_field(g, m, 1.0, 1.0)
    b = make_lame_field(g, m, 2.0, 0.5)
    Aa, Ab = assemble_elastic(a, 0.5).dense(), assemble_elastic(b, 0.5).dense()
    assert np.max(np.abs(Aa - Ab)) <= 1e-12 * np.max(np.abs(Aa))


def test_reduced_operator_constant_coefficients():
    lf = field(2, 48, bumps=False)
    g = lf.grid
    s = 0.35
    n = g.n
    plan = fo.FourierPlan(g)
    u = rand_vec(g, np.random.default_rng(2), 2.0)
    mu0, k0 = lf.mu0, lf.k0
    nprime = 2 * (n - 2) / n
    ref = ((2 * n + 4 * s + nprime) * mu0 ** 2 + n * k0 ** 2) * fo.frac_laplacian(plan, u, s)
    ref -= (2 * nprime * s * mu0 ** 2 + 2 * n * s * k0 ** 2) * (-fo.riesz_apply(plan, u, s))
    ref /= n / 2 + s
    out = apply_es_reduced(lf, u, s, plan)
    assert np.max(np.abs(out - ref)) <= 1e-12 * np.max(np.abs(ref))
    assert not apply_es_reduced(lf, 0 * u, s, plan).any()


def test_reduced_operator_weak_match():
    lf = field(1, 1024)
    g = lf.grid
    asm = assemble_elastic(lf, 0.5)
    plan = fo.FourierPlan(g)
    us = [smooth_bump(g, [c], r)[..., None] for c, r in ((0.0, 0.9), (0.3, 0.6))]
    vs = [smooth_bump(g, [c], r)[..., None] for c, r in ((0.1, 0.8), (-0.4, 0.5))]
    spec = np.array([[g.h * np.sum(v * apply_es_reduced(lf, u, 0.5, plan)) for v in vs] for u in us])
    quad = np.array([[asm.form(u, v) for v in vs] for u in us])
    c = np.sum(spec * quad) / np.sum(spec ** 2)
    assert c == pytest.approx(1.0, abs=1e-3)
    norms = np.outer([np.linalg.norm(u) * np.sqrt(g.h) for u in us],
                     [np.linalg.norm(v) * np.sqrt(g.h) for v in vs])
    assert np.max(np.abs(c * spec - quad) / norms) <= 1e-2


@pytest.mark.parametrize("n,N,s", [(1, 256, 0.5), (2, 24, 0.3)])
def test_potential_energy_matches_form(n, N, s):
    lf = field(n, N)
    u = rand_vec(lf.grid, np.random.default_rng(3), 2.0)
    U = potential_energy(lf, u, s)
    assert U > 0
    assert assemble_elastic(lf, s).form(u, u) == pytest.approx(4 * U, rel=1e-12)
    assert potential_energy(lf, 0 * u, s) == 0.0


def test_potential_energy_bound():
    lf = field(1, 256)
    g = lf.grid
    s = 0.5
    plan = fo.FourierPlan(g)
    lam, mu = np.max(np.abs(lf.lam)), np.max(lf.mu)
    C = 0.5 * (g.n * lam ** 2 + 4 * lam * mu + 4 * mu ** 2)
    rng = np.random.default_rng(4)
    for _ in range(50):
        r = rng.uniform(0.2, 0.9)
        u = smooth_bump(g, [rng.uniform(-1 + r, 1 - r)], r)[..., None] * rng.standard_normal()
        assert potential_energy(lf, u, s) <= 1.05 * C * fo.h_norm(plan, u, s) ** 2


@pytest.mark.parametrize("n", [1, 2, 3])
def test_energy_density_positivity_witness(n):
    rng = np.random.default_rng(5)
    nprime = 2 * (n - 2) / n
    for _ in range(200):
        p, q = (IsotropicParams(n, rng.uniform(-0.5, 2), rng.uniform(0.1, 3)) for _ in range(2))
        if p.K <= 0 or q.K <= 0:
            continue
        x, y = sqrt_lame(p), sqrt_lame(q)
        v, w = rng.standard_normal((2, n))
        val = (n * x.k * y.k + nprime * x.mu * y.mu) * (v @ w) ** 2 \
            + 2 * x.mu * y.mu * (v @ v) * (w @ w)
        if n >= 2:
            assert val >= 2 * x.mu * y.mu * (v @ v) * (w @ w) - 1e-12
        assert val > 0


def test_solve_dirichlet_properties():
    lf = field(1, 256)
    asm = assemble_elastic(lf, 0.5)
    g, m = lf.grid, lf.masks
    f1 = np.zeros(g.shape + (1,))
    f1[m.w1] = 1.0
    f2 = np.zeros_like(f1)
    f2[..., 0] = smooth_bump(g, [2.5], 0.4)
    assert not solve_dirichlet(asm, 0 * f1).any()
    u1, u2 = solve_dirichlet(asm, f1, rtol=1e-12), solve_dirichlet(asm, f2, rtol=1e-12)
    u12 = solve_dirichlet(asm, f1 + f2, rtol=1e-12)
    assert np.linalg.norm(u12 - u1 - u2) <= 1e-8 * np.linalg.norm(u12)
    assert np.array_equal(u1[~m.omega], f1[~m.omega])
    assert abs(asm.form(u1, u1 - f1)) <= 1e-10 * asm.form(u1, u1)
    with pytest.raises(ValueError):
        solve_dirichlet(asm, np.ones_like(f1))


def test_solve_dirichlet_2d_converges():
    lf = field(2, 32)
    asm = assemble_elastic(lf, 0.5)
    f = np.zeros(lf.grid.shape + (2,))
    f[lf.masks.w1, 0] = 1.0
    u, info = solve_dirichlet(asm, f, return_info=True)
    assert info.residual <= 1e-10
    assert np.abs(asm.apply(u)[lf.masks.omega]).max() <= 1e-8 * np.abs(asm.apply(u)).max()


def test_dn_symmetry_and_determinism():
    lf = field(1, 256)
    asm = assemble_elastic(lf, 0.5)
    b = exterior_basis(lf.grid, lf.masks.w1, stride=2)
    D = dn_map(asm, b, b)
    assert D.symmetry_defect() <= 1e-8
    assert D.max_residual <= 1e-10
    Dd = dn_map(asm, b, b, method="direct")
    assert np.max(np.abs(Dd.matrix - D.matrix)) <= 1e-8 * np.max(np.abs(D.matrix))


def test_dn_constant_runs_identical():
    g = default_grid(1, 256)
    m = make_masks(g)
    a = make_lame_field(g, m, 1.0, 1.0)
    b = make_lame_field(g, m, 1.0, 1.0, [Bump((0.0,), 0.5, 0.0)])
    b1 = exterior_basis(g, m.w1, stride=4)
    b2 = exterior_basis(g, m.w2, stride=4)
    Da = dn_map(assemble_elastic(a, 0.5), b1, b2).matrix
    Db = dn_map(assemble_elastic(b, 0.5), b1, b2).matrix
    assert np.max(np.abs(Da - Db)) <= 1e-12 * np.max(np.abs(Da))


def test_dn_one_dimensional_gauge():
    g = default_grid(1, 256)
    m = make_masks(g)
    b1 = exterior_basis(g, m.w1, stride=4)
    b2 = exterior_basis(g, m.w2, stride=4)
    Da = dn_map(assemble_elastic(make_lame_field(g, m, 1.0, 1.0), 0.5), b1, b2).matrix
    Db = dn_map(assemble_elastic(make_lame_field(g, m, 2.0, 0.5), 0.5), b1, b2).matrix
    assert np.linalg.norm(Da - Db) <= 1e-10 * np.linalg.norm(Da)


def test_exterior_basis_support():
    g = default_grid(1, 256)
    m = make_masks(g)
    for kind in ("node", "bump"):
        for f in exterior_basis(g, m.w2, kind=kind, radius=0.25 if kind == "bump" else None):
            assert not f[~m.w2].any() and f.any()
    with pytest.raises(ValueError):
        exterior_basis(g, m.w2, kind="spline")
