import numpy as np
import pytest

from fracelastic import fracops as fo
from fracelastic.elastic import assemble_elastic, dn_map, exterior_basis, potential_energy, solve_dirichlet
from fracelastic.gridfield import Bump, default_grid, make_lame_field, make_masks, smooth_bump
from fracelastic.liouville import (GammaField, TransformedProblem, back_transform, bq_form, bq_star,
                                   dn_map_q, forward_transform, q_potential, q_potential_explicit,
                                   reduction_residual, solve_transformed)
from fracelastic.suites import q_identity, reduction_fields


def setup(n=1, N=512, bumps=True):
    g = default_grid(n, N)
    m = make_masks(g)
    if bumps:
        lf = make_lame_field(g, m, 1.0, 1.0, [Bump((0.2,) * n, 0.7, 0.4)],
                             [Bump((-0.1,) * n, 0.8, 0.6)])
    else:
        lf = make_lame_field(g, m, 1.0, 1.0)
    return lf, GammaField(lf), fo.FourierPlan(g)


def test_constant_gamma_gives_zero_potential():
    for n, N in ((1, 256), (2, 32)):
        lf, gm, plan = setup(n, N, bumps=False)
        assert not q_potential(gm, plan, 0.5).values.any()


def test_one_dimensional_potential():
    lf, gm, plan = setup(1, 512)
    s = 0.3
    Q = q_potential(gm, plan, s).values[..., 0, 0]
    kt = gm.perturbation[..., 1]
    ref = gm.gamma[..., 1] / gm.norm2 * (1 + 2 * s) * fo.frac_laplacian(plan, kt, s)
    assert np.max(np.abs(Q - ref)) <= 1e-12 * np.max(np.abs(ref))


@pytest.mark.parametrize("n,N", [(1, 512), (2, 48)])
def test_potential_two_routes_agree(n, N):
    lf, gm, plan = setup(n, N)
    a = q_potential(gm, plan, 0.6).values
    b = q_potential_explicit(gm, plan, 0.6).values
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(a))


@pytest.mark.parametrize("n,N", [(1, 256), (2, 32)])
def test_coefficient_identity_and_solution_equivalence(n, N):
    c = q_identity(n=n, N=N, count=5)
    assert c.details["q_coefficient_rel"] <= 1e-10
    assert c.details["liouville_equivalence_rel"] <= 1e-8


def test_transform_round_trip():
    lf, gm, plan = setup(2, 32)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(lf.grid.shape + (2,))
    assert np.max(np.abs(back_transform(forward_transform(u, gm), gm) - u)) <= 1e-14
    lf0, gm0, _ = setup(2, 32, bumps=False)
    w = forward_transform(u, gm0)
    assert np.array_equal(w[..., 0, :], lf0.mu0 * u) and np.array_equal(w[..., 1, :], lf0.k0 * u)
    ext = ~lf.masks.omega
    assert np.array_equal(forward_transform(u, gm)[ext], forward_transform(u, gm0)[ext])


def test_bq_form_energy():
    lf, gm, plan = setup(1, 512)
    s = 0.5
    Q = q_potential(gm, plan, s)
    u = smooth_bump(lf.grid, [0.0], 0.9)[..., None]
    w = forward_transform(u, gm)
    assert bq_form(w, w, Q, plan, s) == pytest.approx((2 + 4 * s) * potential_energy(lf, u, s), rel=1e-2)
    assert bq_form(0 * w, w, Q, plan, s) == 0.0
    v = forward_transform(smooth_bump(lf.grid, [0.3], 0.5)[..., None], gm)
    assert bq_form(w, v, Q, plan, s) - bq_star(v, w, Q, plan, s) == 0.0


def test_solve_transformed_basics():
    lf, gm, plan = setup(1, 256)
    s = 0.5
    Q = q_potential(gm, plan, s)
    zero = np.zeros(lf.grid.shape + (2, 1))
    assert not solve_transformed(TransformedProblem(Q, gm, s, zero)).any()
    lf0, gm0, _ = setup(1, 256, bumps=False)
    f = np.zeros(lf.grid.shape + (1,))
    f[..., 0] = smooth_bump(lf.grid, [-2.5], 0.4)
    w = solve_transformed(TransformedProblem(q_potential(gm0, plan, s), gm0, s, forward_transform(f, gm0)))
    assert np.allclose(w[..., 0, :] * lf0.k0, w[..., 1, :] * lf0.mu0, rtol=0, atol=1e-15)
    u = solve_dirichlet(assemble_elastic(lf0, s), f)
    assert np.linalg.norm(back_transform(w, gm0) - u) <= 1e-8 * np.linalg.norm(u)


def test_solve_transformed_interior_source():
    lf, gm, plan = setup(1, 256)
    s = 0.5
    Q = q_potential(gm, plan, s)
    G = np.zeros(lf.grid.shape + (2, 1))
    G[..., 1, 0] = smooth_bump(lf.grid, [0.0], 0.5)
    zero = np.zeros_like(G)
    w = solve_transformed(TransformedProblem(Q, gm, s, zero, G))
    assert w.any() and not w[~lf.masks.omega].any()
    bad = zero.copy()
    bad[lf.masks.omega] = 1.0
    with pytest.raises(ValueError):
        solve_transformed(TransformedProblem(Q, gm, s, bad))


def test_reduction_residual_constant_coefficients():
    res = []
    for N in (256, 512, 1024):
        lf, gm, plan = setup(1, N, bumps=False)
        us, ps = reduction_fields(lf.grid)
        res.append(reduction_residual(us, lf, plan, 0.5, tests=ps).residual)
    assert res[-1] <= 1e-2
    assert all(a >= 1.5 * b for a, b in zip(res, res[1:]))
    lf, gm, plan = setup(1, 256)
    z = np.zeros(lf.grid.shape + (1,))
    assert reduction_residual([z], lf, plan, 0.5).residual == 0.0


def test_transformed_dn_relation():
    lf, gm, plan = setup(1, 1024)
    s = 0.5
    b1 = exterior_basis(lf.grid, lf.masks.w1, stride=8, kind="bump", radius=0.25)
    b2 = exterior_basis(lf.grid, lf.masks.w2, stride=8, kind="bump", radius=0.25)
    asm = assemble_elastic(lf, s)
    L = dn_map(asm, b1, b2).matrix
    LQ = dn_map_q(q_potential(gm, plan, s), gm, b1, b2, plan, asm)
    assert LQ.scale == "B_Q"
    assert np.max(np.abs(LQ.matrix - (0.5 + s) * L)) <= 1e-6 * np.max(np.abs(LQ.matrix))
    S = dn_map_q(q_potential(gm, plan, s), gm, b1, b1, plan, asm).matrix
    assert np.linalg.norm(S - S.T) <= 1e-6 * np.linalg.norm(S)
