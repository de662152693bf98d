import mpmath
import numpy as np
import pytest
from scipy import integrate

from fracelastic import fracops as fo
from fracelastic.gridfield import default_grid, l2_norm, make_masks, smooth_bump


def cns_oracle(n, s):
    return float(mpmath.power(4, s) * mpmath.gamma(n / 2 + s)
                 / (mpmath.pi ** (n / 2) * abs(mpmath.gamma(-s))))


@pytest.fixture(scope="module")
def plan1():
    return fo.FourierPlan(default_grid(1, 1024))


@pytest.fixture(scope="module")
def plan2():
    return fo.FourierPlan(default_grid(2, 64))


def gauss(grid, a=2.0):
    return np.exp(-a * np.sum(grid.coords() ** 2, axis=-1))


def test_cns_values():
    assert fo.cns(1, 0.5) == pytest.approx(1 / np.pi, rel=1e-14)
    assert fo.cns(2, 0.5) == pytest.approx(1 / (2 * np.pi), rel=1e-14)
    assert fo.cns(2, 0.5) / fo.cns(2, -0.5) == pytest.approx(1.0, rel=1e-14)
    for n in (1, 2, 3):
        for s in (0.1, 0.25, 0.5, 0.75, 0.9):
            assert fo.cns(n, s) == pytest.approx(cns_oracle(n, s), rel=1e-13)
    with pytest.raises(ValueError):
        fo.cns(1, 1.0)


def test_coefficients():
    assert fo.coefficients(2, 0.5) == (6.0, 0.0, 2.0, 2.0)
    d1, d2, _, _ = fo.coefficients(1, 0.3)
    assert d1 + d2 == pytest.approx(0.0, abs=1e-15)


def test_zeta_kernel():
    rng = np.random.default_rng(0)
    assert fo.zeta_kernel([1.0], [0.0], 1, 0.5)[0] == pytest.approx(np.sqrt(1 / (2 * np.pi)))
    for _ in range(20):
        x, y = rng.standard_normal((2, 2))
        s = rng.uniform(0.1, 0.9)
        z = fo.zeta_kernel(x, y, 2, s)
        assert np.array_equal(fo.zeta_kernel(y, x, 2, s), -z)
        r = np.linalg.norm(x - y)
        assert np.linalg.norm(z) == pytest.approx(np.sqrt(fo.cns(2, s) / 2) * r ** (-1 - s), rel=1e-13)
    with pytest.raises(ZeroDivisionError):
        fo.zeta_kernel([0.0], [0.0], 1, 0.5)


def test_zeta_pair_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b, x, y = rng.standard_normal((4, 2))
        z = fo.zeta_kernel(x, y, 2, 0.4)
        assert np.einsum("i,j,i,j", a, z, z, b) == pytest.approx(np.einsum("i,j,i,j", b, z, z, a))


def test_frac_laplacian_gaussian_oracle(plan1):
    g = plan1.grid
    u = np.exp(-g.axis ** 2)
    out = fo.frac_laplacian(plan1, u, 0.5)
    x0 = g.axis[g.N // 2]
    ref = integrate.quad(lambda k: np.cos(k * x0) * k * np.sqrt(np.pi) * np.exp(-k * k / 4),
                         0, 60, epsabs=1e-14)[0] / np.pi
    assert out[g.N // 2] == pytest.approx(ref, rel=1e-8)
    # the node closest to 0 lies within h/2, the value approaches 2/sqrt(pi)
    assert ref == pytest.approx(2 / np.sqrt(np.pi), rel=1e-3)


def test_frac_laplacian_zero(plan1, plan2):
    assert not fo.frac_laplacian(plan1, np.zeros(plan1.grid.shape), 0.3).any()
    assert not fo.frac_laplacian_quadrature(plan2.grid, np.zeros(plan2.grid.shape), 0.3).any()


def test_laplacian_vs_stencil():
    errs = []
    # the bump edge needs resolving before the h^2 regime sets in
    for N in (1024, 2048):
        g = default_grid(1, N)
        p = fo.FourierPlan(g)
        u = smooth_bump(g, [0.2], 1.5)
        d2 = (np.roll(u, 1) - 2 * u + np.roll(u, -1)) / g.h ** 2
        errs.append(np.max(np.abs(fo.laplacian(p, u) - d2)))
    assert errs[1] < errs[0] / 3.5  # second order


def test_laplacian_vs_five_point():
    errs = []
    for N in (64, 128):
        g = default_grid(2, N)
        p = fo.FourierPlan(g)
        u = gauss(g)
        d2 = sum(np.roll(u, 1, a) - 2 * u + np.roll(u, -1, a) for a in range(2)) / g.h ** 2
        errs.append(np.max(np.abs(fo.laplacian(p, u) - d2)))
    assert errs[1] < errs[0] / 3.5


def test_quadrature_cross_validation():
    errs = []
    for N in (256, 512, 1024):
        g = default_grid(1, N)
        u = smooth_bump(g, [0.3], 1.5)
        a = fo.frac_laplacian(fo.FourierPlan(g), u, 0.5)
        b = fo.frac_laplacian_quadrature(g, u, 0.5)
        errs.append(l2_norm(g, a - b) / l2_norm(g, a))
    assert errs[1] <= 2e-2
    assert errs[0] > errs[1] > errs[2]


def test_quadrature_sign_at_maximum(plan2):
    g = plan2.grid
    for s in (0.25, 0.75):
        u = smooth_bump(g, [0.0, 0.0], 1.0)
        out = fo.frac_laplacian_quadrature(g, u, s)
        assert out[np.unravel_index(np.argmax(u), u.shape)] > 0


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_riesz_hessian_trace(plan1, plan2, s):
    for p in (plan1, plan2):
        u = smooth_bump(p.grid, [0.2] * p.n, 1.2)
        H = fo.riesz_hessian(p, u, s)
        L = fo.frac_laplacian(p, u, s)
        assert np.max(np.abs(np.einsum("...ii->...", H) - L)) <= 1e-10 * np.max(np.abs(L))
        assert np.allclose(H, np.swapaxes(H, -1, -2), atol=1e-15)
    u = smooth_bump(plan1.grid, [0.0], 1.0)
    assert np.allclose(fo.riesz_hessian(plan1, u, s)[..., 0, 0], fo.frac_laplacian(plan1, u, s),
                       atol=1e-15, rtol=0)
    assert not fo.riesz_hessian(plan1, 0 * u, s).any()


def _curl_free_and_div_free(plan):
    g = plan.grid
    x = g.coords()
    psi = gauss(g)
    grad = -4 * x * psi[..., None]
    rot = np.stack([4 * x[..., 1] * psi, -4 * x[..., 0] * psi], axis=-1)
    return grad, rot


def test_helmholtz(plan2):
    grad, rot = _curl_free_and_div_free(plan2)
    gp, dp = fo.helmholtz(plan2, grad)
    assert np.linalg.norm(dp) <= 1e-10 * np.linalg.norm(grad)
    gp, dp = fo.helmholtz(plan2, rot)
    assert np.linalg.norm(gp) <= 1e-10 * np.linalg.norm(rot)
    u = grad + 0.3 * rot
    gp, dp = fo.helmholtz(plan2, u)
    assert np.allclose(gp + dp, u, rtol=0, atol=1e-15)


def test_prime_op_rows(plan2):
    grad, rot = _curl_free_and_div_free(plan2)
    w = np.stack([rot, rot], axis=-2)
    out = fo.prime_op(plan2, w, 0.5)
    assert np.allclose(out[..., 0, :], 6 * rot, atol=1e-9) and np.allclose(out[..., 1, :], 2 * rot, atol=1e-9)
    w = np.stack([grad, grad], axis=-2)
    out = fo.prime_op(plan2, w, 0.5)
    assert np.allclose(out[..., 0, :], 6 * grad, atol=1e-9) and np.allclose(out[..., 1, :], 4 * grad, atol=1e-9)
    assert not fo.prime_op(plan2, 0 * w, 0.5).any()


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_d_identities(plan1, plan2, s):
    rng = np.random.default_rng(3)
    for p in (plan1, plan2):
        w = p.pad(smooth_bump(p.grid, [0.1] * p.n, 1.5)[..., None, None] * rng.standard_normal((2, p.n)))
        pr = fo.prime_op(p, w, s)
        D = fo.d_op(p, w, s)
        assert np.max(np.abs(D + fo.laplacian(p, pr))) <= 1e-10 * np.max(np.abs(D))
        F = fo.frac_d_op(p, w, s)
        R = fo.frac_laplacian(p, pr, s)
        assert np.max(np.abs(F - R)) <= 1e-10 * np.max(np.abs(F))


def test_d_op_constant_and_1d_mu_row(plan1):
    c = np.ones(plan1.padded_shape + (2, 1))
    assert np.max(np.abs(fo.d_op(plan1, c, 0.5))) <= 1e-12
    w = np.zeros(plan1.grid.shape + (2, 1))
    w[..., 0, 0] = smooth_bump(plan1.grid, [0.0], 1.0)
    assert np.max(np.abs(fo.d_op(plan1, w, 0.4)[..., 0, :])) <= 1e-12
    assert np.max(np.abs(fo.frac_d_op(plan1, w, 0.4)[..., 0, :])) <= 1e-12


def test_semigroup(plan1):
    u = plan1.pad(smooth_bump(plan1.grid, [0.0], 1.0))
    a = fo.frac_laplacian(plan1, fo.frac_laplacian(plan1, u, 0.3), 0.45)
    b = fo.frac_laplacian(plan1, u, 0.75)
    assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(b))


def test_image_correction_matches_larger_box():
    # free-space value at a node should not depend on the box size
    small = default_grid(1, 512)
    big = type(small)(1, 16.0, 1024)
    us = smooth_bump(small, [0.0], 1.0)
    ub = smooth_bump(big, [0.0], 1.0)
    a = fo.frac_laplacian(fo.FourierPlan(small), us, 0.5)
    b = fo.frac_laplacian(fo.FourierPlan(big), ub, 0.5)[256:768]
    assert np.max(np.abs(a - b)) <= 1e-9 * np.max(np.abs(a))


def test_h_norm(plan1):
    g = plan1.grid
    u = smooth_bump(g, [0.0], 1.0)
    assert fo.h_norm(plan1, u, 0.0) == pytest.approx(l2_norm(g, u), rel=1e-8)
    vals = [fo.h_norm(plan1, u, r) for r in (0.0, 0.25, 0.5, 1.0)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_poincare_ratio_bounded(plan1):
    g = plan1.grid
    m = make_masks(g)
    rng = np.random.default_rng(4)
    ratios = []
    for _ in range(100):
        r = rng.uniform(0.1, 0.9)
        c = rng.uniform(-1 + r, 1 - r)
        u = smooth_bump(g, [c], r)
        assert not u[~m.omega].any()
        U = plan1.fft(plan1.pad(u))
        # |(-Delta)^{t/2} u|^2 carries |xi|^{2t}; here t = 0.2 and s = 0.5
        lo = np.sum(plan1.power(0.2) * np.abs(U) ** 2)
        hi = np.sum(plan1.power(0.5) * np.abs(U) ** 2)
        ratios.append(np.sqrt(lo / hi))
    assert np.isfinite(ratios).all() and max(ratios) < 10


def test_support_warning_and_error():
    g = default_grid(1, 64)
    u = np.ones(g.shape)
    with pytest.warns(fo.SupportWarning):
        fo.frac_laplacian(fo.FourierPlan(g), u, 0.5)
    with pytest.raises(fo.SupportError):
        fo.frac_laplacian(fo.FourierPlan(g, strict=True), u, 0.5)
