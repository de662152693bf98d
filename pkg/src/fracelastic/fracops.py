"""Fourier-multiplier and singular-integral fractional operators.

Multiplier operators act on zero-padded copies of grid fields.  Every
public operator accepts either a grid-shaped array (padded internally and
cropped on return) or an array already living on the padded lattice (kept
padded), which lets compositions stay exact multiplier products.

Pair-of-vector fields have shape ``spatial + (2, n)`` and pair-of-matrix
fields ``spatial + (2, n, n)``; the vector index is the axis right after
the pair axis, so matrices are acted on columnwise.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import mpmath
import numpy as np
import scipy.fft as sfft
from scipy import signal, special

from .gridfield import GridSpec


class SupportWarning(UserWarning):
    """Field has non-negligible values on the outer layer of the box."""


class SupportError(ValueError):
    pass


def cns(n: int, s: float) -> float:
    """Normalising constant ``4^s Gamma(n/2+s) / (pi^{n/2} |Gamma(-s)|)``."""
    if float(s).is_integer():
        raise ValueError(f"order must not be an integer, got s={s}")
    return float(4.0 ** s * special.gamma(n / 2 + s)
                 / (np.pi ** (n / 2) * abs(special.gamma(-s))))


def coefficients(n: int, s: float) -> tuple[float, float, float, float]:
    """Return ``(d1, d2, d3, d4)`` of the D and prime operators."""
    nprime = 2.0 * (n - 2) / n
    return 2 * n + 4 * s + nprime, 2 * nprime * s, float(n), 2.0 * n * s


def zeta_kernel(x, y, n: int, s: float) -> np.ndarray:
    """Two-point kernel ``(C^{1/2}/sqrt2) (x-y) / |x-y|^{n/2+s+1}``."""
    z = np.atleast_1d(np.asarray(x, float) - np.asarray(y, float))
    r = np.linalg.norm(z)
    if r == 0.0:
        raise ZeroDivisionError("zeta kernel is singular at x = y")
    return np.sqrt(cns(n, s) / 2.0) * z / r ** (n / 2 + s + 1)


@dataclass(eq=False)
class FourierPlan:
    """Zero-padded real FFT machinery for homogeneous multipliers."""

    grid: GridSpec
    pad_factor: int = 4
    strict: bool = False
    workers: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.pad_factor < 4:
            raise ValueError("pad factor must be at least 4")

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def P(self) -> int:
        return self.pad_factor * self.grid.N

    @property
    def padded_shape(self) -> tuple[int, ...]:
        return (self.P,) * self.n

    @cached_property
    def xi(self) -> list[np.ndarray]:
        """Broadcastable frequency components on the rfft lattice."""
        h, P, n = self.grid.h, self.P, self.n
        out = []
        for a in range(n):
            f = 2 * np.pi * (sfft.rfftfreq(P, h) if a == n - 1 else sfft.fftfreq(P, h))
            shape = [1] * n
            shape[a] = f.size
            out.append(f.reshape(shape))
        return out

    @cached_property
    def xi2(self) -> np.ndarray:
        return sum(x ** 2 for x in self.xi)

    def power(self, t: float) -> np.ndarray:
        """``|xi|^{2t}`` with the zero mode set to zero."""
        key = ("power", float(t))
        if key not in self._cache:
            with np.errstate(divide="ignore"):
                m = np.where(self.xi2 > 0, self.xi2 ** t, 0.0)
            self._cache[key] = m
        return self._cache[key]

    def projector(self, i: int, j: int) -> np.ndarray:
        """``xi_i xi_j / |xi|^2`` with the zero mode set to zero."""
        key = ("proj", i, j)
        if key not in self._cache:
            with np.errstate(invalid="ignore", divide="ignore"):
                m = np.where(self.xi2 > 0, self.xi[i] * self.xi[j] / self.xi2, 0.0)
            if i != j:
                # odd in xi_i: the Nyquist plane carries no sign, drop it
                m = np.where(self._nyquist(i) | self._nyquist(j), 0.0, m)
            self._cache[key] = np.broadcast_to(m, self.xi2.shape)
        return self._cache[key]

    def _nyquist(self, a: int) -> np.ndarray:
        idx = self.P // 2 if self.P % 2 == 0 else -1
        mask = np.zeros(self.xi[a].size, dtype=bool)
        if idx >= 0:
            mask[idx] = True
        return mask.reshape(self.xi[a].shape)

    # periodic images ----------------------------------------------------------
    def image_stencil(self, t: float) -> np.ndarray:
        """Sum over nonzero periods of the ``(-Delta)^t`` kernel, on node offsets.

        The padded transform realises the periodised kernel; subtracting
        this smooth sum restores the free-space operator on the grid.
        """
        key = ("img", float(t))
        if key not in self._cache:
            n, N, h = self.n, self.grid.N, self.grid.h
            L = self.P * h
            off = np.arange(-(N - 1), N, dtype=float) * h
            if n == 1:
                p = 1 + 2 * t
                S = L ** -p * (special.zeta(p, 1 + off / L) + special.zeta(p, 1 - off / L))
            else:
                S = self._lattice_images(off, lambda Z, r: r ** (-n - 2 * t),
                                         _unit_sphere_measure(n) / (2 * t), t)
            self._cache[key] = -cns(n, t) * S
        return self._cache[key]

    def image_tensor(self, s: float) -> np.ndarray:
        """Period sum of the kernel of ``|xi|^{2s-2} xi_i xi_j``, shape ``offsets + (n, n)``."""
        key = ("imgT", float(s))
        if key not in self._cache:
            n = self.n
            if n == 1:
                T = self.image_stencil(s)[..., None, None]
            else:
                N, h = self.grid.N, self.grid.h
                off = np.arange(-(N - 1), N, dtype=float) * h
                beta = 2 - 2 * s - n
                cp = special.gamma(n / 2 + s - 1) / (4 ** (1 - s) * np.pi ** (n / 2) * special.gamma(1 - s))
                eye = np.eye(n)

                def kern(Z, r):
                    zh = Z / r[..., None]
                    return (-cp * beta * r ** (beta - 2))[..., None, None] * (
                        eye + (beta - 2) * zh[..., :, None] * zh[..., None, :])

                far = -cns(n, s) * _unit_sphere_measure(n) / (2 * s) / n * eye
                T = self._lattice_images(off, kern, far, s, tensor=True)
            self._cache[key] = T
        return self._cache[key]

    def _lattice_images(self, off, kern, far, t, tensor=False, M: int = 8):
        """``sum_{m != 0, |m|_inf <= M} kern(z + mL)`` plus a continuum remainder."""
        n = self.n
        L = self.P * self.grid.h
        Z = np.stack(np.meshgrid(*([off] * n), indexing="ij"), axis=-1)
        acc = 0.0
        for m in np.ndindex(*([2 * M + 1] * n)):
            mv = np.array(m) - M
            if not mv.any():
                continue
            W = Z + mv * L
            acc = acc + kern(W, np.sqrt(np.sum(W ** 2, axis=-1)))
        R = (2 * M + 1) * L / np.sqrt(np.pi) if n == 2 else (M + 0.5) * L
        return acc + np.asarray(far) * R ** (-2 * t) / L ** n

    # padding ---------------------------------------------------------------
    def is_padded(self, u) -> bool:
        return np.shape(u)[: self.n] == self.padded_shape

    def pad(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.is_padded(u):
            return u
        if u.shape[: self.n] != self.grid.shape:
            raise ValueError(f"field shape {u.shape} does not match grid {self.grid.shape}")
        self.check_support(u)
        out = np.zeros(self.padded_shape + u.shape[self.n:])
        out[(slice(0, self.grid.N),) * self.n] = u
        return out

    def crop(self, u) -> np.ndarray:
        return np.ascontiguousarray(u[(slice(0, self.grid.N),) * self.n])

    def check_support(self, u) -> None:
        """Flag fields that reach the outermost layer of grid cells."""
        n = self.n
        peak = np.max(np.abs(u)) if u.size else 0.0
        if peak == 0.0:
            return
        edge = 0.0
        for a in range(n):
            for idx in (0, -1):
                sl = [slice(None)] * u.ndim
                sl[a] = idx
                edge = max(edge, float(np.max(np.abs(u[tuple(sl)]))))
        if edge > 1e-12 * peak:
            msg = f"field touches the box boundary (edge/peak = {edge / peak:.2e})"
            if self.strict:
                raise SupportError(msg)
            warnings.warn(msg, SupportWarning, stacklevel=3)

    # transforms ------------------------------------------------------------
    def fft(self, u: np.ndarray) -> np.ndarray:
        return sfft.rfftn(u, axes=tuple(range(self.n)), workers=self.workers)

    def ifft(self, U: np.ndarray) -> np.ndarray:
        n = self.n
        return sfft.irfftn(U, s=self.padded_shape, axes=tuple(range(n)), workers=self.workers)

    def apply(self, u, fn):
        """Apply ``fn`` to the spectrum of ``u`` and transform back."""
        padded = self.is_padded(u)
        U = self.fft(self.pad(u))
        out = self.ifft(fn(U))
        return out if padded else self.crop(out)


def _bcast(m: np.ndarray, extra: int) -> np.ndarray:
    return m.reshape(m.shape + (1,) * extra)


def frac_laplacian(plan: FourierPlan, u, t: float) -> np.ndarray:
    """``(-Delta)^t u`` componentwise; ``t`` may be negative (zero mode dropped).

    For ``0 < t < 1`` grid-shaped results are corrected for periodic images.
    """
    u = np.asarray(u, dtype=float)
    m = _bcast(plan.power(t), u.ndim - plan.n)
    out = plan.apply(u, lambda U: U * m)
    if 0 < t < 1 and not plan.is_padded(u):
        out -= plan.grid.cell_volume * grid_convolve(plan.grid, u, plan.image_stencil(t))
    return out


def laplacian(plan: FourierPlan, u) -> np.ndarray:
    """Spectral ``Delta u``."""
    return -frac_laplacian(plan, u, 1.0)


def riesz_hessian(plan: FourierPlan, u, s: float) -> np.ndarray:
    """Matrix field with entries ``F^{-1}(|xi|^{2s-2} xi_i xi_j u_hat)`` of a scalar field.

    This equals ``-(-Delta)^{s-1} d_i d_j u``; its trace is ``(-Delta)^s u``.
    """
    u = np.asarray(u, dtype=float)
    n = plan.n
    if u.ndim != n:
        raise ValueError("riesz_hessian expects a scalar field")
    w = plan.power(s)

    def fn(U):
        out = np.empty(U.shape + (n, n), dtype=U.dtype)
        for i in range(n):
            for j in range(i, n):
                out[..., i, j] = out[..., j, i] = U * w * plan.projector(i, j)
        return out

    out = plan.apply(u, fn)
    if not plan.is_padded(u):
        G = plan.image_tensor(s)
        for i in range(n):
            for j in range(n):
                out[..., i, j] -= plan.grid.cell_volume * grid_convolve(plan.grid, u, G[..., i, j])
    return out


def riesz_apply(plan: FourierPlan, f, s: float, vec_axis: int | None = None) -> np.ndarray:
    """``F^{-1}(|xi|^{2s} P f_hat)`` on a vector field; equals ``-(-Delta)^{s-1} grad div f``."""
    f = np.asarray(f, dtype=float)
    n = plan.n
    vec_axis = n if vec_axis is None else vec_axis
    w = plan.power(s)
    out = plan.apply(f, lambda U: _vector_multiplier(plan, U, vec_axis, 0.0, w))
    if not plan.is_padded(f):
        out -= _tensor_image(plan, f, s, vec_axis)
    return out


def _tensor_image(plan: FourierPlan, f, s, vec_axis):
    n = plan.n
    G = plan.image_tensor(s)
    fm = np.moveaxis(f, vec_axis, -1)
    corr = np.zeros_like(fm)
    for i in range(n):
        for j in range(n):
            corr[..., i] += grid_convolve(plan.grid, fm[..., j], G[..., i, j])
    return plan.grid.cell_volume * np.moveaxis(corr, -1, vec_axis)


def _vector_multiplier(plan: FourierPlan, U: np.ndarray, vec_axis: int, a, b) -> np.ndarray:
    """``(a Id + b xi xi^T/|xi|^2)`` applied along ``vec_axis`` of a spectrum.

    ``a`` and ``b`` are multipliers over the spatial lattice.
    """
    n = plan.n
    Um = np.moveaxis(U, vec_axis, -1)
    extra = Um.ndim - n - 1
    a = _bcast(np.broadcast_to(a, plan.xi2.shape), extra)
    out = np.empty_like(Um)
    for i in range(n):
        acc = a * Um[..., i]
        for j in range(n):
            acc = acc + _bcast(b * plan.projector(i, j), extra) * Um[..., j]
        out[..., i] = acc
    return np.moveaxis(out, -1, vec_axis)


def helmholtz(plan: FourierPlan, u) -> tuple[np.ndarray, np.ndarray]:
    """Split a vector field into gradient and divergence-free parts."""
    u = np.asarray(u, dtype=float)
    n = plan.n
    grad = plan.apply(u, lambda U: _vector_multiplier(plan, U, n, 0.0, 1.0))
    return grad, u - grad


def _pair_apply(plan: FourierPlan, w, s: float, radial: np.ndarray, order: float | None = None) -> np.ndarray:
    """Row-wise ``radial * (d_row Id + d'_row P)`` on a pair field.

    ``order`` names the homogeneity ``2*order`` of ``radial`` when a
    periodic-image correction applies to grid-shaped inputs.
    """
    w = np.asarray(w, dtype=float)
    n = plan.n
    d1, d2, d3, d4 = coefficients(n, s)
    coeffs = ((d1, d2), (d3, d4))

    def fn(U):
        out = np.empty_like(U)
        for row, (d, dp) in enumerate(coeffs):
            Ur = U[(slice(None),) * n + (row,)]
            out[(slice(None),) * n + (row,)] = _vector_multiplier(plan, Ur, n, d * radial, dp * radial)
        return out

    out = plan.apply(w, fn)
    if order is not None and not plan.is_padded(w):
        S = plan.image_stencil(order)
        for row, (d, dp) in enumerate(coeffs):
            wr = w[(slice(None),) * n + (row,)]
            corr = d * plan.grid.cell_volume * grid_convolve(plan.grid, wr, S)
            corr += dp * _tensor_image(plan, wr, order, n)
            out[(slice(None),) * n + (row,)] -= corr
    return out


def prime_op(plan: FourierPlan, w, s: float) -> np.ndarray:
    """``w'``: row ``r`` becomes ``(d_r + d'_r) gradPart + d_r divFreePart``."""
    one = np.ones_like(plan.xi2)
    return _pair_apply(plan, w, s, one)


def d_op(plan: FourierPlan, w, s: float) -> np.ndarray:
    """Second-order operator ``D``, row ``r``: ``-(d_r Lap + d'_r grad div)``."""
    return _pair_apply(plan, w, s, plan.power(1.0))


def frac_d_op(plan: FourierPlan, w, s: float) -> np.ndarray:
    """``(-Delta)^{s-1} D w`` as a single multiplier."""
    return _pair_apply(plan, w, s, plan.power(s), order=s)


def h_norm(plan: FourierPlan, u, r: float) -> float:
    """Bessel-potential norm ``||(1+|xi|^2)^{r/2} u_hat||`` on the padded lattice."""
    u = plan.pad(np.asarray(u, dtype=float))
    n = plan.n
    U = sfft.fftn(u, axes=tuple(range(n)), workers=plan.workers)
    h, P = plan.grid.h, plan.P
    xi2 = sum(np.meshgrid(*[(2 * np.pi * sfft.fftfreq(P, h)) ** 2] * n, indexing="ij")) \
        if n > 1 else (2 * np.pi * sfft.fftfreq(P, h)) ** 2
    wgt = _bcast((1.0 + xi2) ** r, u.ndim - n)
    return float(np.sqrt(np.sum(wgt * np.abs(U) ** 2) * h ** n / P ** n))


# singular-integral reference ----------------------------------------------------

def _unit_sphere_measure(n: int) -> float:
    return 2.0 * np.pi ** (n / 2) / special.gamma(n / 2)


def lattice_sum(n: int, s: float, h: float, R: float) -> float:
    """``sum |z|^{-n-2s}`` over nonzero lattice points ``z`` in ``hZ^n`` with ``|z| <= R``."""
    J = int(np.floor(R / h))
    if n == 1:
        j = np.arange(1, J + 1, dtype=float)
        return float(2.0 * np.sum((j * h) ** (-1 - 2 * s)))
    m = np.arange(-J, J + 1, dtype=float)
    r2 = m[:, None] ** 2 + m[None, :] ** 2
    sel = (r2 > 0) & (r2 <= (R / h) ** 2)
    return float(np.sum(r2[sel] ** (-(n + 2 * s) / 2)) * h ** (-n - 2 * s))


def tail_integral(n: int, s: float, R: float) -> float:
    """``int_{|z|>R} |z|^{-n-2s} dz``."""
    return _unit_sphere_measure(n) * R ** (-2 * s) / (2 * s)


def _epstein_square(t: float) -> float:
    """Continued ``sum_{m in Z^2, m != 0} |m|^{-2t}`` (equals ``4 zeta(t) beta(t)``)."""
    return float(4 * mpmath.zeta(t) * mpmath.dirichlet(t, [0, 1, 0, -1]))


def _ewald_harmonic4(t: float, cut: int = 8) -> float:
    """``sum_{m != 0} Re(m1 + i m2)^4 |m|^{-2t}`` on the square lattice by Ewald splitting."""
    m = np.arange(-cut, cut + 1, dtype=float)
    m1, m2 = np.meshgrid(m, m, indexing="ij")
    r2 = m1 ** 2 + m2 ** 2
    sel = r2 > 0
    P = (m1 ** 4 - 6 * m1 ** 2 * m2 ** 2 + m2 ** 4)[sel]
    x = np.pi * r2[sel]
    a, b = t, 4 + 1 - t
    terms = P * (x ** -a * special.gammaincc(a, x) * special.gamma(a)
                 + x ** -b * special.gammaincc(b, x) * special.gamma(b))
    return float(np.sum(terms) * np.pi ** t / special.gamma(t))


def lattice_moments(n: int, s: float) -> tuple[float, float, float]:
    """Zeta-regularised lattice moments of the singular kernel.

    Returns ``(m2, a4, b4)`` where ``m2 = sum' m_1^2 |m|^{-n-2s}``,
    ``a4 = sum' m_1^4 |m|^{-n-2s-2}`` and ``b4 = sum' m_1^2 m_2^2 |m|^{-n-2s-2}``,
    all understood by analytic continuation in ``s``.
    """
    if n == 1:
        m2 = float(2 * mpmath.zeta(2 * s - 1))
        return m2, m2, 0.0
    Z = _epstein_square(s)
    H = _ewald_harmonic4(s + 2)
    return 0.5 * Z, 3 * Z / 8 + H / 8, Z / 8 - H / 8


def cell_moment(n: int, s: float, h: float) -> float:
    """Weight of the singular cell: ``-h^{2-2s} m2`` (Taylor term of the lattice defect)."""
    return -h ** (2 - 2 * s) * lattice_moments(n, s)[0]


def kernel_stencil(grid: GridSpec, s: float, power: float | None = None) -> np.ndarray:
    """``|z|^{-power}`` on all offsets ``z`` between grid nodes (zero at the origin).

    The returned array has ``2N-1`` entries per axis, centred at index ``N-1``.
    """
    n, N, h = grid.n, grid.N, grid.h
    power = n + 2 * s if power is None else power
    off = np.arange(-(N - 1), N, dtype=float) * h
    z2 = sum(np.meshgrid(*([off ** 2] * n), indexing="ij")) if n > 1 else off ** 2
    with np.errstate(divide="ignore"):
        k = np.where(z2 > 0, z2 ** (-power / 2), 0.0)
    return k


def grid_convolve(grid: GridSpec, u: np.ndarray, stencil: np.ndarray) -> np.ndarray:
    """``(stencil * u)(x) = sum_y stencil[x - y] u(y)`` for nodes ``x`` of the grid."""
    n, N = grid.n, grid.N
    stencil = stencil.reshape(stencil.shape + (1,) * (u.ndim - n))
    full = signal.fftconvolve(u, stencil, mode="full", axes=tuple(range(n)))
    return full[(slice(N - 1, 2 * N - 1),) * n]


def neighbour_laplacian(u: np.ndarray, n: int, h: float) -> np.ndarray:
    """Second-difference Laplacian with zero values outside the grid."""
    out = -2.0 * n * u
    for a in range(n):
        up = np.zeros_like(u)
        dn = np.zeros_like(u)
        sl = [slice(None)] * u.ndim
        sl_src = [slice(None)] * u.ndim
        sl[a], sl_src[a] = slice(0, -1), slice(1, None)
        up[tuple(sl)] = u[tuple(sl_src)]
        dn[tuple(sl_src)] = u[tuple(sl)]
        out = out + up + dn
    return out / h ** 2


def default_radius(grid: GridSpec) -> float:
    """Cut-off radius enclosing the box from every node."""
    return 2.0 * grid.half_width * np.sqrt(grid.n)


def frac_laplacian_quadrature(grid: GridSpec, u, s: float, R: float | None = None) -> np.ndarray:
    """Singular-sum reference for ``(-Delta)^s`` on a scalar field.

    Off-diagonal cells use the midpoint rule, the singular cell a
    second-order Taylor estimate, and the far field beyond ``R`` a
    closed-form tail.  ``u`` is taken to vanish outside the grid.
    """
    u = np.asarray(u, dtype=float)
    n, h = grid.n, grid.h
    R = default_radius(grid) if R is None else R
    total = h ** n * lattice_sum(n, s, h, R) + tail_integral(n, s, R)
    conv = h ** n * grid_convolve(grid, u, kernel_stencil(grid, s))
    corr = -0.5 * cell_moment(n, s, h) * neighbour_laplacian(u, n, h)
    return cns(n, s) * (u * total - conv + corr)
