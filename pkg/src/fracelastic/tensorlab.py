"""Exact tensor algebra for isotropic elasticity.

Tensors are plain :class:`numpy.ndarray` objects.  Rank-4 stiffness-like
tensors are stored densely since ``n <= 3``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when Lamé parameters violate positivity."""


@dataclass(frozen=True)
class IsotropicParams:
    """Lamé pair ``(L, M)`` in dimension ``n``."""

    n: int
    L: float
    M: float

    @property
    def K(self) -> float:
        return self.L + 2.0 * self.M / self.n

    def check(self) -> None:
        if not self.M > 0:
            raise DomainError(f"shear parameter must be positive, got M={self.M}")
        if not self.K > 0:
            raise DomainError(f"bulk-like modulus K=L+2M/n must be positive, got K={self.K}")


@dataclass(frozen=True)
class SqrtParams:
    """Lamé-like parameters ``(lambda, mu, k)`` of the square-root tensor."""

    lam: float
    mu: float
    k: float


def tensor_product(A, B) -> np.ndarray:
    """Outer product with shape ``A.shape + B.shape``."""
    return np.multiply.outer(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def contract(A, B, k: int) -> np.ndarray:
    """Contract the last ``k`` indices of ``A`` with the first ``k`` of ``B``.

    Raises
    ------
    ValueError
        If the shared extents disagree.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if k < 1 or k > A.ndim or k > B.ndim:
        raise ValueError(f"cannot contract {k} indices of ranks {A.ndim} and {B.ndim}")
    if A.shape[A.ndim - k:] != B.shape[:k]:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape} over {k} indices")
    return np.tensordot(A, B, axes=k)


def _isotropic(n: int, a: float, b: float) -> np.ndarray:
    d = np.eye(n)
    return (a * np.einsum("ij,lm->ijlm", d, d)
            + b * (np.einsum("il,jm->ijlm", d, d) + np.einsum("im,jl->ijlm", d, d)))


def isotropic_stiffness(p: IsotropicParams) -> np.ndarray:
    """Rank-4 tensor ``L d_ij d_lm + M (d_il d_jm + d_im d_jl)``."""
    return _isotropic(p.n, p.L, p.M)


def sqrt_lame(p: IsotropicParams) -> SqrtParams:
    """Lamé parameters of the positive square root of the stiffness tensor."""
    p.check()
    n = p.n
    mu = np.sqrt(p.M / 2.0)
    lam = (np.sqrt(2.0 * p.M + n * p.L) - np.sqrt(2.0 * p.M)) / n
    return SqrtParams(lam=float(lam), mu=float(mu), k=float(lam + 2.0 * mu / n))


def sqrt_stiffness(p: IsotropicParams) -> np.ndarray:
    """Rank-4 tensor ``C^{1/2}`` built from :func:`sqrt_lame`."""
    sp = sqrt_lame(p)
    return _isotropic(p.n, sp.lam, sp.mu)


def two_point_coeffs(sx: SqrtParams, sy: SqrtParams, n: int) -> tuple[float, float]:
    """Coefficients of ``C^{1/2}(x) : C^{1/2}(y)``.

    Returns ``(cTr, cSym)`` where ``cTr`` multiplies ``d_ij d_lm`` and
    ``cSym`` multiplies each of ``d_il d_jm`` and ``d_im d_jl``.
    Works elementwise on array-valued parameters.
    """
    # grouped so that swapping x and y gives bit-identical results
    c_tr = n * (sx.lam * sy.lam) + 2.0 * (sx.lam * sy.mu + sy.lam * sx.mu)
    c_sym = 2.0 * (sx.mu * sy.mu)
    return c_tr, c_sym


def two_point_tensor(sx: SqrtParams, sy: SqrtParams, n: int) -> np.ndarray:
    c_tr, c_sym = two_point_coeffs(sx, sy, n)
    return _isotropic(n, c_tr, c_sym)


def compliance(p: IsotropicParams) -> np.ndarray:
    """Isotropic compliance ``d_il d_jm / (2M) - L d_ij d_lm / (2nMK)``."""
    p.check()
    d = np.eye(p.n)
    return (np.einsum("il,jm->ijlm", d, d) / (2.0 * p.M)
            - p.L * np.einsum("ij,lm->ijlm", d, d) / (2.0 * p.n * p.M * p.K))


def poisson_ratio(p: IsotropicParams) -> float:
    return p.L / ((p.n - 1) * p.L + 2.0 * p.M)


def lame_from_poisson(M, nu, n: int):
    """First Lamé parameter giving Poisson ratio ``nu`` at shear ``M``."""
    return M * 2.0 * nu / (1.0 - (n - 1) * nu)


# product rules -------------------------------------------------------------------

def poly_field(rng: np.random.Generator, shape: tuple, dim: int):
    """Random cubic polynomial ``R^dim -> R^shape`` (returns a callable)."""
    c = [rng.standard_normal(shape + (dim,) * d) for d in range(4)]

    def f(x):
        x = np.asarray(x, dtype=float)
        out = c[0].copy()
        for d in range(1, 4):
            t = c[d]
            for _ in range(d):
                t = t @ x
            out = out + t
        return out

    return f


def grad_fd(f, x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient with the derivative index first, ``(grad v)_ij = d_i v_j``."""
    x = np.asarray(x, dtype=float)
    parts = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        parts.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(parts)


def div_fd(f, x, h: float = 1e-4) -> np.ndarray:
    """Divergence over the first index: ``(div B)_j = d_i B_ij``."""
    G = grad_fd(f, x, h)
    return np.einsum("ii...->...", G)


def product_identities(rng: np.random.Generator, dim: int = 3, h: float = 1e-4) -> dict:
    """Largest entrywise error of each product/contraction rule on random tensors.

    Items ``i``-``iv`` are algebraic; ``v``-``vii`` use cubic fields and
    central differences at one random point.
    """
    r = lambda *s: rng.standard_normal(s)
    err = {}
    A, B, C = r(2, 3), r(4, 2), r(4, 2)
    err["i"] = np.max(np.abs(contract(tensor_product(A, B), C, 2)
                             - contract(tensor_product(A, C), B, 2)))
    A, B, C = r(2, 3, 4), r(3, 4, 2), r(5, 2)
    err["ii"] = np.max(np.abs(contract(A, tensor_product(B, C), 2)
                              - tensor_product(contract(A, B, 2), C)))
    A, B, C = r(2, 3), r(3, 4, 5, 2), r(5, 2, 3)
    err["iii"] = np.max(np.abs(contract(contract(A, B, 1), C, 2)
                               - contract(A, contract(B, C, 2), 1)))
    A, B, C = r(2, 3, 4, 5), r(3, 4), r(5,)
    err["iv"] = np.max(np.abs(contract(A, tensor_product(B, C), 3)
                              - contract(contract(A, C, 1), B, 2)))
    x = 0.5 * r(dim) / np.sqrt(dim)
    a = poly_field(rng, (1,), dim)
    b = poly_field(rng, (dim, 2), dim)
    lhs = grad_fd(lambda y: tensor_product(a(y), b(y)), x, h)
    rhs = tensor_product(grad_fd(a, x, h), b(x)) + np.moveaxis(
        tensor_product(a(x), grad_fd(b, x, h)), 0, 1)
    err["v"] = np.max(np.abs(lhs - rhs))
    p = poly_field(rng, (dim, 2), dim)
    q = poly_field(rng, (dim, 2), dim)
    lhs = grad_fd(lambda y: contract(p(y), q(y), 2), x, h)
    rhs = contract(grad_fd(p, x, h), q(x), 2) + contract(grad_fd(q, x, h), p(x), 2)
    err["vi"] = np.max(np.abs(lhs - rhs))
    m = poly_field(rng, (dim, dim), dim)
    G = grad_fd(lambda y: tensor_product(a(y), m(y)), x, h)
    lhs = np.einsum("iaij->aj", G)
    rhs = tensor_product(a(x), div_fd(m, x, h)) + contract(m(x).T, grad_fd(a, x, h), 1).T
    err["vii"] = np.max(np.abs(lhs - rhs))
    return {k: float(v) for k, v in err.items()}
