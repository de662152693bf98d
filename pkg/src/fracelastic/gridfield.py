"""Uniform cell-centred grids, region masks and synthetic Lamé fields.

Field arrays carry the spatial axes first, followed by component axes:
``(N,)*n`` for scalars, ``(N,)*n + (n,)`` for vectors, ``(N,)*n + (n, n)``
for matrices, and a leading pair axis of length 2 after the spatial axes
for the stacked ``(mu-row, k-row)`` objects of the reduced problem.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensorlab import DomainError, IsotropicParams, sqrt_lame


class GeometryError(ValueError):
    """Raised for inconsistent grids, regions or bump supports."""


@dataclass(frozen=True)
class GridSpec:
    """Cell-centred grid on ``[-half_width, half_width]**n``."""

    n: int
    half_width: float
    N: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise GeometryError(f"dimension must be 1 or 2, got {self.n}")
        if self.N < 16 or self.N % 2:
            raise GeometryError(f"points per axis must be even and >= 16, got {self.N}")
        if not self.half_width > 0:
            raise GeometryError("half width must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.n

    @property
    def cell_volume(self) -> float:
        return self.h ** self.n

    @property
    def axis(self) -> np.ndarray:
        return -self.half_width + (np.arange(self.N) + 0.5) * self.h

    def coords(self) -> np.ndarray:
        """Node coordinates with shape ``shape + (n,)``."""
        axes = np.meshgrid(*([self.axis] * self.n), indexing="ij")
        return np.stack(axes, axis=-1)

    def to_dict(self) -> dict:
        return {"dimension": self.n, "halfWidth": self.half_width, "pointsPerAxis": self.N}


# region shapes ----------------------------------------------------------------

def region_mask(grid: GridSpec, spec: dict) -> np.ndarray:
    """Boolean node mask for a ``box`` or ``ball`` region description."""
    x = grid.coords()
    kind = spec.get("kind", "box")
    if kind == "box":
        lo = np.broadcast_to(np.asarray(spec["lo"], float), (grid.n,))
        hi = np.broadcast_to(np.asarray(spec["hi"], float), (grid.n,))
        return np.all((x > lo) & (x < hi), axis=-1)
    if kind == "ball":
        c = np.broadcast_to(np.asarray(spec["center"], float), (grid.n,))
        return np.sum((x - c) ** 2, axis=-1) < float(spec["radius"]) ** 2
    raise GeometryError(f"unknown region kind {kind!r}")


@dataclass(frozen=True)
class RegionMasks:
    omega: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        for name in ("omega", "w1", "w2"):
            if not getattr(self, name).any():
                raise GeometryError(f"region {name} contains no nodes")
        if (self.omega & self.w1).any() or (self.omega & self.w2).any():
            raise GeometryError("W1 and W2 must lie in the exterior of omega")
        if (self.w1 & self.w2).any():
            raise GeometryError("W1 and W2 must be disjoint")

    @property
    def exterior(self) -> np.ndarray:
        return ~self.omega


def default_regions(n: int) -> dict:
    if n == 1:
        return {
            "omega": {"kind": "box", "lo": [-1.0], "hi": [1.0]},
            "w1": {"kind": "box", "lo": [-3.0], "hi": [-2.0]},
            "w2": {"kind": "box", "lo": [2.0], "hi": [3.0]},
        }
    return {
        "omega": {"kind": "box", "lo": [-1.0, -1.0], "hi": [1.0, 1.0]},
        "w1": {"kind": "ball", "center": [-2.5, 0.0], "radius": 0.8},
        "w2": {"kind": "ball", "center": [2.5, 0.0], "radius": 0.8},
    }


def default_grid(n: int, N: int) -> GridSpec:
    return GridSpec(n, 8.0 if n == 1 else 4.0, N)


def make_masks(grid: GridSpec, regions: dict | None = None) -> RegionMasks:
    regions = regions or default_regions(grid.n)
    return RegionMasks(*(region_mask(grid, regions[k]) for k in ("omega", "w1", "w2")))


# fields -------------------------------------------------------------------------

def smooth_bump(grid: GridSpec, center, radius: float, amplitude: float = 1.0) -> np.ndarray:
    """C-infinity bump ``amplitude * exp(1 - 1/(1 - |x-c|^2/r^2))``, exactly zero outside."""
    c = np.broadcast_to(np.asarray(center, float), (grid.n,))
    if np.any(np.abs(c) + radius > grid.half_width):
        raise GeometryError(f"bump support (center {c}, radius {radius}) leaves the box")
    t = np.sum((grid.coords() - c) ** 2, axis=-1) / radius ** 2
    out = np.zeros(grid.shape)
    inside = t < 1.0
    out[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - t[inside]))
    return out


def l2_inner(grid: GridSpec, u, v) -> float:
    """Discrete L2 pairing ``h^n * sum(u * v)`` over all nodes and components."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    return float(grid.cell_volume * np.sum(u * v))


def l2_norm(grid: GridSpec, u) -> float:
    return np.sqrt(l2_inner(grid, u, u))


def restrict(u, mask) -> np.ndarray:
    """Zero ``u`` outside the node mask; component axes are kept."""
    u = np.asarray(u, dtype=float)
    m = np.asarray(mask, dtype=bool)
    return u * m.reshape(m.shape + (1,) * (u.ndim - m.ndim))


def extend_by_zero(values, mask) -> np.ndarray:
    """Place per-node ``values`` (ordered like ``u[mask]``) onto the full grid."""
    m = np.asarray(mask, dtype=bool)
    values = np.asarray(values, dtype=float)
    out = np.zeros(m.shape + values.shape[1:])
    out[m] = values
    return out


@dataclass(frozen=True)
class Bump:
    center: tuple
    radius: float
    amplitude: float

    @classmethod
    def from_dict(cls, d: dict) -> "Bump":
        c = d["center"]
        return cls(tuple(np.atleast_1d(np.asarray(c, float))), float(d["radius"]), float(d["amplitude"]))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius, "amplitude": self.amplitude}


@dataclass(frozen=True, eq=False)
class LameField:
    """Lamé pair on a grid with its square-root parameters.

    ``L`` and ``M`` are full nodal arrays equal to ``L0``/``M0`` outside
    ``masks.omega``.  Derived arrays follow from :func:`sqrt_lame` nodewise.
    """

    grid: GridSpec
    masks: RegionMasks
    L0: float
    M0: float
    L: np.ndarray
    M: np.ndarray
    epsilon: float = 0.5
    bumps: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.grid.n
        IsotropicParams(n, self.L0, self.M0).check()
        ext = self.masks.exterior
        if np.any(self.L[ext] != self.L0) or np.any(self.M[ext] != self.M0):
            raise GeometryError("Lamé perturbations must vanish outside omega")
        K = self.L + 2.0 * self.M / n
        K0 = self.L0 + 2.0 * self.M0 / n
        for name, val, floor in (("M", self.M, 0.1 * self.M0), ("K", K, 0.1 * K0)):
            bad = np.argwhere(val < floor)
            if bad.size:
                idx = tuple(bad[0])
                raise DomainError(
                    f"{name}={val[idx]:.6g} below floor {floor:.6g} at node {idx}")

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def K(self) -> np.ndarray:
        return self.L + 2.0 * self.M / self.n

    @property
    def K0(self) -> float:
        return self.L0 + 2.0 * self.M0 / self.n

    @property
    def mu(self) -> np.ndarray:
        return np.sqrt(self.M / 2.0)

    @property
    def lam(self) -> np.ndarray:
        n = self.n
        return (np.sqrt(2.0 * self.M + n * self.L) - np.sqrt(2.0 * self.M)) / n

    @property
    def k(self) -> np.ndarray:
        return self.lam + 2.0 * self.mu / self.n

    @property
    def mu0(self) -> float:
        return sqrt_lame(IsotropicParams(self.n, self.L0, self.M0)).mu

    @property
    def k0(self) -> float:
        return sqrt_lame(IsotropicParams(self.n, self.L0, self.M0)).k

    @property
    def nu(self) -> np.ndarray:
        return self.L / ((self.n - 1) * self.L + 2.0 * self.M)

    @property
    def gamma(self) -> np.ndarray:
        """Pair field ``(mu, k)`` with the pair axis last."""
        return np.stack([self.mu, self.k], axis=-1)

    @property
    def gamma0(self) -> np.ndarray:
        return np.array([self.mu0, self.k0])

    def with_M(self, M: np.ndarray, nu=None) -> "LameField":
        """Copy with a new shear field; ``L`` follows a fixed Poisson ratio."""
        from .tensorlab import lame_from_poisson

        nu = self.nu if nu is None else nu
        L = lame_from_poisson(M, nu, self.n)
        L = np.where(self.masks.omega, L, self.L0)
        M = np.where(self.masks.omega, M, self.M0)
        return LameField(self.grid, self.masks, self.L0, self.M0, L, M, self.epsilon)


def make_lame_field(grid: GridSpec, masks: RegionMasks, L0: float, M0: float,
                    bumps_L: Sequence[Bump] = (), bumps_M: Sequence[Bump] = (),
                    epsilon: float = 0.5) -> LameField:
    """Constant background plus smooth bumps, each supported inside omega."""
    fields = {}
    for name, base, bumps in (("L", L0, bumps_L), ("M", M0, bumps_M)):
        arr = np.full(grid.shape, float(base))
        for b in bumps:
            bump = smooth_bump(grid, b.center, b.radius, b.amplitude)
            if np.any((bump != 0) & masks.exterior):
                raise GeometryError(f"{name}-bump at {b.center} is not supported in omega")
            arr += bump
        fields[name] = arr
    return LameField(grid, masks, float(L0), float(M0), fields["L"], fields["M"], epsilon,
                     {"L": list(bumps_L), "M": list(bumps_M)})
