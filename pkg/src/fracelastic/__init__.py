"""Isotropic fractional elasticity: operators, Dirichlet/DN solvers and inversion."""

__version__ = "0.1.0"
