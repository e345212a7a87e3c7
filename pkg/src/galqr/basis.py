"""B-spline basis, quadrature inner products, and the difference penalty.

Curves observed on a common grid are turned into coefficient vectors by
quadrature inner products with the basis functions (trapezoid rule on the
observation grid), matching the integral definition of the functional
scores. The roughness penalty is the usual second-order difference penalty
P = D'D of Bayesian P-splines.

Note on the functional coefficient: the coefficient vector ``phi`` is
interpreted as the spline coefficients of beta(t) = sum_k phi_k b_k(t).
Under that reading the scalar regression term sum_k phi_k X_{ik} with
X_{ik} = integral b_k X equals integral beta(t) X(t) dt identically; the
alternative reading of phi as basis projections of beta would only coincide
for an orthonormal basis (the Gram matrix is exposed for that discussion).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

__all__ = ["BasisSystem", "CoefCurve", "build_basis", "project_curve",
           "linear_functional_row", "eval_beta"]


def _trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    w = np.zeros_like(grid)
    d = np.diff(grid)
    w[:-1] += d / 2.0
    w[1:] += d / 2.0
    return w


def second_difference_penalty(k: int) -> np.ndarray:
    """P = D'D for the (k-2) x k second-order difference matrix D."""
    d = np.diff(np.eye(k), 2, axis=0)
    return d.T @ d


@dataclass(frozen=True)
class BasisSystem:
    """Immutable basis bundle: evaluations, quadrature weights, penalty."""

    grid: np.ndarray
    degree: int
    K_n: int
    knots: np.ndarray
    basis_matrix: np.ndarray      # T x K_n
    quad_weights: np.ndarray      # length T
    penalty: np.ndarray           # K_n x K_n

    @property
    def T(self) -> int:
        return self.grid.size

    @property
    def gram(self) -> np.ndarray:
        """Quadrature Gram matrix integral b_k b_l (cached)."""
        if "_gram" not in self.__dict__:
            g = self.basis_matrix.T @ (self.quad_weights[:, None] * self.basis_matrix)
            object.__setattr__(self, "_gram", g)
        return self.__dict__["_gram"]

    def design(self, x):
        """Evaluate the basis at new points inside the knot span."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.knots[self.degree], self.knots[-self.degree - 1]
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            raise ValueError("evaluation points outside the knot span")
        return BSpline.design_matrix(
            np.clip(x, lo, hi), self.knots, self.degree
        ).toarray()


@dataclass
class CoefCurve:
    """Spline-coefficient representation of a functional coefficient."""

    coefs: np.ndarray
    basis: BasisSystem

    def __post_init__(self):
        self.coefs = np.asarray(self.coefs, dtype=float)
        if self.coefs.shape != (self.basis.K_n,):
            raise ValueError("coefficient length must match the basis size")
        if not np.all(np.isfinite(self.coefs)):
            raise ValueError("coefficients must be finite")


def build_basis(grid, K_n: int, degree: int = 3) -> BasisSystem:
    """Open-uniform (clamped) B-spline basis on the grid span.

    Requires T >= K_n >= degree + 1; with K_n = degree + 1 the basis reduces
    to the Bernstein polynomials. Rows of the evaluation matrix sum to one
    (partition of unity) and the attached penalty has rank K_n - 2.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with T >= 2")
    if K_n < degree + 1:
        raise ValueError(f"K_n = {K_n} too small for degree {degree}")
    if K_n > grid.size:
        raise ValueError(f"K_n = {K_n} exceeds the number of grid points")
    a, b = grid[0], grid[-1]
    n_interior = K_n - degree - 1
    interior = np.linspace(a, b, n_interior + 2)[1:-1]
    knots = np.concatenate([np.full(degree + 1, a), interior, np.full(degree + 1, b)])
    bmat = BSpline.design_matrix(grid, knots, degree).toarray()
    return BasisSystem(
        grid=grid,
        degree=degree,
        K_n=K_n,
        knots=knots,
        basis_matrix=bmat,
        quad_weights=_trapezoid_weights(grid),
        penalty=second_difference_penalty(K_n),
    )


def project_curve(values, basis: BasisSystem) -> np.ndarray:
    """Quadrature inner products integral b_k(t) f(t) dt of a gridded curve.

    Accepts a single length-T curve or a stack (..., T); returns (..., K_n).
    This is the integral projection, not a least-squares fit.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != basis.T:
        raise ValueError(
            f"curve length {values.shape[-1]} does not match grid size {basis.T}"
        )
    return values @ (basis.quad_weights[:, None] * basis.basis_matrix)


def linear_functional_row(basis: BasisSystem) -> np.ndarray:
    """Row r with r_k = integral b_k(t) dt, so r @ phi = integral beta(t) dt."""
    return basis.quad_weights @ basis.basis_matrix


def eval_beta(curve: CoefCurve, tgrid=None) -> np.ndarray:
    """Evaluate beta(t) = sum_k phi_k b_k(t) on a grid (default: basis grid)."""
    if tgrid is None:
        return curve.basis.basis_matrix @ curve.coefs
    return curve.basis.design(tgrid) @ curve.coefs
