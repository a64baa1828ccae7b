"""Cubic B-spline basis: evaluation, second derivatives, roughness penalty.

Evaluation goes through scipy's spline machinery with unit coefficient
vectors; the roughness penalty R = integral of B''(u) B''(u)^T is assembled
exactly with two-point Gauss-Legendre per knot interval, which is exact
because second derivatives of cubic splines are piecewise linear.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import splev

__all__ = [
    "BSplineBasis",
    "eval_basis",
    "eval_basis_dd",
    "basis_matrix",
    "basis_matrix_dd",
    "penalty_matrix",
    "greville_abscissae",
]

ORDER = 4  # cubic


@dataclass(frozen=True, eq=False)
class BSplineBasis:
    """Cubic B-spline basis on [0, 1] with 4-fold endpoint knots."""

    interior_knots: np.ndarray

    def __post_init__(self):
        ik = np.atleast_1d(np.asarray(self.interior_knots, dtype=float))
        if ik.size and (np.any(ik <= 0.0) or np.any(ik >= 1.0)):
            raise ValueError("interior knots must lie strictly inside (0, 1)")
        if np.any(np.diff(ik) < 0):
            raise ValueError("interior knots must be non-decreasing")
        object.__setattr__(self, "interior_knots", ik)

    @classmethod
    def cubic(cls, n_interior: int = 2) -> "BSplineBasis":
        """Equally spaced interior knots; the application default is 2 (K=6)."""
        if n_interior < 0:
            raise ValueError("n_interior must be >= 0")
        knots = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
        return cls(interior_knots=knots)

    @property
    def dimension(self) -> int:
        return self.interior_knots.size + ORDER

    @cached_property
    def knots(self) -> np.ndarray:
        """Full knot vector with endpoint multiplicity 4."""
        return np.concatenate(
            [np.zeros(ORDER), self.interior_knots, np.ones(ORDER)]
        )

    @cached_property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot spans: 0, interior knots, 1."""
        return np.concatenate([[0.0], np.unique(self.interior_knots), [1.0]])

    def to_dict(self) -> dict:
        return {"interior_knots": self.interior_knots.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "BSplineBasis":
        return cls(interior_knots=np.asarray(data["interior_knots"], dtype=float))


def _check_domain(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("evaluation points must lie in [0, 1]")
    return u


def basis_matrix(basis: BSplineBasis, points) -> np.ndarray:
    """Evaluate all basis functions at the given points; shape (m, K)."""
    u = _check_domain(np.atleast_1d(points))
    k = basis.dimension
    out = np.empty((u.size, k))
    coef = np.zeros(k)
    for j in range(k):
        coef[j] = 1.0
        out[:, j] = splev(u, (basis.knots, coef, ORDER - 1))
        coef[j] = 0.0
    return out


def basis_matrix_dd(basis: BSplineBasis, points) -> np.ndarray:
    """Second derivatives of all basis functions at the given points."""
    u = _check_domain(np.atleast_1d(points))
    k = basis.dimension
    out = np.empty((u.size, k))
    coef = np.zeros(k)
    for j in range(k):
        coef[j] = 1.0
        out[:, j] = splev(u, (basis.knots, coef, ORDER - 1), der=2)
        coef[j] = 0.0
    return out


def eval_basis(basis: BSplineBasis, u: float) -> np.ndarray:
    """Basis values at one point: non-negative, summing to 1."""
    return basis_matrix(basis, [u])[0]


def eval_basis_dd(basis: BSplineBasis, u: float) -> np.ndarray:
    """Second-derivative values at one point; they sum to ~0."""
    return basis_matrix_dd(basis, [u])[0]


# 2-point Gauss-Legendre nodes on [-1, 1]; exact for cubics, hence exact for
# products of the piecewise-linear second derivatives.
_GL_NODES = np.array([-1.0, 1.0]) / np.sqrt(3.0)


def penalty_matrix(basis: BSplineBasis) -> np.ndarray:
    """Roughness penalty R with entries integral of B_i''(u) B_j''(u) du."""
    k = basis.dimension
    r = np.zeros((k, k))
    bp = basis.breakpoints
    for a, b in zip(bp[:-1], bp[1:]):
        half = (b - a) / 2.0
        mid = (a + b) / 2.0
        for node in _GL_NODES:
            dd = eval_basis_dd(basis, mid + half * node)
            r += half * np.outer(dd, dd)
    return (r + r.T) / 2.0


def greville_abscissae(basis: BSplineBasis) -> np.ndarray:
    """Coefficients that reproduce the identity u -> u on [0, 1]."""
    t = basis.knots
    k = basis.dimension
    return np.array([t[j + 1 : j + ORDER].mean() for j in range(k)])
