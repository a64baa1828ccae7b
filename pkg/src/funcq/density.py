"""Step samples to densities, quantile functions, and LQD actions.

A 90-day window of daily step counts becomes a kernel density estimate, then
a quantile function q(p), then the unconstrained log-quantile-density curve
a(p) = -log f(q(p)) used as the functional action. The inverse direction
rebuilds q via q(p) = q(0) + integral_0^p exp(a(u)) du, which needs the
stored support anchor q(0).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import Grid, GridFunction

__all__ = [
    "StepSample",
    "DensityEstimate",
    "QuantileFunction",
    "LqdFunction",
    "kde",
    "quantile_from_density",
    "trim_support",
    "lqd_forward",
    "lqd_inverse",
    "mean_steps",
    "anchor_from_neighbors",
]

# Cleaning bounds for daily steps; see the ingest pipeline.
STEP_FLOOR = 100.0
STEP_CEIL = 22_300.0

DENSITY_FLOOR = 1e-8
LQD_CAP = 30.0
KDE_GRID_SIZE = 512

# Relative level (fraction of the modal density) below which support tails
# are trimmed before quantile/LQD transforms. The quantile slope 1/f(q(p))
# is unbounded where f vanishes, which breaks trapezoid inversion at desk
# grid resolution; tails this thin are KDE artifacts at window sample sizes
# anyway.
EFFECTIVE_SUPPORT_FLOOR = 0.1


@dataclass(frozen=True, eq=False)
class StepSample:
    """Daily step counts for one (cleaned) window."""

    values: np.ndarray
    window_id: str = ""
    min_days: int = 30

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError("step sample must be a non-empty vector")
        if not np.all(np.isfinite(vals)):
            raise ValueError("step values must be finite")
        if np.any(vals < STEP_FLOOR) or np.any(vals > STEP_CEIL):
            raise ValueError(
                f"step values must lie in [{STEP_FLOOR:g}, {STEP_CEIL:g}] after cleaning"
            )
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """A density on a support grid in steps/day; integrates to 1."""

    support: np.ndarray
    values: np.ndarray
    bandwidth: float | None = None

    def __post_init__(self):
        sup = np.asarray(self.support, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if sup.shape != vals.shape or sup.ndim != 1 or sup.size < 2:
            raise ValueError("support and values must be equal-length vectors")
        if np.any(np.diff(sup) <= 0):
            raise ValueError("support must be strictly increasing")
        if np.any(vals < 0):
            raise ValueError("density values must be non-negative")
        total = np.trapezoid(vals, sup)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"density must integrate to 1 (got {total:.8f})")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class QuantileFunction:
    """q(p) over quantile levels p on the shared [0, 1] grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (len(self.grid),):
            raise ValueError("values must match the grid length")
        if np.any(np.diff(vals) < -1e-9):
            raise ValueError("quantile function must be non-decreasing")
        object.__setattr__(self, "values", vals)

    def mean(self) -> float:
        return self.grid.integrate(self.values)


@dataclass(frozen=True, eq=False)
class LqdFunction:
    """The LQD curve -log f(q(p)) plus the support anchor q(0).

    The anchor is required for inversion: the LQD values identify the
    distribution only up to location.
    """

    function: GridFunction
    q0: float

    def __post_init__(self):
        if not np.isfinite(self.q0):
            raise ValueError("anchor q(0) must be finite")

    @property
    def grid(self) -> Grid:
        return self.function.grid

    @property
    def values(self) -> np.ndarray:
        return self.function.values


def _silverman_bandwidth(values: np.ndarray) -> float:
    sd = float(np.std(values, ddof=1))
    q75, q25 = np.percentile(values, [75, 25])
    iqr = q75 - q25
    a = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * a * values.size ** (-0.2)


def _scott_bandwidth(values: np.ndarray) -> float:
    return 1.06 * float(np.std(values, ddof=1)) * values.size ** (-0.2)


def kde(sample: StepSample, bandwidth_rule="silverman") -> DensityEstimate:
    """Gaussian kernel density estimate on 512 support points.

    The support spans [min - 3h, max + 3h] intersected with [0, inf);
    the result is renormalized to integrate to exactly 1. ``bandwidth_rule``
    is "silverman" (default), "scott", or a positive number.
    """
    vals = sample.values
    if vals.size < sample.min_days:
        raise ValueError(
            f"too few days: {vals.size} < required {sample.min_days}"
        )
    if np.std(vals, ddof=1) == 0:
        raise ValueError("zero variance step sample")
    if isinstance(bandwidth_rule, str):
        if bandwidth_rule == "silverman":
            h = _silverman_bandwidth(vals)
        elif bandwidth_rule == "scott":
            h = _scott_bandwidth(vals)
        else:
            raise ValueError(f"unknown bandwidth rule: {bandwidth_rule!r}")
    else:
        h = float(bandwidth_rule)
    if h <= 0:
        raise ValueError("bandwidth must be positive")

    lo = max(0.0, float(vals.min()) - 3.0 * h)
    hi = float(vals.max()) + 3.0 * h
    support = np.linspace(lo, hi, KDE_GRID_SIZE)
    z = (support[None, :] - vals[:, None]) / h
    dens = np.exp(-0.5 * z * z).mean(axis=0) / (h * np.sqrt(2.0 * np.pi))
    dens = dens / np.trapezoid(dens, support)
    return DensityEstimate(support=support, values=dens, bandwidth=h)


def _cdf_of(f: DensityEstimate) -> np.ndarray:
    gaps = np.diff(f.support)
    increments = gaps * (f.values[:-1] + f.values[1:]) / 2.0
    cdf = np.concatenate([[0.0], np.cumsum(increments)])
    cdf = np.maximum.accumulate(cdf)
    return cdf / cdf[-1]


def quantile_from_density(f: DensityEstimate, grid: Grid) -> QuantileFunction:
    """Numeric CDF inversion of a density at the grid's quantile levels."""
    cdf = _cdf_of(f)
    q = np.interp(grid.points, cdf, f.support)
    q = np.maximum.accumulate(q)
    return QuantileFunction(grid=grid, values=q)


def trim_support(f: DensityEstimate, rel_floor: float) -> DensityEstimate:
    """Restrict a density to the contiguous region around its mode where it
    stays above ``rel_floor`` times the modal value, then renormalize."""
    if rel_floor <= 0:
        return f
    if rel_floor >= 1:
        raise ValueError("rel_floor must lie in [0, 1)")
    threshold = rel_floor * f.values.max()
    above = np.nonzero(f.values >= threshold)[0]
    lo, hi = above[0], above[-1]
    if lo == 0 and hi == f.values.size - 1:
        return f
    hi = max(hi, lo + 1)
    support = f.support[lo : hi + 1]
    values = f.values[lo : hi + 1]
    values = values / np.trapezoid(values, support)
    return DensityEstimate(support=support, values=values, bandwidth=f.bandwidth)


def lqd_forward(
    f: DensityEstimate, grid: Grid, rel_floor: float = EFFECTIVE_SUPPORT_FLOOR
) -> LqdFunction:
    """-log f(q(p)) on the grid, with the density floored before the log.

    The density is first trimmed to its effective support (see
    ``EFFECTIVE_SUPPORT_FLOOR``); pass ``rel_floor=0`` to transform the full
    density, keeping only the absolute floor as a guard.
    """
    f = trim_support(f, rel_floor)
    q = quantile_from_density(f, grid)
    fq = np.interp(q.values, f.support, f.values)
    fq = np.maximum(fq, DENSITY_FLOOR)
    values = -np.log(fq)
    return LqdFunction(
        function=GridFunction(grid, values), q0=float(q.values[0])
    )


def lqd_inverse(a: LqdFunction) -> tuple[QuantileFunction, DensityEstimate]:
    """Rebuild the quantile function and density from an LQD curve.

    q(p) = q(0) + cumulative trapezoid of exp(a); the density at q(p) is
    exp(-a(p)), renormalized on the reconstructed support. LQD values beyond
    +-30 are capped before exponentiation (and flagged), since such tails are
    numerically meaningless at step resolution.
    """
    vals = a.values
    if np.any(np.abs(vals) > LQD_CAP):
        warnings.warn(
            "LQD values beyond +-30 capped before exponentiation",
            RuntimeWarning,
            stacklevel=2,
        )
        vals = np.clip(vals, -LQD_CAP, LQD_CAP)
    pts = a.grid.points
    slope = np.exp(vals)
    gaps = np.diff(pts)
    increments = gaps * (slope[:-1] + slope[1:]) / 2.0
    q = a.q0 + np.concatenate([[0.0], np.cumsum(increments)])
    quantile = QuantileFunction(grid=a.grid, values=q)

    dens = np.exp(-vals)
    dens = dens / np.trapezoid(dens, q)
    density = DensityEstimate(support=q, values=dens)
    return quantile, density


def mean_steps(a: LqdFunction) -> float:
    """Mean of the distribution implied by an LQD action: integral of q(p)."""
    quantile, _ = lqd_inverse(a)
    return quantile.mean()


def anchor_from_neighbors(
    query_state: np.ndarray,
    dataset_states: np.ndarray,
    anchors: np.ndarray,
    k: int = 10,
) -> float:
    """Anchor q(0) for a policy-generated LQD curve.

    Policy outputs live in LQD space, which fixes the distribution only up
    to location; the anchor is borrowed as the mean q(0) of the k nearest
    dataset states (all states should share one scaling).
    """
    d = np.linalg.norm(dataset_states - np.asarray(query_state)[None, :], axis=1)
    k = min(k, d.size)
    nearest = np.argpartition(d, k - 1)[:k]
    return float(np.mean(anchors[nearest]))
