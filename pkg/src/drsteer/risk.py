"""Risk algebra for chance-constrained steering.

Two interchangeable constraint-tightening modes are provided:

* ``dr``: distribution-free quantile ``sqrt((1 - d)/d)`` from Cantelli's
  one-sided inequality, valid for every distribution sharing the first
  two moments;
* ``gaussian``: the usual normal inverse cdf, valid only when the state
  is actually Gaussian.

A joint violation budget is split over constraints and steps by Boole's
inequality (one probability cell per halfspace per step), and the
tightening can be inverted at a solved trajectory to read off the risk
that trajectory actually carries in each cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import ConcatenatedSystem, DimensionError

__all__ = [
    "RISK_FLOOR",
    "DomainError",
    "InfeasibleMeanError",
    "HalfSpace",
    "RiskAllocation",
    "dr_quantile",
    "gaussian_quantile",
    "direction_norm",
    "tightening_offset",
    "uniform_allocation",
    "true_risk",
]

#: smallest admissible per-cell risk; the dr quantile blows up as the
#: risk goes to zero, which destroys solver conditioning
RISK_FLOOR = 1e-6

_BUDGET_TOL = 1e-12


class DomainError(ValueError):
    """Probability argument outside the supported domain."""


class InfeasibleMeanError(ValueError):
    """Mean trajectory violates a halfspace, true risk is undefined."""


@dataclass(frozen=True)
class HalfSpace:
    """Constraint ``normal . x <= offset`` with a nonzero normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.atleast_1d(np.asarray(self.normal, dtype=float))
        if normal.ndim != 1:
            raise DimensionError("HalfSpace.normal must be a vector")
        if np.linalg.norm(normal) == 0.0:
            raise DimensionError("HalfSpace.normal must be nonzero")
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    def contains(self, x: np.ndarray) -> bool:
        return float(self.normal @ x) <= self.offset

    def slack(self, x: np.ndarray) -> float:
        return self.offset - float(self.normal @ x)


@dataclass(frozen=True)
class RiskAllocation:
    """Per-constraint per-step risk cells plus the joint budget they split.

    ``grid[i, k-1]`` is the violation probability allowed to constraint i
    at step k (steps run 1..N).  Cells live in ``[RISK_FLOOR, 0.5]`` and
    sum to at most the total budget.
    """

    grid: np.ndarray  # (M, N)
    total: float

    def __post_init__(self):
        grid = np.atleast_2d(np.asarray(self.grid, dtype=float))
        total = float(self.total)
        if not 0.0 < total <= 0.5:
            raise DomainError(f"total risk budget {total} outside (0, 0.5]")
        if grid.size:
            if grid.min() < RISK_FLOOR - _BUDGET_TOL:
                raise DomainError(
                    f"allocation cell {grid.min():.3e} below floor {RISK_FLOOR}"
                )
            if grid.max() > 0.5 + _BUDGET_TOL:
                raise DomainError(f"allocation cell {grid.max():.6f} above 0.5")
            if grid.sum() > total + _BUDGET_TOL:
                raise DomainError(
                    f"allocation sum {grid.sum():.12f} exceeds budget {total}"
                )
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "total", total)

    @property
    def n_constraints(self) -> int:
        return self.grid.shape[0]

    @property
    def horizon(self) -> int:
        return self.grid.shape[1]

    def replace_grid(self, grid: np.ndarray) -> "RiskAllocation":
        return RiskAllocation(grid, self.total)


def dr_quantile(one_minus_delta: float) -> float:
    """Distribution-free quantile ``sqrt(p / (1 - p))`` at ``p = 1 - d``.

    Equals the tightening constant that makes a halfspace constraint on
    the mean hold with probability at least p under every distribution
    with the given first two moments (Cantelli bound).  Defined for
    ``p`` in ``[0.5, 1 - RISK_FLOOR]``; strictly increasing.
    """
    p = float(one_minus_delta)
    if not 0.5 <= p <= 1.0 - RISK_FLOOR:
        raise DomainError(
            f"dr_quantile argument {p} outside [0.5, {1.0 - RISK_FLOOR}]"
        )
    return math.sqrt(p / (1.0 - p))


# Rational approximation for the normal inverse cdf (central + tail
# branches), refined below by one Halley step on the erf-based cdf.
_ICDF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
           1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ICDF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
           6.680131188771972e+01, -1.328068155288572e+01)
_ICDF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
           -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ICDF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
           3.754408661907416e+00)


def _normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def gaussian_quantile(p: float) -> float:
    """Standard normal inverse cdf, accurate to well below 1e-9.

    Rational approximation with one Halley refinement step on the
    erf-based cdf; no lookup tables.  Domain ``[RISK_FLOOR, 1 - RISK_FLOOR]``,
    closed so the risk-floor boundary used by the tightening is admissible.
    """
    p = float(p)
    if not RISK_FLOOR <= p <= 1.0 - RISK_FLOOR:
        raise DomainError(
            f"gaussian_quantile argument {p} outside "
            f"[{RISK_FLOOR}, {1.0 - RISK_FLOOR}]"
        )
    if p == 0.5:
        return 0.0
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
             / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0))
    elif p <= 1.0 - p_low:
        q = p - 0.5
        rr = q * q
        x = ((((((a[0] * rr + a[1]) * rr + a[2]) * rr + a[3]) * rr + a[4]) * rr + a[5]) * q
             / (((((b[0] * rr + b[1]) * rr + b[2]) * rr + b[3]) * rr + b[4]) * rr + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -((((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
              / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0))
    # one Halley step: e is the cdf error, u the Newton step
    e = _normal_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def direction_norm(cs: ConcatenatedSystem, K: np.ndarray, k: int,
                   normal: np.ndarray) -> float:
    """Standard deviation of ``normal . x_k`` under feedback K.

    Equals ``|| sigma_y_half (I + B K)' E_k' normal ||_2`` without forming
    the (N+1)n square closed-loop matrix.
    """
    if not 1 <= k <= cs.horizon:
        raise DimensionError(f"step index {k} outside [1, {cs.horizon}]")
    v = np.zeros(cs.traj_dim)
    n = cs.state_dim
    v[k * n:(k + 1) * n] = normal
    w = v + K.T @ (cs.B.T @ v)
    return float(np.linalg.norm(cs.sigma_y_half @ w))


def tightening_offset(hs: HalfSpace, cs: ConcatenatedSystem, K: np.ndarray,
                      k: int, delta: float, mode: str = "dr") -> float:
    """Deterministic margin subtracted from the halfspace offset at step k.

    ``quantile(1 - delta) * direction_norm``, with the quantile picked by
    ``mode`` ("dr" or "gaussian").  Nonnegative; strictly decreasing in
    ``delta`` for a fixed geometry.
    """
    delta = float(delta)
    if not RISK_FLOOR <= delta <= 0.5:
        raise DomainError(f"risk {delta} outside [{RISK_FLOOR}, 0.5]")
    if mode == "dr":
        q = dr_quantile(1.0 - delta)
    elif mode == "gaussian":
        q = gaussian_quantile(1.0 - delta)
    else:
        raise ValueError(f"unknown tightening mode {mode!r}")
    return q * direction_norm(cs, K, k, hs.normal)


def uniform_allocation(total: float, n_constraints: int, horizon: int) -> RiskAllocation:
    """Spread the joint budget evenly: every cell gets ``total / (N M)``."""
    total = float(total)
    if not 0.0 < total <= 0.5:
        raise DomainError(f"total risk budget {total} outside (0, 0.5]")
    if n_constraints < 1 or horizon < 1:
        raise DomainError("uniform_allocation needs at least one constraint and step")
    cell = total / (n_constraints * horizon)
    return RiskAllocation(np.full((n_constraints, horizon), cell), total)


def true_risk(hs: HalfSpace, cs: ConcatenatedSystem, mean_traj: np.ndarray,
              K: np.ndarray, k: int) -> float:
    """Risk actually carried by a solved trajectory in one constraint cell.

    Inverts the dr tightening at the achieved slack:
    ``(1 + (slack / norm)^2)^-1``, so running the tightening at the
    returned value consumes the slack exactly.  Floored at RISK_FLOOR.

    A zero direction norm means the constraint direction is
    deterministic and carries no risk (returns the floor).  A negative
    slack means the mean itself is infeasible and raises.
    """
    slack = hs.offset - float(hs.normal @ cs.state_block(mean_traj, k))
    norm = direction_norm(cs, K, k, hs.normal)
    if norm < 1e-14:
        return RISK_FLOOR
    if slack < -1e-9 * (1.0 + abs(hs.offset)):
        raise InfeasibleMeanError(
            f"mean trajectory violates halfspace at step {k}: slack {slack:.3e}"
        )
    slack = max(slack, 0.0)
    return max(1.0 / (1.0 + (slack / norm) ** 2), RISK_FLOOR)
