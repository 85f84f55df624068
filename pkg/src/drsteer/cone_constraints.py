"""Distributionally robust second-order-cone state constraints.

A cone set ``{x : ||A x + b|| <= c'x + d}`` cannot be risk-tightened the
way a halfspace can, so it is split in three convex stages:

1. the right-hand side is relaxed to its mean value (a relaxation of
   the original cone risk constraint),
2. the quadratic event is decomposed row-wise with weights ``beta`` and
   per-row bound variables ``f`` whose norm must stay below the mean
   right-hand side,
3. each two-sided row event is split into two one-sided halfspace
   events via the reverse union bound, with side risks ``eps1, eps2``
   fixed a priori so the rows stay convex in the policy.

Every step then contributes ``2p + 1`` second-order-cone rows (two per
cone row plus one norm coupling), with the bound variables entering the
program as genuine decision variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import ConcatenatedSystem, DimensionError
from .risk import RISK_FLOOR, DomainError, direction_norm

__all__ = [
    "SecondOrderConeSet",
    "ConeDecompositionParams",
    "default_params",
    "emit_cone_rows",
    "cone_membership",
    "step_true_risks",
    "step_min_slacks",
    "step_deficits",
]


@dataclass(frozen=True)
class SecondOrderConeSet:
    """State set ``{x : ||A x + b||_2 <= c . x + d}``."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if A.shape[0] < 1:
            raise DimensionError("cone matrix needs at least one row")
        if b.size != A.shape[0]:
            raise DimensionError(f"cone offset length {b.size} != {A.shape[0]} rows")
        if c.size != A.shape[1]:
            raise DimensionError(f"cone axis length {c.size} != state dim {A.shape[1]}")
        if np.any(np.linalg.norm(A, axis=1) == 0.0):
            raise DimensionError("cone matrix must have no all-zero row")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", float(self.d))

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class ConeDecompositionParams:
    """Row weights and the two fixed side risks of the union-bound split.

    ``beta`` sums to one (normalized at construction); the side risks
    are probabilities in (0.5, 1) sized (p, N).
    """

    beta: np.ndarray                 # (p,)
    eps_one: np.ndarray              # (p, N)
    eps_two: np.ndarray              # (p, N)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if np.any(beta <= 0.0):
            raise DomainError("cone row weights must be positive")
        beta = beta / beta.sum()
        e1 = np.atleast_2d(np.asarray(self.eps_one, dtype=float))
        e2 = np.atleast_2d(np.asarray(self.eps_two, dtype=float))
        if e1.shape != e2.shape or e1.shape[0] != beta.size:
            raise DimensionError("side-risk grids must be (p, N) for p row weights")
        for name, e in (("eps_one", e1), ("eps_two", e2)):
            if np.any(e <= 0.5) or np.any(e >= 1.0):
                raise DomainError(f"{name} must lie strictly inside (0.5, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "eps_one", e1)
        object.__setattr__(self, "eps_two", e2)


def _side_quantile(eps: float) -> float:
    # same Cantelli form as the halfspace quantile, but side risks sit
    # closer to 1 than the halfspace floor allows, so guard locally
    if not 0.5 <= eps < 1.0 - 1e-12:
        raise DomainError(f"side risk {eps} outside [0.5, 1)")
    return math.sqrt(eps / (1.0 - eps))


def _check_step_risks(step_risks: np.ndarray, horizon: int) -> np.ndarray:
    dk = np.atleast_1d(np.asarray(step_risks, dtype=float))
    if dk.size != horizon:
        raise DimensionError(f"expected {horizon} per-step risks, got {dk.size}")
    if np.any(dk < RISK_FLOOR) or np.any(dk > 0.5):
        raise DomainError("per-step cone risks must lie in [RISK_FLOOR, 0.5]")
    return dk


def default_params(cone: SecondOrderConeSet,
                   step_risks: np.ndarray) -> ConeDecompositionParams:
    """Uniform row weights and symmetric side risks at the union-bound limit.

    ``beta_i = 1/p`` and ``eps1 = eps2 = 1 - beta_i d_k / 2``, which
    meets the requirement ``eps1 + eps2 >= 2 - beta_i d_k`` with
    equality, keeping both sides equally tight.
    """
    p = cone.n_rows
    dk = _check_step_risks(step_risks, step_risks.size if hasattr(step_risks, "size")
                           else len(step_risks))
    beta = np.full(p, 1.0 / p)
    eps = 1.0 - np.outer(beta, dk) / 2.0
    return ConeDecompositionParams(beta=beta, eps_one=eps, eps_two=eps.copy())


def cone_membership(cone: SecondOrderConeSet, x: np.ndarray) -> bool:
    """Closed-set membership test ``||A x + b|| <= c . x + d``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != cone.state_dim:
        raise DimensionError(f"point has length {x.size}, cone is in R^{cone.state_dim}")
    return float(np.linalg.norm(cone.A @ x + cone.b)) <= float(cone.c @ x + cone.d)


def emit_cone_rows(cone: SecondOrderConeSet, params: ConeDecompositionParams,
                   cs: ConcatenatedSystem, program, layout,
                   step_risks: np.ndarray) -> int:
    """Append the cone decomposition to an assembled program.

    Registers one bound variable per (row, step), then per step k adds
    two one-sided tightened SOC rows per cone row, the norm coupling
    ``||f_k|| <= c . mean_k + d`` and bound nonnegativity.  Returns the
    number of cone rows added, ``N (2p + 1)``; nonnegativity rows are
    linear and not counted.
    """
    N, n = cs.horizon, cs.state_dim
    p = cone.n_rows
    dk = _check_step_risks(step_risks, N)
    if params.eps_one.shape != (p, N):
        raise DimensionError(f"side-risk grids {params.eps_one.shape} != ({p}, {N})")
    hypo = params.eps_one + params.eps_two - (2.0 - np.outer(params.beta, dk))
    if np.any(hypo < -1e-12):
        raise DomainError("side risks violate eps1 + eps2 >= 2 - beta * risk")

    f_idx = program.add_variables("cone_bound", p * N)
    layout.f_start = int(f_idx[0])

    def f_of(i, k):  # k in 1..N
        return int(f_idx[(k - 1) * p + i])

    nn1 = cs.traj_dim
    count = 0
    for k in range(1, N + 1):
        for i in range(p):
            a = cone.A[i]
            vec = cs.selector(k).T @ a
            vcoefs = cs.B.T @ vec
            voff = float(vec @ (cs.A @ cs.init.mean))
            nz_v = np.nonzero(vcoefs)[0]
            nz_a = np.nonzero(a)[0]
            for side, (eps, sgn) in enumerate(
                    ((params.eps_one[i, k - 1], +1.0),
                     (params.eps_two[i, k - 1], -1.0))):
                q = _side_quantile(eps)
                # bound: f_ik - sgn*(a.mean_k) - sgn*b_i
                cols = np.concatenate(([f_of(i, k)], layout.v[nz_v]))
                coefs = np.concatenate(([1.0], -sgn * vcoefs[nz_v]))
                off = -sgn * (voff + cone.b[i])
                rows = [(cols, coefs, off)]
                for c in range(nn1):
                    rows.append((layout.theta_entries(k * n + nz_a, c),
                                 q * a[nz_a], 0.0))
                tag = "lo" if side else "up"
                program.add_soc(f"cone_{tag}[i={i},k={k}]", rows)
                count += 1
        # coupling ||f_k|| <= c . mean_k + d
        vec = cs.selector(k).T @ cone.c
        vcoefs = cs.B.T @ vec
        voff = float(vec @ (cs.A @ cs.init.mean))
        nz_v = np.nonzero(vcoefs)[0]
        rows = [(layout.v[nz_v], vcoefs[nz_v], voff + cone.d)]
        for i in range(p):
            rows.append(([f_of(i, k)], [1.0], 0.0))
        program.add_soc(f"cone_coupling[k={k}]", rows)
        count += 1
        for i in range(p):
            program.add_nonneg(f"cone_bound_nonneg[i={i},k={k}]",
                               [f_of(i, k)], [1.0], 0.0)
    return count


def _side_slacks(cone: SecondOrderConeSet, cs: ConcatenatedSystem,
                 mean_traj: np.ndarray, K: np.ndarray, f_step: np.ndarray,
                 k: int):
    """Per-row (margin_up, margin_lo, direction_norm) at a fixed solution."""
    out = []
    xk = cs.state_block(mean_traj, k)
    for i in range(cone.n_rows):
        a = cone.A[i]
        mean_term = float(a @ xk)
        nrm = direction_norm(cs, K, k, a)
        out.append((f_step[i] - cone.b[i] - mean_term,
                    f_step[i] + cone.b[i] + mean_term,
                    nrm))
    return out


def step_true_risks(cone: SecondOrderConeSet, cs: ConcatenatedSystem,
                    mean_traj: np.ndarray, K: np.ndarray,
                    bounds: np.ndarray, step_risks: np.ndarray) -> np.ndarray:
    """Per-step risk proxy: smallest step risk keeping the emitted rows
    feasible at the fixed optimum, by bisection to 1e-6.

    There is no closed-form inversion for the cone decomposition the
    way a single halfspace has one, so the proxy bisects on the step
    risk with the default symmetric side risks.
    """
    N = cs.horizon
    p = cone.n_rows
    dk = _check_step_risks(step_risks, N)
    beta = np.full(p, 1.0 / p)
    out = np.empty(N)
    for k in range(1, N + 1):
        sides = _side_slacks(cone, cs, mean_traj, K, bounds[k - 1], k)

        def feasible(delta: float) -> bool:
            for i, (s_up, s_lo, nrm) in enumerate(sides):
                q = _side_quantile(1.0 - beta[i] * delta / 2.0)
                if q * nrm > s_up + 1e-12 or q * nrm > s_lo + 1e-12:
                    return False
            return True

        if feasible(RISK_FLOOR):
            out[k - 1] = RISK_FLOOR
            continue
        if not feasible(0.5):
            out[k - 1] = 0.5
            continue
        lo, hi = RISK_FLOOR, 0.5
        while hi - lo > 1e-6:
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                hi = mid
            else:
                lo = mid
        out[k - 1] = hi
    return out


def step_min_slacks(cone: SecondOrderConeSet, cs: ConcatenatedSystem,
                    mean_traj: np.ndarray, K: np.ndarray,
                    bounds: np.ndarray, step_risks: np.ndarray) -> np.ndarray:
    """Minimum scaled slack over the 2p + 1 rows of each step.

    Each row slack is divided by ``1 + |right-hand side|`` so the
    activity test is scale-free.
    """
    N = cs.horizon
    p = cone.n_rows
    dk = _check_step_risks(step_risks, N)
    beta = np.full(p, 1.0 / p)
    out = np.empty(N)
    for k in range(1, N + 1):
        sides = _side_slacks(cone, cs, mean_traj, K, bounds[k - 1], k)
        worst = np.inf
        for i, (s_up, s_lo, nrm) in enumerate(sides):
            q = _side_quantile(1.0 - beta[i] * dk[k - 1] / 2.0)
            worst = min(worst, (s_up - q * nrm) / (1.0 + abs(s_up)))
            worst = min(worst, (s_lo - q * nrm) / (1.0 + abs(s_lo)))
        kappa = float(cone.c @ cs.state_block(mean_traj, k) + cone.d)
        coupling = kappa - float(np.linalg.norm(bounds[k - 1]))
        worst = min(worst, coupling / (1.0 + abs(kappa)))
        out[k - 1] = worst
    return out


def step_deficits(cone: SecondOrderConeSet, cs: ConcatenatedSystem,
                  mean_traj: np.ndarray, K: np.ndarray,
                  step_risks: np.ndarray) -> np.ndarray:
    """Per-step infeasibility measure with the bounds chosen optimally.

    The smallest admissible bound per row is forced by the two
    one-sided rows; the deficit is how far their norm overshoots the
    mean right-hand side (positive means infeasible at this risk)."""
    N = cs.horizon
    p = cone.n_rows
    dk = _check_step_risks(step_risks, N)
    beta = np.full(p, 1.0 / p)
    out = np.empty(N)
    for k in range(1, N + 1):
        xk = cs.state_block(mean_traj, k)
        f_min = np.empty(p)
        for i in range(p):
            a = cone.A[i]
            mean_term = float(a @ xk)
            nrm = direction_norm(cs, K, k, a)
            q = _side_quantile(1.0 - beta[i] * dk[k - 1] / 2.0)
            f_min[i] = max(mean_term + cone.b[i] + q * nrm,
                           -mean_term - cone.b[i] + q * nrm,
                           0.0)
        kappa = float(cone.c @ xk + cone.d)
        out[k - 1] = float(np.linalg.norm(f_min)) - kappa
    return out
