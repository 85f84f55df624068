"""Two-stage iterative risk allocation.

The joint budget split is optimized by alternating the convex
lower-stage controller solve with a reallocation pass: cells whose
allocated risk exceeds the risk the optimum actually carries are
tightened toward that carried risk (damped by ``rho``), and the freed
budget is spread evenly over the active cells.  The loop stops when the
cost stalls, when no cell (or every cell) is active, or at the
iteration cap.

Because tightening never cuts below the carried risk, the previous
optimum stays feasible after every reallocation, so the optimal cost is
non-increasing; a safeguard keeps the previous controller whenever
solver noise would report a tiny increase.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .conic import SolverSettings
from .risk import RISK_FLOOR, DomainError, RiskAllocation, uniform_allocation
from .steering import (
    ControllerSolution,
    SteeringInfeasibleError,
    SteeringProblem,
    solve_lower_stage,
)

__all__ = [
    "IraConfig",
    "Partition",
    "IraRecord",
    "IraTrace",
    "classify",
    "tighten_inactive",
    "redistribute",
    "ira_solve",
]


@dataclass(frozen=True)
class IraConfig:
    """Loop parameters.

    ``cost_tol`` is the absolute cost-change convergence threshold; when
    left ``None`` it defaults to ``1e-4 * max(1, |first cost|)``.
    """

    rho: float = 0.7
    cost_tol: float | None = None
    tol_active: float = 1e-3
    max_iters: int = 30

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise DomainError(f"interpolation rho {self.rho} outside (0, 1)")
        if self.cost_tol is not None and self.cost_tol <= 0.0:
            raise DomainError("cost tolerance must be positive")
        if self.tol_active <= 0.0:
            raise DomainError("activity tolerance must be positive")
        if self.max_iters < 1:
            raise DomainError("need at least one iteration")


@dataclass(frozen=True)
class Partition:
    """Active/inactive split of the allocation grid."""

    active: np.ndarray               # bool grid
    n_active: int

    @property
    def inactive(self) -> np.ndarray:
        return ~self.active


@dataclass
class IraRecord:
    iteration: int
    allocation: np.ndarray           # grid used by this iteration's solve
    cost: float
    n_active: int
    residual: float                  # unspent budget after this iteration's tighten


@dataclass
class IraTrace:
    records: list[IraRecord] = field(default_factory=list)
    stop_reason: str = ""
    warning: str | None = None

    def costs(self) -> np.ndarray:
        return np.array([rec.cost for rec in self.records])

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def classify(alloc: RiskAllocation, true_risks: np.ndarray,
             tol_active: float) -> Partition:
    """Cell (i, k) is active when its allocation is (nearly) fully used:
    ``alloc - true <= tol_active * alloc``.

    Cells already clamped at the risk floor are frozen: they are never
    reported active, so they neither receive residual budget nor keep
    being tightened.
    """
    true_risks = np.asarray(true_risks, dtype=float)
    if true_risks.shape != alloc.grid.shape:
        raise DomainError(
            f"true-risk grid {true_risks.shape} != allocation {alloc.grid.shape}")
    active = (alloc.grid - true_risks) <= tol_active * alloc.grid
    active &= alloc.grid > RISK_FLOOR
    return Partition(active=active, n_active=int(active.sum()))


def tighten_inactive(alloc: RiskAllocation, true_risks: np.ndarray, rho: float,
                     active: np.ndarray) -> RiskAllocation:
    """Pull inactive cells toward their carried risk:
    ``rho * alloc + (1 - rho) * true``, floored.

    Active cells are untouched.  The carried risk is clipped at the
    current allocation first, so no cell ever grows here.
    """
    if not 0.0 < rho < 1.0:
        raise DomainError(f"interpolation rho {rho} outside (0, 1)")
    true_risks = np.minimum(np.asarray(true_risks, dtype=float), alloc.grid)
    grid = alloc.grid.copy()
    inactive = ~np.asarray(active, dtype=bool)
    grid[inactive] = np.maximum(
        rho * alloc.grid[inactive] + (1.0 - rho) * true_risks[inactive], RISK_FLOOR)
    return alloc.replace_grid(grid)


def redistribute(alloc: RiskAllocation, active: np.ndarray) -> RiskAllocation:
    """Spread the unspent budget evenly over the active cells; the total
    returns to the full budget exactly."""
    active = np.asarray(active, dtype=bool)
    n_active = int(active.sum())
    if n_active == 0:
        raise ValueError("redistribute with no active cells: loop must have exited")
    residual = alloc.total - alloc.grid.sum()
    if residual < -1e-12:
        raise DomainError(f"negative residual budget {residual:.3e}")
    grid = alloc.grid.copy()
    grid[active] += residual / n_active
    return alloc.replace_grid(grid)


def _cone_partition(problem: SteeringProblem, sol: ControllerSolution,
                    alloc: RiskAllocation, tol_active: float) -> Partition:
    # cone steps have no per-cell inversion; a step is active when any of
    # its rows is within tolerance of binding
    slacks = sol.cone_step_slacks
    active = (slacks < tol_active).reshape(alloc.grid.shape)
    active &= alloc.grid > RISK_FLOOR
    return Partition(active=active, n_active=int(active.sum()))


def ira_solve(problem: SteeringProblem, cfg: IraConfig | None = None,
              settings: SolverSettings | None = None):
    """Run the full two-stage loop from the uniform allocation.

    Returns ``(solution, allocation, trace)``: the best controller found,
    the allocation it was solved with, and one trace record per
    iteration.  Infeasibility at the first solve propagates; later
    infeasibility (which the reallocation rules should preclude) reverts
    to the previous allocation and stops with a warning on the trace.
    """
    cfg = cfg or IraConfig()
    N = problem.spec.horizon
    M = problem.n_constraints
    trace = IraTrace()
    if M == 0:
        sol = solve_lower_stage(problem, None, settings)
        empty = RiskAllocation(np.zeros((0, N)), problem.total_risk)
        trace.records.append(IraRecord(1, empty.grid.copy(), sol.cost, 0,
                                       problem.total_risk))
        trace.stop_reason = "no_constraints"
        return sol, empty, trace

    alloc = uniform_allocation(problem.total_risk, M, N)
    best: ControllerSolution | None = None
    best_alloc = alloc
    cost_prev: float | None = None
    cost_tol = cfg.cost_tol
    stop = "max_iterations"

    for it in range(1, cfg.max_iters + 1):
        try:
            sol = solve_lower_stage(problem, alloc, settings)
        except SteeringInfeasibleError:
            if best is None:
                raise
            trace.warning = ("reallocation produced an infeasible lower stage; "
                             "reverted to the previous allocation")
            stop = "infeasible_reallocation"
            alloc = best_alloc
            break
        if best is not None and sol.cost > best.cost:
            # previous optimum stays feasible under the new allocation, so
            # a reported increase is solver noise: keep the better policy
            sol = dataclasses.replace(best, allocation=alloc)
        best, best_alloc = sol, alloc
        if cost_tol is None:
            cost_tol = 1e-4 * max(1.0, abs(sol.cost))

        if problem.cone is not None:
            part = _cone_partition(problem, sol, alloc, cfg.tol_active)
        else:
            part = classify(alloc, sol.true_risks, cfg.tol_active)

        residual = problem.total_risk - alloc.grid.sum()
        converged = cost_prev is not None and abs(sol.cost - cost_prev) <= cost_tol
        cost_prev = sol.cost
        stopping = (converged or part.n_active == 0 or part.n_active == M * N
                    or it == cfg.max_iters)
        if stopping:
            trace.records.append(IraRecord(it, alloc.grid.copy(), sol.cost,
                                           part.n_active, residual))
            if converged:
                stop = "cost_converged"
            elif part.n_active == 0:
                stop = "all_inactive"
            elif part.n_active == M * N:
                stop = "all_active"
            else:
                stop = "max_iterations"
            break

        tightened = tighten_inactive(alloc, sol.true_risks, cfg.rho, part.active)
        residual = problem.total_risk - tightened.grid.sum()
        trace.records.append(IraRecord(it, alloc.grid.copy(), sol.cost,
                                       part.n_active, residual))
        alloc = redistribute(tightened, part.active)

    trace.stop_reason = stop
    return best, best_alloc, trace
