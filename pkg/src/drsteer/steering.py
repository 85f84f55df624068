"""Lower-stage controller synthesis as one cone program.

Decision surface: feedforward V and noise-feedback gain K of the policy
``U = V + K (A (x0 - mu0) + D W)``.  The program minimizes the expected
quadratic cost, pins the terminal mean, upper-bounds the terminal
covariance through a Schur-complement PSD block and tightens every
halfspace (or cone) constraint by the allocated per-cell risk.

Internally the gain enters all constraints and the cost only through
the products ``lam = K sigma_y_half`` and
``theta = (I + B K) sigma_y_half``, so those two matrices are the
actual solver variables (coupled by one linear equality block).  That
substitution keeps the constraint matrix sparse: assembling over the
raw K entries instead produces dense factor blocks that are orders of
magnitude slower at the horizons used here.  K is recovered exactly
after the solve via the pseudoinverse of ``sigma_y_half``; components
of ``lam`` outside its range are cost-penalized to zero by the positive
definite control weight, so the substitution is lossless at the
optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from . import cone_constraints as cone_mod
from .conic import (
    ConicProgram,
    ConicSolution,
    InfeasibleProgramError,
    SolverSettings,
    solve_conic,
)
from .dynamics import (
    ConcatenatedSystem,
    DimensionError,
    LinearSystemSpec,
    MomentPair,
    build_concatenation,
    propagate_covariance,
    propagate_mean,
    psd_sqrt,
)
from .risk import (
    RISK_FLOOR,
    DomainError,
    HalfSpace,
    RiskAllocation,
    dr_quantile,
    gaussian_quantile,
    true_risk,
)

__all__ = [
    "SteeringProblem",
    "ControllerSolution",
    "SteeringInfeasibleError",
    "assemble",
    "solve_lower_stage",
    "evaluate_cost",
]

_PD_EIG_MIN = 1e-10


class SteeringInfeasibleError(Exception):
    """Lower stage infeasible; message names the tightest constraint cell."""


def _weight_blocks(W, N: int, n: int, name: str, positive_definite: bool):
    if isinstance(W, (list, tuple)):
        blocks = tuple(np.asarray(M, dtype=float) for M in W)
        if len(blocks) != N:
            raise DimensionError(f"{name}: expected {N} blocks, got {len(blocks)}")
    else:
        blocks = (np.asarray(W, dtype=float),) * N
    for k, M in enumerate(blocks):
        if M.shape != (n, n):
            raise DimensionError(f"{name}[{k}] has shape {M.shape}, expected ({n}, {n})")
        w = np.linalg.eigvalsh(0.5 * (M + M.T))
        if positive_definite and w.min() <= _PD_EIG_MIN:
            raise DomainError(f"{name}[{k}] must be positive definite")
        if not positive_definite and w.min() < -_PD_EIG_MIN:
            raise DomainError(f"{name}[{k}] must be positive semidefinite")
    return blocks


@dataclass
class SteeringProblem:
    """Endpoint moments, cost weights, constraint geometry and risk budget.

    ``geometry`` is a list of :class:`HalfSpace` (possibly empty) or a
    single :class:`cone_constraints.SecondOrderConeSet`.  ``mode``
    selects the tightening quantile ("dr" or "gaussian").  Setting
    ``causal_feedback`` restricts the gain so the input at step k reacts
    only to noise realized up to step k (default: unrestricted).
    """

    spec: LinearSystemSpec
    init: MomentPair
    terminal: MomentPair
    state_weight: object             # one n x n PSD block or a list of N
    control_weight: object           # one m x m PD block or a list of N
    geometry: object = None
    total_risk: float = 0.1
    mode: str = "dr"
    causal_feedback: bool = False

    def __post_init__(self):
        N, n, m = self.spec.horizon, self.spec.state_dim, self.spec.input_dim
        self.state_weight = _weight_blocks(self.state_weight, N, n, "state_weight", False)
        self.control_weight = _weight_blocks(
            self.control_weight, N, m, "control_weight", True)
        if self.init.dim != n or self.terminal.dim != n:
            raise DimensionError("endpoint moments must match the state dimension")
        if not 0.0 < float(self.total_risk) <= 0.5:
            raise DomainError(f"total risk {self.total_risk} outside (0, 0.5]")
        if self.mode not in ("dr", "gaussian"):
            raise ValueError(f"unknown tightening mode {self.mode!r}")
        if self.geometry is None:
            self.geometry = []

    @property
    def halfspaces(self):
        return self.geometry if isinstance(self.geometry, (list, tuple)) else None

    @property
    def cone(self):
        return self.geometry if isinstance(
            self.geometry, cone_mod.SecondOrderConeSet) else None

    @property
    def n_constraints(self) -> int:
        """Risk slots per step: M halfspaces, or 1 for a cone set."""
        if self.cone is not None:
            return 1
        return len(self.halfspaces)

    @cached_property
    def concatenation(self) -> ConcatenatedSystem:
        return build_concatenation(self.spec, self.init)

    @cached_property
    def state_weight_full(self) -> np.ndarray:
        """Block-diagonal state penalty over steps 0..N (terminal block zero;
        the terminal state is handled by constraints, not by the cost)."""
        N, n = self.spec.horizon, self.spec.state_dim
        Q = np.zeros(((N + 1) * n, (N + 1) * n))
        for k in range(N):
            Q[k * n:(k + 1) * n, k * n:(k + 1) * n] = self.state_weight[k]
        return Q

    @cached_property
    def control_weight_full(self) -> np.ndarray:
        N, m = self.spec.horizon, self.spec.input_dim
        R = np.zeros((N * m, N * m))
        for k in range(N):
            R[k * m:(k + 1) * m, k * m:(k + 1) * m] = self.control_weight[k]
        return R

    def uniform_cell(self) -> float:
        return self.total_risk / max(1, self.n_constraints * self.spec.horizon)


@dataclass
class _Layout:
    """Where each semantic block lives in the flat variable vector."""

    v: np.ndarray
    lam_start: int
    theta_start: int
    n_inputs: int                    # Nm
    traj_dim: int                    # (N+1) n
    f_start: int = -1
    cone_rows: int = 0

    def lam(self, p: int, c: int) -> int:
        return self.lam_start + c * self.n_inputs + p

    def theta(self, r: int, c: int) -> int:
        return self.theta_start + c * self.traj_dim + r

    def theta_entries(self, row_indices, col) -> np.ndarray:
        return self.theta_start + col * self.traj_dim + np.asarray(row_indices)


@dataclass(frozen=True)
class ControllerSolution:
    """Optimal policy plus the closed-form moments it induces."""

    V: np.ndarray
    K: np.ndarray
    cost: float
    mean_traj: np.ndarray
    cov_traj: np.ndarray
    true_risks: np.ndarray           # (M, N) grid; (1, N) in cone mode
    solver_status: str
    reduced_accuracy: bool
    allocation: RiskAllocation | None
    terminal_mean_error: float
    terminal_cov_margin: float       # min eig of (terminal cov bound - achieved)
    cone_bounds: np.ndarray | None = None      # f values, (N, p), cone mode
    cone_step_slacks: np.ndarray | None = None  # min scaled row slack per step
    solve_time: float = 0.0
    iterations: int = 0

    @property
    def feedforward(self) -> np.ndarray:
        return self.V

    @property
    def feedback(self) -> np.ndarray:
        return self.K


def _mean_row(cs: ConcatenatedSystem, vec: np.ndarray, v_idx: np.ndarray):
    """Affine expression of ``vec . mean_traj`` in the V variables."""
    coefs = cs.B.T @ vec
    offset = float(vec @ (cs.A @ cs.init.mean))
    nz = np.nonzero(coefs)[0]
    return v_idx[nz], coefs[nz], offset


def assemble(problem: SteeringProblem, alloc: RiskAllocation | None) -> ConicProgram:
    """Build the lower-stage cone program for one risk allocation.

    The returned program has a ``layout`` attribute mapping variable
    blocks; the policy variables are the feedforward and the two gain
    factors described in the module docstring.  Structure: one equality
    row per terminal mean coordinate, the factor-coupling equality
    block, one tightened SOC row per (constraint, step) cell (or the
    cone-decomposition rows), and a single terminal-covariance PSD
    block.
    """
    cs = problem.concatenation
    N, n, m = problem.spec.horizon, problem.spec.state_dim, problem.spec.input_dim
    nn1, Nm = cs.traj_dim, N * m
    M = problem.n_constraints
    if alloc is None:
        if M > 0:
            raise DomainError("constrained problem needs a risk allocation")
        alloc = RiskAllocation(np.zeros((0, N)), problem.total_risk)
    if problem.halfspaces is not None and alloc.grid.shape != (M, N):
        raise DimensionError(
            f"allocation grid {alloc.grid.shape} does not match ({M}, {N})")
    if problem.cone is not None and alloc.grid.shape != (1, N):
        raise DimensionError(
            f"cone-mode allocation grid {alloc.grid.shape} must be (1, {N})")

    prog = ConicProgram()
    v_idx = prog.add_variables("v", Nm)
    lam_idx = prog.add_variables("gain_factor", Nm * nn1)
    theta_idx = prog.add_variables("closed_loop_factor", nn1 * nn1)
    layout = _Layout(v=v_idx, lam_start=lam_idx[0], theta_start=theta_idx[0],
                     n_inputs=Nm, traj_dim=nn1)

    S = cs.sigma_y_half
    B_sp = [np.nonzero(cs.B[r])[0] for r in range(nn1)]

    # terminal mean: selector_N (A mu0 + B V) == mu_f
    EN_B = cs.B[N * n:(N + 1) * n]
    const = cs.state_block(cs.A @ cs.init.mean, N)
    for i in range(n):
        nz = np.nonzero(EN_B[i])[0]
        prog.add_equality(f"terminal_mean[{i}]", v_idx[nz], EN_B[i, nz],
                          const[i] - problem.terminal.mean[i])

    # factor coupling: theta[:, c] - B lam[:, c] == sigma_y_half[:, c]
    for c in range(nn1):
        for r in range(nn1):
            cols = [layout.theta(r, c)]
            coefs = [1.0]
            for p in B_sp[r]:
                cols.append(layout.lam(p, c))
                coefs.append(-cs.B[r, p])
            prog.add_equality(f"factor_coupling[{r},{c}]", cols, coefs, -S[r, c])

    if problem.causal_feedback:
        _add_causality_rows(prog, layout, cs)

    # cost: ||Qh (A mu0 + B V)||^2 + ||Rh V||^2 + ||Qh theta||_F^2 + ||Rh lam||_F^2
    Qh = psd_sqrt(problem.state_weight_full)
    Rh = psd_sqrt(problem.control_weight_full)
    import scipy.sparse as sp
    F_mean = np.vstack([Qh @ cs.B, Rh])
    g_mean = np.concatenate([Qh @ cs.A @ cs.init.mean, np.zeros(Nm)])
    prog.add_quadratic_cost(v_idx, F_mean, g_mean)
    prog.add_quadratic_cost(theta_idx, sp.kron(sp.eye(nn1), sp.csr_matrix(Qh)))
    prog.add_quadratic_cost(lam_idx, sp.kron(sp.eye(nn1), sp.csr_matrix(Rh)))

    # tightened halfspace rows, one SOC per (i, k)
    if problem.halfspaces is not None:
        quantile = dr_quantile if problem.mode == "dr" else gaussian_quantile
        for i, hs in enumerate(problem.halfspaces):
            for k in range(1, N + 1):
                q = quantile(1.0 - alloc.grid[i, k - 1])
                vec = cs.selector(k).T @ hs.normal
                cols, coefs, off = _mean_row(cs, vec, v_idx)
                rows = [(cols, -coefs, hs.offset - off)]
                nz = np.nonzero(hs.normal)[0]
                for c in range(nn1):
                    rows.append((layout.theta_entries(k * n + nz, c),
                                 q * hs.normal[nz], 0.0))
                prog.add_soc(f"risk_soc[i={i},k={k}]", rows)
    else:
        params = cone_mod.default_params(problem.cone, alloc.grid[0])
        layout.cone_rows = cone_mod.emit_cone_rows(
            problem.cone, params, cs, prog, layout, alloc.grid[0])

    # terminal covariance: [[terminal cov, selector_N theta], [theta' , I]] >= 0
    side = n + nn1
    const_mat = np.zeros((side, side))
    const_mat[:n, :n] = problem.terminal.cov
    const_mat[n:, n:] = np.eye(nn1)
    entries = [(i, n + c, layout.theta(N * n + i, c), 1.0)
               for c in range(nn1) for i in range(n)]
    prog.add_psd_block("terminal_cov", side, const_mat, entries)

    prog.layout = layout
    return prog


def _add_causality_rows(prog: ConicProgram, layout: _Layout,
                        cs: ConcatenatedSystem) -> None:
    """Force each input block to react only to noise realized by its step.

    Input block k may feed back the trajectory components 0..k, so its
    gain-factor row must lie in the row space of the matching leading
    rows of ``sigma_y_half``; rows orthogonal to that space are pinned
    to zero.
    """
    n, m, N = cs.state_dim, cs.input_dim, cs.horizon
    S = cs.sigma_y_half
    for k in range(N):
        null_basis = scipy.linalg.null_space(S[:(k + 1) * n])
        if null_basis.size == 0:
            continue
        for p in range(k * m, (k + 1) * m):
            for j in range(null_basis.shape[1]):
                cols = [layout.lam(p, c) for c in range(cs.traj_dim)]
                prog.add_equality(f"causality[{p},{j}]", cols, null_basis[:, j], 0.0)


def evaluate_cost(problem: SteeringProblem, V: np.ndarray, K: np.ndarray) -> float:
    """Expected quadratic cost of the policy (V, K), in closed form."""
    cs = problem.concatenation
    V = np.atleast_1d(np.asarray(V, dtype=float))
    K = np.asarray(K, dtype=float)
    Nm = problem.spec.horizon * problem.spec.input_dim
    if V.size != Nm:
        raise DimensionError(f"V has length {V.size}, expected {Nm}")
    if K.shape != (Nm, cs.traj_dim):
        raise DimensionError(f"K has shape {K.shape}, expected ({Nm}, {cs.traj_dim})")
    Qbar = problem.state_weight_full
    Rbar = problem.control_weight_full
    mean = propagate_mean(cs, problem.init.mean, V)
    closed = np.eye(cs.traj_dim) + cs.B @ K
    quad = closed.T @ Qbar @ closed + K.T @ Rbar @ K
    return float(mean @ Qbar @ mean + V @ Rbar @ V
                 + np.trace(quad @ cs.sigma_y))


def _recover_gain(problem: SteeringProblem, cs: ConcatenatedSystem,
                  lam: np.ndarray) -> np.ndarray:
    """Map the gain factor back to K; exact wherever sigma_y_half is
    invertible, minimum-norm on its null directions."""
    if not problem.causal_feedback:
        return lam @ np.linalg.pinv(cs.sigma_y_half, rcond=1e-10)
    n, m, N = cs.state_dim, cs.input_dim, cs.horizon
    K = np.zeros_like(lam)
    for k in range(N):
        lead = cs.sigma_y_half[:(k + 1) * n]
        K[k * m:(k + 1) * m, :(k + 1) * n] = (
            lam[k * m:(k + 1) * m] @ np.linalg.pinv(lead, rcond=1e-10))
    return K


def _diagnose_infeasible(problem: SteeringProblem,
                         alloc: RiskAllocation) -> str:
    """Name the (i, k) cell with the largest tightening deficit at the
    minimum-norm mean solution with zero feedback."""
    cs = problem.concatenation
    N, n = problem.spec.horizon, problem.spec.state_dim
    EN_B = cs.B[N * n:(N + 1) * n]
    rhs = problem.terminal.mean - cs.state_block(cs.A @ problem.init.mean, N)
    V_mn = np.linalg.lstsq(EN_B, rhs, rcond=None)[0]
    mean = propagate_mean(cs, problem.init.mean, V_mn)
    K0 = np.zeros((cs.horizon * cs.input_dim, cs.traj_dim))
    quantile = dr_quantile if problem.mode == "dr" else gaussian_quantile
    worst = None
    if problem.halfspaces is not None:
        for i, hs in enumerate(problem.halfspaces):
            for k in range(1, N + 1):
                from .risk import direction_norm
                need = quantile(1.0 - alloc.grid[i, k - 1]) * direction_norm(
                    cs, K0, k, hs.normal)
                slack = hs.slack(cs.state_block(mean, k))
                deficit = need - slack
                if worst is None or deficit > worst[0]:
                    worst = (deficit, i, k, need, slack)
        if worst is None:
            return "infeasible with no state constraints: terminal moments unreachable"
        deficit, i, k, need, slack = worst
        return (f"tightest cell is constraint {i} at step {k}: required offset "
                f"{need:.6g} vs slack {slack:.6g} at the minimum-norm mean")
    deficits = cone_mod.step_deficits(problem.cone, cs, mean, K0, alloc.grid[0])
    k = int(np.argmax(deficits)) + 1
    return (f"tightest cone step is {k}: bound deficit {deficits[k - 1]:.6g} "
            f"at the minimum-norm mean")


def solve_lower_stage(problem: SteeringProblem,
                      alloc: RiskAllocation | None = None,
                      settings: SolverSettings | None = None) -> ControllerSolution:
    """Assemble and solve; return the optimizer with closed-form moments
    and the per-cell risks the optimum actually carries."""
    cs = problem.concatenation
    N, n = problem.spec.horizon, problem.spec.state_dim
    M = problem.n_constraints
    if alloc is None and M > 0:
        cell = problem.uniform_cell()
        alloc = RiskAllocation(np.full((M, N), cell), problem.total_risk)
    prog = assemble(problem, alloc)
    layout = prog.layout
    try:
        sol: ConicSolution = solve_conic(prog, settings)
    except InfeasibleProgramError as err:
        detail = _diagnose_infeasible(problem, alloc) if alloc is not None else str(err)
        raise SteeringInfeasibleError(detail) from err

    Nm, nn1 = layout.n_inputs, layout.traj_dim
    V = sol.x[layout.v]
    lam = sol.x[layout.lam_start:layout.lam_start + Nm * nn1]
    lam = lam.reshape((nn1, Nm)).T  # stored column-major
    K = _recover_gain(problem, cs, lam)
    mean = propagate_mean(cs, problem.init.mean, V)
    cov = propagate_covariance(cs, K)
    cost = evaluate_cost(problem, V, K)

    cone_bounds = None
    step_slacks = None
    if problem.cone is not None:
        p = problem.cone.n_rows
        fvals = sol.x[layout.f_start:layout.f_start + N * p].reshape((N, p))
        cone_bounds = fvals
        risks = cone_mod.step_true_risks(problem.cone, cs, mean, K, fvals,
                                         alloc.grid[0])
        step_slacks = cone_mod.step_min_slacks(problem.cone, cs, mean, K, fvals,
                                               alloc.grid[0])
        true = risks.reshape((1, N))
    elif M > 0:
        true = np.empty((M, N))
        for i, hs in enumerate(problem.halfspaces):
            for k in range(1, N + 1):
                true[i, k - 1] = true_risk(hs, cs, mean, K, k)
    else:
        true = np.zeros((0, N))

    term_cov = cs.state_block(cs.state_block(cov.T, N).T, N)
    margin = float(np.linalg.eigvalsh(problem.terminal.cov - term_cov).min())
    term_err = float(np.abs(cs.state_block(mean, N) - problem.terminal.mean).max())
    return ControllerSolution(
        V=V, K=K, cost=cost, mean_traj=mean, cov_traj=cov, true_risks=true,
        solver_status=sol.solver_status, reduced_accuracy=sol.reduced_accuracy,
        allocation=alloc, terminal_mean_error=term_err, terminal_cov_margin=margin,
        cone_bounds=cone_bounds, cone_step_slacks=step_slacks,
        solve_time=sol.solve_time, iterations=sol.iterations,
    )
