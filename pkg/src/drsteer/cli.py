"""Command-line front end: presets, runs and bit-stable result files.

Each run writes five files into the output directory: ``summary.json``
plus four CSV tables (``trajectories.csv``, ``risk_allocation.csv``,
``cost_per_iteration.csv``, ``timings.csv``).  Every table starts with
a ``# config_digest=...`` comment line followed by the header row, so a
figure built from any table is traceable to the exact configuration.
Numeric tables are byte-reproducible for a fixed config and seed;
``timings.csv`` records wall-clock and is the one intentionally
non-reproducible output.

Exit codes: 0 success, 2 infeasible problem, 3 configuration error,
4 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conic import SolverFailureError, UnboundedProgramError
from .config import ConfigError, ProblemConfig, preset
from .dr_ira import IraTrace, ira_solve
from .montecarlo import MonteCarloSummary, run_trials
from .risk import RISK_FLOOR, RiskAllocation
from .steering import (
    ControllerSolution,
    SteeringInfeasibleError,
    solve_lower_stage,
)

__all__ = ["RunReport", "run", "main"]

_COMMANDS = ("solve", "ira", "montecarlo")
_TRAJ_RETENTION_CAP = 5000


@dataclass
class RunReport:
    """Everything a run produced, in JSON-serializable form."""

    command: str
    config_name: str
    config_digest: str
    solver_status: str
    reduced_accuracy: bool
    cost: float
    cost_trace: list                 # [iteration, cost, active, residual] rows
    stop_reason: str
    warning: str | None
    allocation: list                 # final allocation grid
    true_risks: list
    terminal_mean_error: float
    terminal_cov_margin: float
    risk_floor: float
    mode: str
    notes: list
    montecarlo: dict | None = None
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(**data)


def _write_csv(path: Path, digest: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={digest}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _allocation_rows(alloc: RiskAllocation | None, true_risks) -> list:
    rows = []
    if alloc is None or alloc.grid.size == 0:
        return rows
    true_risks = np.asarray(true_risks)
    for i in range(alloc.grid.shape[0]):
        for k in range(alloc.grid.shape[1]):
            rows.append([i, k + 1, repr(float(alloc.grid[i, k])),
                         repr(float(true_risks[i, k]))])
    return rows


def _trace_rows(trace: IraTrace) -> list:
    return [[rec.iteration, repr(float(rec.cost)), rec.n_active,
             repr(float(rec.residual))] for rec in trace]


def _solution_payload(digest: str, sol: ControllerSolution) -> dict:
    return {
        "config_digest": digest,
        "V": sol.V.tolist(),
        "K": sol.K.tolist(),
        "cost": sol.cost,
        "allocation": sol.allocation.grid.tolist() if sol.allocation else [],
        "true_risks": np.asarray(sol.true_risks).tolist(),
        "solver_status": sol.solver_status,
    }


def _mc_dict(summary: MonteCarloSummary) -> dict:
    return {
        "trials": summary.trials,
        "family": summary.family,
        "seed": summary.seed,
        "joint_violation_rate": summary.joint_rate,
        "joint_wilson95": list(summary.joint_wilson),
        "max_cell_rate": float(summary.cell_rates.max(initial=0.0)),
        "cell_rates": summary.cell_rates.tolist(),
        "mean_cost": summary.mean_cost,
    }


def run(config: ProblemConfig, command: str, outdir) -> RunReport:
    """Execute one command and write the five output files.

    ``solve`` runs a single lower-stage solve at the uniform allocation,
    ``ira`` runs the full two-stage loop, and ``montecarlo`` rolls the
    stored (or freshly computed) controller out against sampled noise.
    """
    if command not in _COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {_COMMANDS}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    digest = config.digest()
    problem = config.to_problem()
    timings: dict[str, float] = {}
    mc_summary = None
    trajectories = None

    t0 = time.perf_counter()
    if command == "ira":
        sol, alloc, trace = ira_solve(problem, config.ira_config())
        timings["ira"] = time.perf_counter() - t0
    elif command == "solve":
        sol = solve_lower_stage(problem)
        alloc = sol.allocation
        trace = _single_solve_trace(problem, sol)
        timings["solve"] = time.perf_counter() - t0
    else:  # montecarlo
        sol, alloc, trace, reused = _controller_for_mc(config, problem, outdir, digest)
        timings["controller"] = time.perf_counter() - t0
        mc = config.montecarlo_settings()
        t1 = time.perf_counter()
        keep = mc["trials"] <= _TRAJ_RETENTION_CAP
        mc_summary = run_trials(problem, sol, mc["trials"], mc["seed"],
                                family=mc["family"], keep_trajectories=keep)
        trajectories = mc_summary.trajectories
        timings["montecarlo"] = time.perf_counter() - t1

    with open(outdir / "solution.json", "w") as fh:
        json.dump(_solution_payload(digest, sol), fh, indent=1)

    report = RunReport(
        command=command,
        config_name=config.name,
        config_digest=digest,
        solver_status=sol.solver_status,
        reduced_accuracy=sol.reduced_accuracy,
        cost=sol.cost,
        cost_trace=[[rec.iteration, float(rec.cost), rec.n_active,
                     float(rec.residual)] for rec in trace],
        stop_reason=trace.stop_reason,
        warning=trace.warning,
        allocation=(sol.allocation.grid.tolist() if sol.allocation else []),
        true_risks=np.asarray(sol.true_risks).tolist(),
        terminal_mean_error=sol.terminal_mean_error,
        terminal_cov_margin=sol.terminal_cov_margin,
        risk_floor=RISK_FLOOR,
        mode=problem.mode,
        notes=config.notes,
        montecarlo=_mc_dict(mc_summary) if mc_summary is not None else None,
        timings=timings,
    )

    _write_csv(outdir / "cost_per_iteration.csv", digest,
               ["iteration", "cost", "active_count", "residual_budget"],
               _trace_rows(trace))
    _write_csv(outdir / "risk_allocation.csv", digest,
               ["constraint_index", "step", "allocated", "true_risk"],
               _allocation_rows(sol.allocation, sol.true_risks))
    traj_rows = []
    if trajectories is not None:
        n = problem.spec.state_dim
        for t in range(trajectories.shape[0]):
            for k in range(trajectories.shape[1]):
                traj_rows.append([t, k] + [repr(float(v))
                                           for v in trajectories[t, k]])
        header = ["trial", "step"] + [f"x{j}" for j in range(n)]
    else:
        header = ["trial", "step"] + [f"x{j}" for j in range(problem.spec.state_dim)]
    _write_csv(outdir / "trajectories.csv", digest, header, traj_rows)
    _write_csv(outdir / "timings.csv", digest, ["phase", "seconds"],
               [[phase, repr(seconds)] for phase, seconds in timings.items()])
    with open(outdir / "summary.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    return report


def _single_solve_trace(problem, sol) -> IraTrace:
    from .dr_ira import IraRecord

    trace = IraTrace(stop_reason="single_solve")
    grid = sol.allocation.grid if sol.allocation is not None else np.zeros((0, 0))
    residual = problem.total_risk - float(grid.sum())
    trace.records.append(IraRecord(1, np.array(grid, copy=True), sol.cost,
                                   0, residual))
    return trace


def _controller_for_mc(config, problem, outdir: Path, digest: str):
    """Reuse a stored solution when it matches the config, else recompute."""
    stored = outdir / "solution.json"
    if stored.exists():
        try:
            with open(stored) as fh:
                payload = json.load(fh)
        except json.JSONDecodeError:
            payload = None
        if payload and payload.get("config_digest") == digest:
            sol = _rebuild_solution(problem, payload)
            trace = _single_solve_trace(problem, sol)
            trace.stop_reason = "reused_stored_solution"
            return sol, sol.allocation, trace, True
    if problem.n_constraints > 0:
        sol, alloc, trace = ira_solve(problem, config.ira_config())
    else:
        sol = solve_lower_stage(problem)
        alloc = sol.allocation
        trace = _single_solve_trace(problem, sol)
    return sol, alloc, trace, False


def _rebuild_solution(problem, payload) -> ControllerSolution:
    from .dynamics import propagate_covariance, propagate_mean

    cs = problem.concatenation
    V = np.asarray(payload["V"], dtype=float)
    K = np.asarray(payload["K"], dtype=float)
    alloc_grid = np.asarray(payload["allocation"], dtype=float)
    alloc = (RiskAllocation(alloc_grid, problem.total_risk)
             if alloc_grid.size else None)
    mean = propagate_mean(cs, problem.init.mean, V)
    cov = propagate_covariance(cs, K)
    from .steering import evaluate_cost
    return ControllerSolution(
        V=V, K=K, cost=evaluate_cost(problem, V, K), mean_traj=mean,
        cov_traj=cov, true_risks=np.asarray(payload["true_risks"], dtype=float),
        solver_status=payload.get("solver_status", "stored"),
        reduced_accuracy=False, allocation=alloc,
        terminal_mean_error=float(
            np.abs(cs.state_block(mean, cs.horizon) - problem.terminal.mean).max()),
        terminal_cov_margin=float(np.linalg.eigvalsh(
            problem.terminal.cov
            - cs.state_block(cs.state_block(cov.T, cs.horizon).T, cs.horizon)).min()),
    )


def _load_config(args) -> ProblemConfig:
    if bool(args.preset) == bool(args.config):
        raise ConfigError("exactly one of --preset or --config is required")
    if args.preset:
        name = args.preset
        if args.constraint:
            if name.startswith("spacecraft"):
                name = f"spacecraft_{args.constraint}"
            elif args.constraint == "cone":
                raise ConfigError(
                    f"preset {name!r} has no cone variant; "
                    "use --preset spacecraft_cone")
        cfg = preset(name)
    else:
        cfg = ProblemConfig.from_file(args.config)
        if args.constraint:
            kind = cfg.data.get("constraints", {}).get("type")
            if kind != args.constraint:
                raise ConfigError(
                    f"--constraint {args.constraint} does not match the "
                    f"config's constraint type {kind!r}")
    return cfg.with_overrides(mode=args.mode, trials=args.trials,
                              seed=args.seed, rho=args.rho,
                              max_iters=args.max_iters)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="drsteer",
        description="Distributionally robust covariance steering runs",
    )
    parser.add_argument("command", choices=_COMMANDS,
                        help="solve: one lower-stage solve at the uniform "
                             "allocation; ira: full risk reallocation loop; "
                             "montecarlo: rollout study")
    parser.add_argument("--preset", help="built-in configuration name")
    parser.add_argument("--config", help="path to a JSON configuration")
    parser.add_argument("--mode", choices=("dr", "gaussian"),
                        help="override the tightening mode")
    parser.add_argument("--constraint", choices=("polytope", "cone"),
                        help="select the constraint variant of a preset")
    parser.add_argument("--trials", type=int, help="Monte Carlo trial count")
    parser.add_argument("--seed", type=int, help="Monte Carlo seed")
    parser.add_argument("--out", default="runs/latest", help="output directory")
    parser.add_argument("--rho", type=float, help="reallocation damping in (0,1)")
    parser.add_argument("--max-iters", type=int, help="reallocation iteration cap")
    args = parser.parse_args(argv)

    try:
        config = _load_config(args)
        report = run(config, args.command, args.out)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 3
    except SteeringInfeasibleError as err:
        print(f"infeasible: {err}", file=sys.stderr)
        return 2
    except (SolverFailureError, UnboundedProgramError) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return 4

    print(f"{report.config_name}: {args.command} finished "
          f"({report.solver_status}), cost {report.cost:.6g}")
    if report.cost_trace and args.command == "ira":
        first, last = report.cost_trace[0][1], report.cost_trace[-1][1]
        print(f"  iterations: {len(report.cost_trace)}, cost {first:.6g} -> "
              f"{last:.6g}, stop: {report.stop_reason}")
    if report.montecarlo:
        mc = report.montecarlo
        print(f"  montecarlo: {mc['trials']} {mc['family']} trials, joint "
              f"violation rate {mc['joint_violation_rate']:.4f} "
              f"(wilson95 {mc['joint_wilson95'][0]:.4f}..{mc['joint_wilson95'][1]:.4f})")
    print(f"  outputs in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
