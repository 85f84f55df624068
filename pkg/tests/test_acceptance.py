"""Acceptance gate: one test and one printed pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from drsteer import (
    HalfSpace,
    MomentPair,
    RiskAllocation,
    SteeringProblem,
    build_concatenation,
    dr_quantile,
    gaussian_quantile,
    preset,
    propagate_covariance,
    propagate_mean,
    psd_sqrt,
    ira_solve,
    run_trials,
    solve_lower_stage,
    time_invariant_spec,
    uniform_allocation,
)
from drsteer.risk import direction_norm
from drsteer.steering import assemble
from conftest import random_moments, random_spec


def _report(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {num} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


def test_criterion_1_quantile_ordering():
    t0 = time.perf_counter()
    failures = []
    for delta in np.linspace(1e-4, 0.5, 200):
        dr = dr_quantile(1.0 - delta)
        gauss = gaussian_quantile(1.0 - delta)
        if delta < 0.5 and not dr > gauss:
            failures.append(delta)
    boundary = abs(dr_quantile(0.5) - 1.0)
    elapsed = time.perf_counter() - t0
    ok = not failures and boundary < 1e-12 and elapsed < 1.0
    _report(1, "quantile ordering", ok,
            f"200 grid points, boundary error {boundary:.1e}, {elapsed:.3f}s")


def test_criterion_2_propagation_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20270405)
    trials = 100_000
    worst_exact = 0.0
    worst_sigma = 0.0
    for _ in range(100):
        spec = random_spec(rng)
        init = random_moments(rng, spec.state_dim)
        cs = build_concatenation(spec, init)
        n, m, r, N = spec.state_dim, spec.input_dim, spec.noise_dim, spec.horizon

        # step-wise recursion oracle, exact
        V = rng.normal(size=N * m)
        mean = propagate_mean(cs, init.mean, V)
        x = init.mean.copy()
        cov = init.cov.copy()
        for k in range(N):
            u = V[k * m:(k + 1) * m]
            x = spec.A[k] @ x + spec.B[k] @ u
            cov = (spec.A[k] @ cov @ spec.A[k].T
                   + spec.D[k] @ spec.noise_cov @ spec.D[k].T)
            worst_exact = max(worst_exact, float(np.abs(
                cs.state_block(mean, k + 1) - x).max()))
            blk = cs.state_block(cs.state_block(cs.sigma_y.T, k + 1).T, k + 1)
            worst_exact = max(worst_exact, float(np.abs(blk - cov).max()))

        # Monte Carlo oracle at 1e5 trials, 5 standard errors
        K = rng.normal(size=(N * m, cs.traj_dim)) * 0.3
        target = propagate_covariance(cs, K)
        L0 = psd_sqrt(init.cov)
        Lw = psd_sqrt(cs.sigma_w_full)
        x0 = init.mean + rng.standard_normal((trials, n)) @ L0.T
        W = rng.standard_normal((trials, N * r)) @ Lw.T
        Y = (x0 - init.mean) @ cs.A.T + W @ cs.D.T
        X = x0 @ cs.A.T + (V + Y @ K.T) @ cs.B.T + W @ cs.D.T
        mean_se = np.sqrt(np.clip(np.diag(target), 1e-30, None) / trials)
        sig_mean = float(np.max(np.abs(X.mean(axis=0) - mean) / (5 * mean_se + 1e-15)))
        sample_cov = np.cov(X, rowvar=False)
        cov_se = np.sqrt((np.outer(np.diag(target), np.diag(target))
                          + target ** 2) / trials)
        sig_cov = float(np.max(np.abs(sample_cov - target) / (5 * cov_se + 1e-15)))
        worst_sigma = max(worst_sigma, sig_mean, sig_cov)
    elapsed = time.perf_counter() - t0
    ok = worst_exact <= 1e-10 and worst_sigma <= 1.0 and elapsed < 120.0
    _report(2, "propagation oracle", ok,
            f"100 systems, exact err {worst_exact:.2e}, worst |dev|/5se "
            f"{worst_sigma:.3f}, {elapsed:.1f}s")


def test_criterion_3_lower_stage_safety():
    t0 = time.perf_counter()
    problem = preset("double_integrator").to_problem()
    sol = solve_lower_stage(problem)
    elapsed = time.perf_counter() - t0
    excess = float((sol.true_risks - sol.allocation.grid).max())
    ok = (excess <= 1e-6 and sol.terminal_mean_error <= 1e-6
          and sol.terminal_cov_margin >= -1e-7 and elapsed < 30.0)
    _report(3, "lower-stage safety", ok,
            f"max(true - allocated) {excess:.2e}, terminal mean err "
            f"{sol.terminal_mean_error:.2e}, cov margin "
            f"{sol.terminal_cov_margin:.2e}, {elapsed:.1f}s")


def test_criterion_4_ira_trace_polytope_presets():
    t0 = time.perf_counter()
    details = []
    ok = True
    for name in ("double_integrator", "spacecraft_polytope"):
        cfg = preset(name)
        problem = cfg.to_problem()
        sol, alloc, trace = ira_solve(problem, cfg.ira_config())
        costs = trace.costs()
        monotone = bool(np.all(np.diff(costs) <= 1e-6))
        final_ok = costs[-1] <= costs[0]
        budget_ok = all(
            abs(rec.allocation.sum() - problem.total_risk) <= 1e-12
            for rec in trace.records[1:])   # solved after a redistribution
        iters_ok = len(trace) <= 30
        ok = ok and monotone and final_ok and budget_ok and iters_ok
        details.append(f"{name}: {len(trace)} iters, J {costs[0]:.6g} -> "
                       f"{costs[-1]:.6g}, monotone={monotone}")
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 300.0
    _report(4, "ira trace on both polytope presets", ok,
            "; ".join(details) + f", {elapsed:.1f}s")


def test_criterion_5_empirical_risk_containment():
    t0 = time.perf_counter()
    cfg = preset("double_integrator")
    problem = cfg.to_problem()
    sol = solve_lower_stage(problem)
    mc = cfg.montecarlo_settings()
    summary = run_trials(problem, sol, 500, mc["seed"], family="laplacian")
    elapsed = time.perf_counter() - t0
    ok = summary.joint_rate <= 0.10 and elapsed < 60.0
    _report(5, "empirical risk containment", ok,
            f"joint rate {summary.joint_rate:.4f} <= 0.10 over 500 "
            f"laplacian trials (seed {mc['seed']}), {elapsed:.1f}s")


def test_criterion_6_gaussian_vs_dr_ordering():
    cfg = preset("double_integrator")
    problem = cfg.to_problem()
    gaussian_problem = cfg.with_overrides(mode="gaussian").to_problem()
    sol = solve_lower_stage(problem)
    alloc = sol.allocation
    cs = problem.concatenation

    strictly_smaller = True
    gaussian_feasible = True
    for i, hs in enumerate(problem.halfspaces):
        for k in range(1, problem.spec.horizon + 1):
            delta = alloc.grid[i, k - 1]
            nrm = direction_norm(cs, sol.K, k, hs.normal)
            off_dr = dr_quantile(1.0 - delta) * nrm
            off_gauss = gaussian_quantile(1.0 - delta) * nrm
            if nrm > 1e-12 and not off_gauss < off_dr:
                strictly_smaller = False
            slack = hs.slack(cs.state_block(sol.mean_traj, k))
            if slack - off_gauss < -1e-7:
                gaussian_feasible = False

    # reported, not asserted: the Laplacian Monte Carlo comparison
    mc_seed = cfg.montecarlo_settings()["seed"]
    dr_rate = run_trials(problem, sol, 500, mc_seed, "laplacian").joint_rate
    gauss_sol = solve_lower_stage(gaussian_problem)
    gauss_rate = run_trials(gaussian_problem, gauss_sol, 500, mc_seed,
                            "laplacian").joint_rate
    ok = strictly_smaller and gaussian_feasible
    _report(6, "gaussian-vs-dr ordering", ok,
            f"offsets strictly ordered={strictly_smaller}, dr optimum "
            f"gaussian-feasible={gaussian_feasible}; laplacian joint rates "
            f"(reported only): dr {dr_rate:.4f}, gaussian {gauss_rate:.4f}")


def test_criterion_7_cone_suite():
    t0 = time.perf_counter()
    cfg = preset("spacecraft_cone")
    problem = cfg.to_problem()
    N = problem.spec.horizon
    p = problem.cone.n_rows
    alloc = RiskAllocation(np.full((1, N), problem.total_risk / N),
                           problem.total_risk)
    prog = assemble(problem, alloc)
    rows_ok = prog.layout.cone_rows == N * (2 * p + 1)

    sol, final_alloc, trace = ira_solve(problem, cfg.ira_config())
    costs = trace.costs()
    monotone = bool(np.all(np.diff(costs) <= 1e-6))
    summary = run_trials(problem, sol, 500, cfg.montecarlo_settings()["seed"],
                         family="laplacian")
    per_step_ok = bool(np.all(summary.cell_rates[0] <= final_alloc.grid[0]))
    elapsed = time.perf_counter() - t0
    ok = rows_ok and monotone and per_step_ok and elapsed < 300.0
    _report(7, "cone constraint suite", ok,
            f"rows {prog.layout.cone_rows} == {N * (2 * p + 1)}, ira "
            f"{len(trace)} iters monotone={monotone}, max per-step rate "
            f"{summary.cell_rates.max():.4f} vs min risk "
            f"{final_alloc.grid.min():.4f}, {elapsed:.1f}s")


def test_criterion_8_brute_force_dr_bound():
    t0 = time.perf_counter()
    # scalar one-step instance, deterministic start
    spec = time_invariant_spec([[1.0]], [[1.0]], [[1.0]], [[1.0]], horizon=1)
    init = MomentPair([0.0], [[0.0]])
    problem = SteeringProblem(
        spec=spec, init=init, terminal=MomentPair([0.0], [[4.0]]),
        state_weight=np.zeros((1, 1)), control_weight=np.eye(1),
        geometry=[HalfSpace([1.0], 2.2)], total_risk=0.2)
    alloc = uniform_allocation(0.2, 1, 1)
    sol = solve_lower_stage(problem, alloc)
    cs = problem.concatenation

    # three-point disturbance matching mean 0 and variance 1
    tail = 0.08
    spread = np.sqrt(1.0 / (2 * tail))
    outcomes = [(-spread, tail), (0.0, 1 - 2 * tail), (spread, tail)]
    assert abs(sum(w * q for w, q in outcomes)) < 1e-12
    assert abs(sum(w * w * q for w, q in outcomes) - 1.0) < 1e-12

    violation = 0.0
    for w, q in outcomes:
        W = np.array([w])
        U = sol.V + sol.K @ (cs.D @ W)
        X = cs.A @ init.mean + cs.B @ U + cs.D @ W
        if float(X[1]) > 2.2:
            violation += q
    elapsed = time.perf_counter() - t0
    ok = violation <= 0.2 + 1e-12 and elapsed < 1.0
    _report(8, "brute-force dr bound", ok,
            f"exhaustive violation {violation:.3f} <= allocated 0.2, "
            f"{elapsed:.2f}s")


def test_criterion_9_reproducibility(tmp_path):
    from drsteer.cli import run

    cfg = preset("double_integrator").with_overrides(trials=200)
    run(cfg, "montecarlo", tmp_path / "a")
    run(cfg, "montecarlo", tmp_path / "b")
    mismatched = []
    for name in ("trajectories.csv", "risk_allocation.csv",
                 "cost_per_iteration.csv"):
        if (tmp_path / "a" / name).read_bytes() != \
                (tmp_path / "b" / name).read_bytes():
            mismatched.append(name)
    ok = not mismatched
    _report(9, "reproducibility", ok,
            "numeric CSVs byte-identical across reruns" if ok
            else f"mismatch in {mismatched}")
