from __future__ import annotations

import numpy as np
import pytest

from drsteer import (
    MomentPair,
    SteeringProblem,
    build_concatenation,
    ira_solve,
    preset,
    solve_lower_stage,
    time_invariant_spec,
)


def random_spec(rng, n=None, m=None, r=None, horizon=None, time_varying=True):
    """Random well-scaled system spec for property tests."""
    n = n or int(rng.integers(1, 4))
    m = m or int(rng.integers(1, 3))
    r = r or int(rng.integers(1, 3))
    horizon = horizon or int(rng.integers(1, 6))

    def one():
        A = rng.normal(size=(n, n)) * 0.6
        A += np.eye(n) * 0.5          # keep the free response bounded-ish
        B = rng.normal(size=(n, m))
        D = rng.normal(size=(n, r)) * 0.5
        return A, B, D

    if time_varying:
        mats = [one() for _ in range(horizon)]
        A, B, D = zip(*mats)
    else:
        A0, B0, D0 = one()
        A, B, D = (A0,) * horizon, (B0,) * horizon, (D0,) * horizon
    G = rng.normal(size=(r, r))
    noise_cov = G @ G.T / r
    from drsteer import LinearSystemSpec
    return LinearSystemSpec(tuple(A), tuple(B), tuple(D), noise_cov)


def random_moments(rng, n, scale=1.0, singular=False):
    mean = rng.normal(size=n) * scale
    G = rng.normal(size=(n, n))
    cov = G @ G.T / n
    if singular and n > 1:
        cov[:, -1] = 0.0
        cov[-1, :] = 0.0
    return MomentPair(mean, cov)


@pytest.fixture(scope="session")
def di_config():
    return preset("double_integrator")


@pytest.fixture(scope="session")
def di_problem(di_config):
    return di_config.to_problem()


@pytest.fixture(scope="session")
def di_uniform_solution(di_problem):
    """Uniform-allocation dr-mode solve of the double-integrator preset."""
    return solve_lower_stage(di_problem)


@pytest.fixture(scope="session")
def di_gaussian_problem(di_config):
    cfg = di_config.with_overrides(mode="gaussian")
    return cfg.to_problem()


@pytest.fixture(scope="session")
def di_gaussian_solution(di_gaussian_problem):
    return solve_lower_stage(di_gaussian_problem)


@pytest.fixture(scope="session")
def di_ira(di_config, di_problem):
    return ira_solve(di_problem, di_config.ira_config())


@pytest.fixture(scope="session")
def sc_poly_ira():
    cfg = preset("spacecraft_polytope")
    return ira_solve(cfg.to_problem(), cfg.ira_config())


@pytest.fixture(scope="session")
def sc_cone_config():
    return preset("spacecraft_cone")


@pytest.fixture(scope="session")
def sc_cone_problem(sc_cone_config):
    return sc_cone_config.to_problem()


@pytest.fixture(scope="session")
def sc_cone_ira(sc_cone_config, sc_cone_problem):
    return ira_solve(sc_cone_problem, sc_cone_config.ira_config())
