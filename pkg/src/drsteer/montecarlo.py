"""Moment-matched sampling and closed-loop rollout studies.

Only the first two moments of the disturbances are pinned down, so the
rollout engine offers two member families of that ambiguity set: plain
Gaussian, and a heavy-tailed multivariate Laplacian realized as a
Gaussian scale mixture with unit-mean exponential mixing (exact mean
and covariance, positive excess kurtosis).

Trials are vectorized and aggregated in a single streaming pass; full
trajectories are retained only on request.  Sampling uses a
counter-based Philox generator, so identical seeds give bit-identical
trials and parallel substreams remain available.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DimensionError, psd_sqrt
from .steering import ControllerSolution, SteeringProblem

__all__ = [
    "NoiseModel",
    "TrialResult",
    "MonteCarloSummary",
    "sample",
    "rollout",
    "run_trials",
    "estimate",
    "wilson_interval",
]

_CHUNK = 50_000  # fixed so chunking never changes the sample stream
_Z95 = 1.959963984540054


@dataclass(frozen=True)
class NoiseModel:
    """A concrete member of the moment ambiguity set, plus a seed."""

    family: str                      # "gaussian" | "laplacian"
    mean: np.ndarray
    cov: np.ndarray
    seed: int

    def __post_init__(self):
        if self.family not in ("gaussian", "laplacian"):
            raise ValueError(f"unknown sampling family {self.family!r}")
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(
                f"NoiseModel: mean length {mean.size} vs cov {cov.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def dim(self) -> int:
        return self.mean.size


def _draw(rng: np.random.Generator, family: str, mean: np.ndarray,
          chol: np.ndarray, count: int) -> np.ndarray:
    z = rng.standard_normal((count, mean.size))
    if family == "laplacian":
        mix = rng.exponential(1.0, size=count)
        return mean + np.sqrt(mix)[:, None] * (z @ chol.T)
    return mean + z @ chol.T


def sample(model: NoiseModel, count: int,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``count`` vectors with the model's exact first two moments.

    Gaussian: ``mean + L z`` with L the symmetric PSD square root of the
    covariance.  Laplacian: ``mean + sqrt(E) L z`` with an independent
    unit-mean exponential E per sample.  Deterministic given the seed.
    """
    if count < 1:
        raise ValueError("sample count must be at least 1")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(model.seed))
    return _draw(rng, model.family, model.mean, psd_sqrt(model.cov), count)


@dataclass(frozen=True)
class TrialResult:
    """One closed-loop rollout."""

    states: np.ndarray               # (N+1, n)
    inputs: np.ndarray               # (N, m)
    cost: float
    violations: np.ndarray           # (M, N) flags, steps 1..N
    joint_violation: bool


def _violation_flags(problem: SteeringProblem, states: np.ndarray) -> np.ndarray:
    """(M, N) flags for one trajectory; (1, N) for a cone set."""
    N = problem.spec.horizon
    if problem.cone is not None:
        cone = problem.cone
        flags = np.zeros((1, N), dtype=bool)
        for k in range(1, N + 1):
            x = states[k]
            flags[0, k - 1] = (np.linalg.norm(cone.A @ x + cone.b)
                               > float(cone.c @ x + cone.d))
        return flags
    hs_list = problem.halfspaces
    flags = np.zeros((len(hs_list), N), dtype=bool)
    for i, hs in enumerate(hs_list):
        for k in range(1, N + 1):
            flags[i, k - 1] = float(hs.normal @ states[k]) > hs.offset
    return flags


def rollout(problem: SteeringProblem, sol: ControllerSolution,
            x0: np.ndarray, W: np.ndarray) -> TrialResult:
    """Roll one disturbance realization through the closed loop.

    The policy feeds back the noise history ``A (x0 - mu0) + D W``; the
    realized cost is the quadratic integrand of the expected cost.
    """
    cs = problem.concatenation
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    W = np.atleast_1d(np.asarray(W, dtype=float))
    n, m, N = cs.state_dim, cs.input_dim, cs.horizon
    if x0.size != n:
        raise DimensionError(f"x0 has length {x0.size}, expected {n}")
    if W.size != cs.D.shape[1]:
        raise DimensionError(f"W has length {W.size}, expected {cs.D.shape[1]}")
    noise_hist = cs.A @ (x0 - problem.init.mean) + cs.D @ W
    U = sol.V + sol.K @ noise_hist
    X = cs.A @ x0 + cs.B @ U + cs.D @ W
    cost = float(X @ problem.state_weight_full @ X
                 + U @ problem.control_weight_full @ U)
    states = X.reshape(N + 1, n)
    flags = _violation_flags(problem, states)
    return TrialResult(states=states, inputs=U.reshape(N, m), cost=cost,
                       violations=flags, joint_violation=bool(flags.any()))


def wilson_interval(successes: int, trials: int) -> tuple[float, float]:
    """95% Wilson score interval for a binomial rate."""
    if trials < 1:
        raise ValueError("empty trial set")
    p = successes / trials
    z2 = _Z95 * _Z95
    denom = 1.0 + z2 / trials
    center = (p + z2 / (2 * trials)) / denom
    half = _Z95 * np.sqrt(p * (1 - p) / trials + z2 / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass(frozen=True)
class MonteCarloSummary:
    trials: int
    joint_rate: float
    joint_wilson: tuple[float, float]
    cell_rates: np.ndarray           # (M, N) empirical violation rates
    mean_cost: float
    family: str
    seed: int
    trajectories: np.ndarray | None = None  # (trials, N+1, n) when retained


def estimate(results: list[TrialResult]) -> MonteCarloSummary:
    """Aggregate a list of trials into rates, mean cost and a Wilson CI."""
    if not results:
        raise ValueError("empty trial set")
    joint = sum(r.joint_violation for r in results)
    cells = np.sum([r.violations for r in results], axis=0).astype(float)
    nn = len(results)
    return MonteCarloSummary(
        trials=nn,
        joint_rate=joint / nn,
        joint_wilson=wilson_interval(joint, nn),
        cell_rates=cells / nn,
        mean_cost=float(np.mean([r.cost for r in results])),
        family="unknown", seed=-1,
    )


def run_trials(problem: SteeringProblem, sol: ControllerSolution, trials: int,
               seed: int, family: str = "laplacian",
               keep_trajectories: bool = False) -> MonteCarloSummary:
    """Vectorized rollout study.

    The initial state is drawn with the problem's initial moments and
    the chosen family; each disturbance step gets an independent draw
    from the same family with the spec's noise covariance.  One Philox
    stream seeded by ``seed`` drives everything, consumed in a fixed
    order (initial block first, then the stacked noise, chunks of fixed
    size), so results are bit-reproducible.
    """
    if trials < 1:
        raise ValueError("trial count must be at least 1")
    cs = problem.concatenation
    n, N, r = cs.state_dim, cs.horizon, problem.spec.noise_dim
    rng = np.random.Generator(np.random.Philox(seed))
    L0 = psd_sqrt(problem.init.cov)
    Lw = psd_sqrt(problem.spec.noise_cov)

    joint = 0
    cells = np.zeros((_violation_shape(problem), N))
    cost_sum = 0.0
    kept = [] if keep_trajectories else None

    done = 0
    while done < trials:
        batch = min(_CHUNK, trials - done)
        x0 = _draw(rng, family, problem.init.mean, L0, batch)
        zw = rng.standard_normal((batch, N, r))
        if family == "laplacian":
            mix = rng.exponential(1.0, size=(batch, N))
            W = np.sqrt(mix)[:, :, None] * (zw @ Lw.T)
        else:
            W = zw @ Lw.T
        W = W.reshape(batch, N * r)
        noise_hist = (x0 - problem.init.mean) @ cs.A.T + W @ cs.D.T
        U = sol.V + noise_hist @ sol.K.T
        X = x0 @ cs.A.T + U @ cs.B.T + W @ cs.D.T
        cost_sum += float(np.einsum("ti,ij,tj->", X, problem.state_weight_full, X)
                          + np.einsum("ti,ij,tj->", U, problem.control_weight_full, U))
        flags = _batch_flags(problem, X, batch)
        if flags is not None:
            cells += flags.sum(axis=0)
            joint += int(flags.any(axis=(1, 2)).sum())
        if kept is not None:
            kept.append(X.reshape(batch, N + 1, n))
        done += batch

    return MonteCarloSummary(
        trials=trials,
        joint_rate=joint / trials,
        joint_wilson=wilson_interval(joint, trials),
        cell_rates=cells / trials,
        mean_cost=cost_sum / trials,
        family=family,
        seed=int(seed),
        trajectories=np.concatenate(kept) if kept else None,
    )


def _violation_shape(problem: SteeringProblem) -> int:
    if problem.cone is not None:
        return 1
    return len(problem.halfspaces)


def _batch_flags(problem: SteeringProblem, X: np.ndarray, batch: int):
    """(batch, M, N) violation flags for a stacked trajectory batch."""
    N, n = problem.spec.horizon, problem.spec.state_dim
    if problem.cone is not None:
        cone = problem.cone
        flags = np.zeros((batch, 1, N), dtype=bool)
        for k in range(1, N + 1):
            xs = X[:, k * n:(k + 1) * n]
            lhs = np.linalg.norm(xs @ cone.A.T + cone.b, axis=1)
            flags[:, 0, k - 1] = lhs > xs @ cone.c + cone.d
        return flags
    hs_list = problem.halfspaces
    if not hs_list:
        return None
    flags = np.zeros((batch, len(hs_list), N), dtype=bool)
    for i, hs in enumerate(hs_list):
        for k in range(1, N + 1):
            xs = X[:, k * n:(k + 1) * n]
            flags[:, i, k - 1] = xs @ hs.normal > hs.offset
    return flags
