from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drsteer import (
    DimensionError,
    LinearSystemSpec,
    MomentPair,
    NotPsdError,
    build_concatenation,
    propagate_covariance,
    propagate_mean,
    psd_sqrt,
    time_invariant_spec,
)
from conftest import random_moments, random_spec


def stepwise_rollout(spec, x0, U, W):
    """Reference oracle: iterate the raw recursion step by step."""
    n, m, r = spec.state_dim, spec.input_dim, spec.noise_dim
    xs = [np.asarray(x0, dtype=float)]
    for k in range(spec.horizon):
        xs.append(spec.step(k, xs[-1], U[k * m:(k + 1) * m], W[k * r:(k + 1) * r]))
    return np.concatenate(xs)


class TestStacking:
    def test_single_step_blocks(self):
        A = np.array([[1.0, 0.3], [0.0, 1.0]])
        B = np.array([[0.1], [0.2]])
        D = np.array([[0.5], [0.0]])
        spec = time_invariant_spec(A, B, D, np.eye(1), horizon=1)
        cs = build_concatenation(spec, MomentPair(np.zeros(2), np.eye(2)))
        np.testing.assert_allclose(cs.A, np.vstack([np.eye(2), A]))
        np.testing.assert_allclose(cs.B, np.vstack([np.zeros((2, 1)), B]))
        np.testing.assert_allclose(cs.D, np.vstack([np.zeros((2, 1)), D]))

    def test_two_step_time_invariant_blocks(self):
        rng = np.random.default_rng(7)
        A = rng.normal(size=(2, 2))
        B = rng.normal(size=(2, 1))
        D = np.eye(2)
        spec = time_invariant_spec(A, B, D, np.eye(2), horizon=2)
        cs = build_concatenation(spec, MomentPair(np.zeros(2), np.eye(2)))
        np.testing.assert_allclose(cs.A, np.vstack([np.eye(2), A, A @ A]))
        expected_B = np.block([
            [np.zeros((2, 1)), np.zeros((2, 1))],
            [B, np.zeros((2, 1))],
            [A @ B, B],
        ])
        np.testing.assert_allclose(cs.B, expected_B)

    def test_scalar_uncontrolled_covariance(self):
        # dense-product oracle: stack = [1; 1], noise map = [0; 1], so
        # A cov0 A' + D covW D' = [[1,1],[1,1]] + [[0,0],[0,1]]
        spec = time_invariant_spec([[1.0]], [[1.0]], [[1.0]], [[1.0]], horizon=1)
        cs = build_concatenation(spec, MomentPair([0.0], [[1.0]]))
        np.testing.assert_allclose(cs.sigma_y, [[1.0, 1.0], [1.0, 2.0]], atol=1e-12)

    def test_dimension_mismatch_names_step(self):
        A = [np.eye(2), np.eye(2)]
        B = [np.ones((2, 1)), np.ones((3, 1))]
        D = [np.eye(2), np.eye(2)]
        with pytest.raises(DimensionError, match=r"B\[1\]"):
            LinearSystemSpec(tuple(A), tuple(B), tuple(D), np.eye(2))

    def test_concatenated_equals_stepwise(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            spec = random_spec(rng)
            init = random_moments(rng, spec.state_dim)
            cs = build_concatenation(spec, init)
            for _ in range(10):
                x0 = rng.normal(size=spec.state_dim)
                U = rng.normal(size=spec.horizon * spec.input_dim)
                W = rng.normal(size=spec.horizon * spec.noise_dim)
                stacked = cs.A @ x0 + cs.B @ U + cs.D @ W
                np.testing.assert_allclose(
                    stacked, stepwise_rollout(spec, x0, U, W), atol=1e-10)


class TestPropagation:
    def test_zero_mean_zero_input(self):
        rng = np.random.default_rng(0)
        spec = random_spec(rng, horizon=3)
        cs = build_concatenation(spec, random_moments(rng, spec.state_dim))
        out = propagate_mean(cs, np.zeros(spec.state_dim),
                             np.zeros(spec.horizon * spec.input_dim))
        np.testing.assert_allclose(out, 0.0)

    def test_free_response(self):
        rng = np.random.default_rng(1)
        spec = random_spec(rng, horizon=4)
        cs = build_concatenation(spec, random_moments(rng, spec.state_dim))
        mu0 = rng.normal(size=spec.state_dim)
        out = propagate_mean(cs, mu0, np.zeros(spec.horizon * spec.input_dim))
        np.testing.assert_allclose(out, cs.A @ mu0, atol=1e-12)

    def test_mean_matches_stepwise_oracle(self):
        rng = np.random.default_rng(2)
        spec = random_spec(rng, horizon=3)
        cs = build_concatenation(spec, random_moments(rng, spec.state_dim))
        mu0 = rng.normal(size=spec.state_dim)
        V = rng.normal(size=spec.horizon * spec.input_dim)
        expected = stepwise_rollout(spec, mu0, V,
                                    np.zeros(spec.horizon * spec.noise_dim))
        np.testing.assert_allclose(propagate_mean(cs, mu0, V), expected, atol=1e-10)

    def test_mean_length_mismatch(self):
        rng = np.random.default_rng(3)
        spec = random_spec(rng, horizon=2)
        cs = build_concatenation(spec, random_moments(rng, spec.state_dim))
        with pytest.raises(DimensionError):
            propagate_mean(cs, np.zeros(spec.state_dim), np.zeros(3 * spec.input_dim))

    def test_zero_gain_covariance_is_uncontrolled(self):
        rng = np.random.default_rng(4)
        spec = random_spec(rng, horizon=3)
        cs = build_concatenation(spec, random_moments(rng, spec.state_dim))
        K = np.zeros((spec.horizon * spec.input_dim, cs.traj_dim))
        np.testing.assert_allclose(propagate_covariance(cs, K), cs.sigma_y, atol=1e-12)

    def test_zero_uncertainty_covariance(self):
        spec = time_invariant_spec(np.eye(2), np.eye(2), np.eye(2),
                                   np.zeros((2, 2)), horizon=2)
        cs = build_concatenation(spec, MomentPair(np.ones(2), np.zeros((2, 2))))
        K = np.ones((4, 6)) * 0.3
        np.testing.assert_allclose(propagate_covariance(cs, K), 0.0, atol=1e-12)

    def test_covariance_matches_monte_carlo(self):
        # Monte Carlo oracle: sample the closed loop and compare the
        # sample covariance elementwise within 5 standard errors
        rng = np.random.default_rng(5)
        spec = random_spec(rng, n=2, m=1, r=2, horizon=2, time_varying=False)
        init = random_moments(rng, 2)
        cs = build_concatenation(spec, init)
        K = rng.normal(size=(2, 6)) * 0.4
        target = propagate_covariance(cs, K)

        trials = 100_000
        L0 = psd_sqrt(init.cov)
        Lw = psd_sqrt(cs.sigma_w_full)
        x0 = init.mean + rng.standard_normal((trials, 2)) @ L0.T
        W = rng.standard_normal((trials, 4)) @ Lw.T
        noise_hist = (x0 - init.mean) @ cs.A.T + W @ cs.D.T
        X = x0 @ cs.A.T + (noise_hist @ K.T) @ cs.B.T + W @ cs.D.T
        sample_cov = np.cov(X, rowvar=False)
        se = np.sqrt((np.outer(np.diag(target), np.diag(target))
                      + target ** 2) / trials)
        assert np.all(np.abs(sample_cov - target) <= 5 * se + 1e-12)

    def test_covariance_psd_for_any_gain(self):
        rng = np.random.default_rng(6)
        spec = random_spec(rng, horizon=3)
        cs = build_concatenation(spec, random_moments(rng, spec.state_dim))
        for _ in range(20):
            K = rng.normal(size=(spec.horizon * spec.input_dim, cs.traj_dim)) * 2.0
            w = np.linalg.eigvalsh(propagate_covariance(cs, K))
            assert w.min() >= -1e-9


class TestInitialBlockStructure:
    def test_first_input_block_row_is_zero(self):
        rng = np.random.default_rng(8)
        spec = random_spec(rng)
        cs = build_concatenation(spec, random_moments(rng, spec.state_dim))
        n = spec.state_dim
        np.testing.assert_allclose(cs.B[:n], 0.0)
        np.testing.assert_allclose(cs.D[:n], 0.0)

    def test_initial_moments_recovered(self):
        rng = np.random.default_rng(9)
        spec = random_spec(rng)
        init = random_moments(rng, spec.state_dim)
        cs = build_concatenation(spec, init)
        for _ in range(5):
            V = rng.normal(size=spec.horizon * spec.input_dim)
            mean = propagate_mean(cs, init.mean, V)
            np.testing.assert_allclose(cs.state_block(mean, 0), init.mean, atol=1e-12)
        # selector form of the same fact
        E0 = cs.selector(0)
        np.testing.assert_allclose(E0 @ cs.sigma_y @ E0.T, init.cov, atol=1e-10)


class TestPsdSqrt:
    def test_identity(self):
        np.testing.assert_allclose(psd_sqrt(np.eye(3)), np.eye(3), atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(psd_sqrt(np.diag([4.0, 9.0])),
                                   np.diag([2.0, 3.0]), atol=1e-12)

    def test_random_reconstruction(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            G = rng.normal(size=(5, 5))
            M = G.T @ G
            S = psd_sqrt(M)
            np.testing.assert_allclose(S, S.T, atol=1e-12)
            rel = np.linalg.norm(S @ S - M) / np.linalg.norm(M)
            assert rel < 1e-8

    def test_rank_deficient(self):
        v = np.array([1.0, -2.0, 0.5])
        M = np.outer(v, v)
        S = psd_sqrt(M)
        assert np.linalg.norm(S @ S - M) / np.linalg.norm(M) < 1e-10

    def test_rejects_indefinite(self):
        with pytest.raises(NotPsdError):
            psd_sqrt(np.diag([1.0, -1e-3]))

    def test_rejects_asymmetric(self):
        with pytest.raises(NotPsdError):
            psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=10**6))
    def test_always_psd_and_symmetric(self, n, seed):
        rng = np.random.default_rng(seed)
        G = rng.normal(size=(n, n))
        S = psd_sqrt(G @ G.T)
        assert np.allclose(S, S.T)
        assert np.linalg.eigvalsh(S).min() >= -1e-10
