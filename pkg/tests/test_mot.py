import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agginf.mot import (
    InfeasibleError,
    cost_from_potentials,
    dense_marginals,
    kernel_from_potentials,
    kl_divergence,
    project,
    sinkhorn,
)
from agginf.pgm import SizeError, TreeGraph, random_potentials

from oracles import two_marginal_sinkhorn


class TestTwoMarginal:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(2, 6), m=st.integers(2, 6))
    def test_matches_plain_scaling(self, seed, n, m):
        rng = np.random.default_rng(seed)
        K = rng.uniform(0.1, 1.0, size=(n, m))
        a, b = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
        res = sinkhorn(K, {0: a, 1: b}, tol=1e-13)
        assert res.converged
        np.testing.assert_allclose(res.plan, two_marginal_sinkhorn(K, a, b), atol=1e-10)
        np.testing.assert_allclose(res.marginal(0), a, atol=1e-12)

    def test_epsilon_cost_path(self):
        rng = np.random.default_rng(0)
        C = rng.uniform(size=(3, 4))
        a, b = np.full(3, 1 / 3), np.full(4, 1 / 4)
        from_cost = sinkhorn(C, {0: a, 1: b}, epsilon=0.5, tol=1e-13)
        from_kernel = sinkhorn(np.exp(-C / 0.5), {0: a, 1: b}, tol=1e-13)
        np.testing.assert_allclose(from_cost.plan, from_kernel.plan, atol=1e-14)

    def test_small_epsilon_approaches_assignment(self):
        C = 1.0 - np.eye(3)
        a = np.full(3, 1 / 3)
        res = sinkhorn(C, {0: a, 1: a}, epsilon=0.02, tol=1e-12)
        np.testing.assert_allclose(res.plan, np.eye(3) / 3, atol=1e-6)


class TestTargets:
    def test_zero_target_entry(self):
        K = np.ones((3, 3))
        res = sinkhorn(K, {0: np.array([0.5, 0.0, 0.5])}, tol=1e-13)
        assert res.scalings[0][1] == 0.0
        np.testing.assert_allclose(res.plan[1], 0.0)

    def test_infeasible_target(self):
        K = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(InfeasibleError):
            sinkhorn(K, {0: np.array([0.2, 0.8])})

    def test_rejects_bad_targets(self):
        with pytest.raises(ValueError):
            sinkhorn(np.ones((2, 2)), {0: np.array([0.5, 0.6])})
        with pytest.raises(ValueError):
            sinkhorn(np.ones((2, 2)), {0: np.array([1.0, 0.0, 0.0])})
        with pytest.raises(ValueError):
            sinkhorn(-np.ones((2, 2)), {0: np.array([0.5, 0.5])})

    def test_no_targets_normalizes(self):
        K = np.arange(1.0, 5.0).reshape(2, 2)
        res = sinkhorn(K, {})
        np.testing.assert_allclose(res.plan, K / 10)

    def test_post_update_check(self):
        rng = np.random.default_rng(1)
        K = rng.uniform(0.1, 1, size=(2, 3, 2))
        res = sinkhorn(K, {0: np.array([0.3, 0.7]), 2: np.array([0.6, 0.4])}, post_update_check=True, tol=1e-12)
        assert res.converged

    def test_trace_decreases_overall(self):
        rng = np.random.default_rng(2)
        K = rng.uniform(0.05, 1, size=(3, 3, 3))
        t = {0: rng.dirichlet(np.ones(3)), 2: rng.dirichlet(np.ones(3))}
        res = sinkhorn(K, t, tol=1e-12)
        assert res.trace[-1] < res.trace[0]


class TestTreeKernel:
    def test_cost_and_kernel_agree(self):
        rng = np.random.default_rng(3)
        g = TreeGraph((2, 3, 2), ((0, 1), (1, 2)))
        pots = random_potentials(rng, g)
        np.testing.assert_allclose(np.exp(-cost_from_potentials(g, pots)), kernel_from_potentials(g, pots), rtol=1e-13)

    def test_size_cap(self):
        g = TreeGraph((4,) * 3, ((0, 1), (1, 2)))
        pots = random_potentials(np.random.default_rng(0), g)
        with pytest.raises(SizeError):
            kernel_from_potentials(g, pots, cap=10)

    def test_dense_marginals_hit_targets(self):
        rng = np.random.default_rng(4)
        g = TreeGraph((3, 2, 3), ((0, 1), (1, 2)), frozenset({0, 2}))
        pots = random_potentials(rng, g)
        obs = {0: rng.dirichlet(np.ones(3)), 2: rng.dirichlet(np.ones(3))}
        marg, res = dense_marginals(g, pots, obs)
        np.testing.assert_allclose(marg[0], obs[0], atol=1e-12)
        np.testing.assert_allclose(marg[2], obs[2], atol=1e-12)
        assert project(res.plan, 1).sum() == pytest.approx(1.0)


class TestKL:
    def test_zero_for_identical(self):
        B = np.full((2, 2), 0.25)
        assert kl_divergence(B, B) == pytest.approx(0.0)

    def test_infinite_off_support(self):
        assert kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0])) == np.inf

    def test_zero_entries_ignored(self):
        assert kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.0])) == pytest.approx(np.log(2))
