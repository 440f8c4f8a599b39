import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agginf.bp import (
    MessageStore,
    all_beliefs,
    all_edge_beliefs,
    bp_solve,
    message_residuals,
    tree_schedule,
)
from agginf.pgm import Potentials, TreeGraph, joint_distribution, random_potentials, random_tree

from oracles import enumerate_marginals


def random_instance(seed, J=5, dmax=3):
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in rng.integers(2, dmax + 1, size=J))
    graph = TreeGraph(dims, random_tree(rng, J), frozenset())
    return graph, random_potentials(rng, graph)


class TestTreeBP:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6), J=st.integers(1, 6))
    def test_matches_enumeration(self, seed, J):
        graph, pots = random_instance(seed, J)
        store = bp_solve(graph, pots)
        for got, want in zip(all_beliefs(store), enumerate_marginals(graph, pots)):
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_edge_beliefs_match_joint(self):
        graph, pots = random_instance(11, 4)
        P = joint_distribution(graph, pots)
        store = bp_solve(graph, pots)
        for (i, j), b in all_edge_beliefs(store, pots).items():
            axes = tuple(a for a in range(4) if a not in (i, j))
            np.testing.assert_allclose(b, P.sum(axis=axes), atol=1e-12)

    def test_node_factors_act_as_evidence(self):
        graph, pots = random_instance(3, 4)
        factors = {0: np.array([1.0, 0.0] + [0.0] * (graph.state_dims[0] - 2)), 2: np.linspace(0.2, 1, graph.state_dims[2])}
        store = bp_solve(graph, pots, node_factors=factors)
        want = enumerate_marginals(graph, pots, factors)
        for got, w in zip(all_beliefs(store, factors), want):
            np.testing.assert_allclose(got, w, atol=1e-12)

    def test_schedule_covers_each_directed_edge_once(self):
        graph, _ = random_instance(5, 7)
        sched = tree_schedule(graph, root=3)
        assert sorted(sched) == sorted(graph.directed_edges())

    def test_fixed_point_residuals_vanish(self):
        graph, pots = random_instance(6, 6)
        store = bp_solve(graph, pots)
        assert max(message_residuals(store, pots).values()) < 1e-14

    def test_explicit_schedule_runs_once(self):
        graph, pots = random_instance(7, 3)
        store = MessageStore.uniform(graph)
        edges = graph.directed_edges()[:2]
        bp_solve(graph, pots, schedule=edges, store=store)
        assert store.updates == 2

    def test_messages_are_normalized(self):
        graph, pots = random_instance(8, 5)
        store = bp_solve(graph, pots)
        for m in store.messages.values():
            assert m.sum() == pytest.approx(1.0)


class TestLoopyBP:
    def square(self, seed=0, coupling=0.3):
        rng = np.random.default_rng(seed)
        graph = TreeGraph((2,) * 4, ((0, 1), (1, 2), (2, 3), (0, 3)), require_tree=False)
        tables = {e: np.exp(coupling * rng.normal(size=(2, 2))) for e in graph.edges}
        return graph, Potentials(graph, tables)

    @pytest.mark.parametrize("schedule", ["synchronous", "sequential"])
    def test_converges_on_weak_square(self, schedule):
        graph, pots = self.square()
        store = bp_solve(graph, pots, schedule=schedule, tol=1e-12, max_iters=2000)
        assert store.converged
        assert max(message_residuals(store, pots).values()) < 1e-10
        # weak couplings keep loopy beliefs close to the exact marginals
        for got, want in zip(all_beliefs(store), enumerate_marginals(graph, pots)):
            np.testing.assert_allclose(got, want, atol=0.05)

    def test_reports_nonconvergence(self):
        graph, pots = self.square(coupling=2.0)
        store = bp_solve(graph, pots, schedule="synchronous", max_iters=2, tol=0.0)
        assert not store.converged
        assert store.iterations == 2
        assert len(store.trace) == 2

    def test_unknown_schedule(self):
        graph, pots = self.square()
        with pytest.raises(ValueError):
            bp_solve(graph, pots, schedule="bogus")
