import json

import numpy as np
import pytest

from agginf.pgm import (
    DirectedModel,
    Potentials,
    SizeError,
    StructureError,
    TreeGraph,
    UnsupportedStructureError,
    joint_distribution,
    load_model,
    model_from_dict,
    model_to_dict,
    moralize,
    normalize_observed_leaves,
    random_potentials,
    validate_tree,
)
from agginf.mot import dense_marginals

from oracles import enumerate_marginals


def softmax(a, axis=-1):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class TestValidateTree:
    def test_path_is_tree(self):
        g = TreeGraph((2, 2, 2), ((0, 1), (1, 2)))
        assert validate_tree(g) == (True, "")

    def test_square_reports_cycle(self):
        g = TreeGraph((2,) * 4, ((0, 1), (1, 2), (2, 3), (0, 3)), require_tree=False)
        ok, why = validate_tree(g)
        assert not ok
        assert why.startswith("cycle:")
        for v in "0123":
            assert v in why

    def test_single_node(self):
        assert validate_tree(TreeGraph((3,), ()))[0]

    def test_disconnected(self):
        g = TreeGraph((2,) * 4, ((0, 1), (2, 3)), require_tree=False)
        ok, why = validate_tree(g)
        assert not ok and "disconnected" in why

    def test_constructor_rejects_loop(self):
        with pytest.raises(StructureError):
            TreeGraph((2,) * 3, ((0, 1), (1, 2), (0, 2)))

    def test_bad_edges(self):
        with pytest.raises(StructureError):
            TreeGraph((2, 2), ((0, 0),))
        with pytest.raises(StructureError):
            TreeGraph((2, 2), ((0, 1), (1, 0)))
        with pytest.raises(StructureError):
            TreeGraph((2, 2), ((0, 1),), observed=frozenset({5}))

    def test_tree_path(self):
        g = TreeGraph((2,) * 6, ((0, 3), (1, 3), (3, 5), (2, 5), (4, 5)))
        assert g.tree_path(0, 2) == [0, 3, 5, 2]
        assert g.tree_path(4, 4) == [4]


class TestPotentials:
    def test_transpose_view(self):
        g = TreeGraph((2, 3), ((0, 1),))
        t = np.arange(1, 7, dtype=float).reshape(2, 3)
        p = Potentials(g, {(1, 0): t.T})
        np.testing.assert_array_equal(p[0, 1], t)
        np.testing.assert_array_equal(p[1, 0], t.T)

    def test_rejects_nonpositive(self):
        g = TreeGraph((2, 2), ((0, 1),))
        with pytest.raises(ValueError):
            Potentials(g, {(0, 1): np.eye(2)})
        Potentials(g, {(0, 1): np.eye(2)}, strict=False)

    def test_shape_and_coverage(self):
        g = TreeGraph((2, 3), ((0, 1),))
        with pytest.raises(ValueError):
            Potentials(g, {(0, 1): np.ones((3, 2))})
        with pytest.raises(ValueError):
            Potentials(g, {})


class TestJoint:
    def test_identity_pair(self):
        g = TreeGraph((2, 2), ((0, 1),))
        P = joint_distribution(g, Potentials(g, {(0, 1): np.eye(2)}, strict=False))
        np.testing.assert_allclose(P, np.diag([0.5, 0.5]))

    def test_uniform_path(self):
        g = TreeGraph((2, 2, 2), ((0, 1), (1, 2)))
        P = joint_distribution(g, Potentials(g, {(0, 1): np.ones((2, 2)), (1, 2): np.ones((2, 2))}))
        np.testing.assert_allclose(P, np.full((2, 2, 2), 1 / 8))

    def test_star_against_enumeration(self):
        rng = np.random.default_rng(0)
        g = TreeGraph((2, 3, 2, 3), ((0, 1), (1, 2), (1, 3)))
        pots = random_potentials(rng, g)
        P = joint_distribution(g, pots)
        for v, m in enumerate(enumerate_marginals(g, pots)):
            axes = tuple(a for a in range(4) if a != v)
            np.testing.assert_allclose(P.sum(axis=axes), m, atol=1e-14)
        x = (1, 2, 0, 1)
        w = pots[0, 1][1, 2] * pots[1, 2][2, 0] * pots[1, 3][2, 1]
        np.testing.assert_allclose(P[x] / P[0, 0, 0, 0], w / (pots[0, 1][0, 0] * pots[1, 2][0, 0] * pots[1, 3][0, 0]))

    def test_size_cap(self):
        g = TreeGraph((10,) * 4, ((0, 1), (1, 2), (2, 3)))
        pots = random_potentials(np.random.default_rng(0), g)
        with pytest.raises(SizeError):
            joint_distribution(g, pots, cap=1000)


class TestMoralize:
    def test_collider_with_child(self):
        # X0 -> X1 <- X2, X1 -> X3 with a logistic two-parent table
        rng = np.random.default_rng(1)
        w1, w2 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        cpt1 = softmax(w1[:, None, :] + w2[None, :, :])
        model = DirectedModel(
            (2, 2, 2, 2),
            {1: (0, 2), 3: (1,)},
            {0: np.array([0.3, 0.7]), 2: np.array([0.6, 0.4]), 1: cpt1, 3: softmax(rng.normal(size=(2, 2)))},
        )
        graph, pots = moralize(model)
        assert set(graph.edges) == {(0, 1), (1, 2), (1, 3), (0, 2)}
        assert not graph.require_tree
        P = joint_distribution(graph, Potentials(graph, pots))
        np.testing.assert_allclose(P, model.joint(), atol=1e-12)

    def test_hmm_chain(self):
        rng = np.random.default_rng(2)
        T, d, o = 3, 2, 3
        pi = rng.dirichlet(np.ones(d))
        A = rng.dirichlet(np.ones(d), size=d)
        B = rng.dirichlet(np.ones(o), size=d)
        dims = (d,) * T + (o,) * T
        parents = {1: (0,), 2: (1,), 3: (0,), 4: (1,), 5: (2,)}
        cpts = {0: pi, 1: A, 2: A, 3: B, 4: B, 5: B}
        model = DirectedModel(dims, parents, cpts)
        graph, pots = moralize(model)
        assert graph.require_tree
        assert set(graph.edges) == {(0, 1), (1, 2), (0, 3), (1, 4), (2, 5)}
        table = {(p.i, p.j): p.table for p in pots}
        np.testing.assert_allclose(table[(1, 2)], A)
        np.testing.assert_allclose(table[(2, 5)], B)
        P = joint_distribution(graph, Potentials(graph, pots))
        np.testing.assert_allclose(P, model.joint(), atol=1e-14)

    def test_single_edge_absorbs_prior(self):
        pi = np.array([0.2, 0.8])
        A = np.array([[0.9, 0.1], [0.4, 0.6]])
        graph, pots = moralize(DirectedModel((2, 2), {1: (0,)}, {0: pi, 1: A}))
        assert graph.edges == ((0, 1),)
        np.testing.assert_allclose(pots[0].table, pi[:, None] * A)

    def test_three_way_interaction_rejected(self):
        rng = np.random.default_rng(3)
        cpt = rng.dirichlet(np.ones(2), size=(2, 2))
        model = DirectedModel((2, 2, 2), {2: (0, 1)}, {0: np.array([0.5, 0.5]), 1: np.array([0.5, 0.5]), 2: cpt})
        with pytest.raises(UnsupportedStructureError):
            moralize(model)
        graph, pots = moralize(model, allow_approximation=True)
        assert len(pots) == 3

    def test_three_parents_rejected(self):
        cpt = np.full((2, 2, 2, 2), 0.5)
        prior = np.array([0.5, 0.5])
        model = DirectedModel((2,) * 4, {3: (0, 1, 2)}, {0: prior, 1: prior, 2: prior, 3: cpt})
        with pytest.raises(UnsupportedStructureError):
            moralize(model)


class TestNormalizeObservedLeaves:
    def test_leaf_unchanged(self):
        g = TreeGraph((2, 2, 2), ((0, 1), (1, 2)), frozenset({0}))
        g2, _, mapping = normalize_observed_leaves(g)
        assert g2 is g
        assert mapping == {0: 0, 1: 1, 2: 2}

    def test_internal_node_split_matches_dense(self):
        rng = np.random.default_rng(4)
        g = TreeGraph((3, 2, 3), ((0, 1), (1, 2)), frozenset({1}))
        pots = random_potentials(rng, g)
        g2, p2, mapping = normalize_observed_leaves(g, pots)
        assert g2.observed == frozenset({3}) and mapping[3] == 1
        assert g2.is_leaf(3)
        y = np.array([0.3, 0.7])
        direct, _ = dense_marginals(g, pots, {1: y})
        split, _ = dense_marginals(g2, p2, {3: y})
        for v in range(3):
            np.testing.assert_allclose(split[v], direct[v], atol=1e-10)
        np.testing.assert_allclose(split[3], split[1], atol=1e-12)

    def test_star_center(self):
        rng = np.random.default_rng(5)
        g = TreeGraph((2,) * 4, ((0, 1), (0, 2), (0, 3)), frozenset({0, 2}))
        pots = random_potentials(rng, g)
        g2, p2, mapping = normalize_observed_leaves(g, pots)
        assert g2.node_count == 5
        np.testing.assert_array_equal(p2[0, 4], np.eye(2))
        obs = {0: np.array([0.4, 0.6]), 2: np.array([0.1, 0.9])}
        direct, _ = dense_marginals(g, pots, obs)
        split, _ = dense_marginals(g2, p2, {4: obs[0], 2: obs[2]})
        for v in range(4):
            np.testing.assert_allclose(split[v], direct[v], atol=1e-10)


class TestModelFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        g = TreeGraph((2, 3, 2), ((0, 1), (1, 2)), frozenset({2}))
        pots = random_potentials(rng, g)
        doc = model_to_dict(g, pots, {2: np.array([0.25, 0.75])})
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        g2, p2, obs = load_model(path)
        assert g2 == g
        np.testing.assert_array_equal(p2[1, 2], pots[1, 2])
        np.testing.assert_array_equal(obs[2], [0.25, 0.75])

    def test_directed_section(self):
        doc = {
            "nodes": [{"id": 0, "dim": 2}, {"id": 1, "dim": 2, "observed": True, "observation": [0.5, 0.5]}],
            "directed": {"parents": {"1": [0]}, "cpts": {"0": [0.2, 0.8], "1": [0.9, 0.1, 0.3, 0.7]}},
        }
        g, pots, obs = model_from_dict(doc)
        np.testing.assert_allclose(pots[0, 1], [[0.18, 0.02], [0.24, 0.56]])
        assert g.observed == frozenset({1})
