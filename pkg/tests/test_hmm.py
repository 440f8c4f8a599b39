import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agginf import kernels
from agginf.hmm import (
    HmmModel,
    collective_forward_backward,
    hmm_from_dict,
    hmm_to_dict,
    hmm_to_tree,
    load_hmm,
    load_observations,
    pairwise_marginals,
    random_hmm,
    standard_forward_backward,
)
from agginf.mot import InfeasibleError, dense_marginals
from agginf.sbp import sbp_solve


def instance(seed, T=5, d=3, o=4):
    rng = np.random.default_rng(seed)
    model = random_hmm(rng, T, d, o)
    y = rng.dirichlet(np.ones(o), size=T)
    return model, y


class TestModel:
    def test_validation(self):
        with pytest.raises(ValueError):
            HmmModel(0, [1.0], [[1.0]], [[1.0]])
        with pytest.raises(ValueError):
            HmmModel(2, [0.5, 0.5], [[0.5, 0.6], [0.5, 0.5]], np.eye(2))
        with pytest.raises(ValueError):
            HmmModel(2, [0.5, 0.5], np.eye(2), [[0.5, 0.5], [0.6, 0.5]])

    def test_prior_marginals(self):
        model, _ = instance(0)
        p = model.prior_marginals()
        np.testing.assert_allclose(p[2], model.pi @ model.trans(0) @ model.trans(1))

    def test_time_varying_tables(self):
        rng = np.random.default_rng(1)
        trans = rng.dirichlet(np.ones(2), size=(3, 2))
        model = HmmModel(4, [0.5, 0.5], trans, np.eye(2))
        np.testing.assert_array_equal(model.trans(2), trans[2])


class TestCollectiveForwardBackward:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10**6), T=st.integers(1, 6))
    def test_matches_sbp_on_tree(self, seed, T):
        model, y = instance(seed, T=T)
        _, marg = collective_forward_backward(model, y, tol=1e-12)
        g, pots = hmm_to_tree(model)
        res = sbp_solve(g, pots, {T + t: y[t] for t in range(T)}, tol=1e-12)
        np.testing.assert_allclose(marg, np.array(res.marginals[:T]), atol=1e-9)

    def test_matches_dense(self):
        model, y = instance(2, T=4, d=2, o=3)
        _, marg = collective_forward_backward(model, y, tol=1e-13)
        g, pots = hmm_to_tree(model)
        dense, _ = dense_marginals(g, pots, {4 + t: y[t] for t in range(4)})
        np.testing.assert_allclose(marg, np.array(dense[:4]), atol=1e-9)

    def test_same_sweep_count_as_sbp(self):
        model, y = instance(3, T=6)
        msgs, _ = collective_forward_backward(model, y, tol=1e-10)
        g, pots = hmm_to_tree(model)
        res = sbp_solve(g, pots, {6 + t: y[t] for t in range(6)}, tol=1e-10)
        assert msgs.sweeps == res.state.sweeps

    def test_single_sequence_is_standard_posterior(self):
        model, _ = instance(4, T=6)
        seq = [0, 3, 1, 1, 2, 0]
        y = np.eye(model.obs_dim)[seq]
        _, marg = collective_forward_backward(model, y, tol=1e-13)
        np.testing.assert_allclose(marg, standard_forward_backward(model, seq), atol=1e-10)

    def test_single_step(self):
        model, y = instance(5, T=1)
        msgs, marg = collective_forward_backward(model, y, tol=1e-13)
        E = model.emis(0)
        p_obs = E @ model.pi
        want = model.pi * (E.T @ (y[0] / p_obs))
        np.testing.assert_allclose(marg[0], want / want.sum(), atol=1e-12)
        assert msgs.sweeps == 1

    def test_observed_marginals_match(self):
        model, y = instance(6, T=7)
        msgs, _ = collective_forward_backward(model, y, tol=1e-12)
        for t in range(7):
            p = msgs.xi[t] * msgs.u[t]
            np.testing.assert_allclose(p / p.sum(), y[t], atol=1e-11)

    def test_flow_conservation(self):
        model, y = instance(7, T=6)
        msgs, marg = collective_forward_backward(model, y, tol=1e-12)
        pw = pairwise_marginals(msgs, model)
        for t in range(5):
            np.testing.assert_allclose(pw[t].sum(axis=1), marg[t], atol=1e-10)
            np.testing.assert_allclose(pw[t].sum(axis=0), marg[t + 1], atol=1e-10)

    def test_missing_steps(self):
        model, y = instance(8, T=5)
        rows = [y[0], None, y[2], np.full(model.obs_dim, np.nan), y[4]]
        _, marg = collective_forward_backward(model, rows, tol=1e-12)
        g, pots = hmm_to_tree(model, observed=[0, 2, 4])
        res = sbp_solve(g, pots, {5: y[0], 7: y[2], 9: y[4]}, tol=1e-12)
        np.testing.assert_allclose(marg, np.array(res.marginals[:5]), atol=1e-9)

    def test_no_observations_gives_prior(self):
        model, _ = instance(9, T=4)
        msgs, marg = collective_forward_backward(model, [None] * 4)
        assert msgs.converged
        np.testing.assert_allclose(marg, model.prior_marginals(), atol=1e-14)

    def test_counts_are_normalized(self):
        model, y = instance(10, T=3)
        _, a = collective_forward_backward(model, y * 250, tol=1e-12)
        _, b = collective_forward_backward(model, y, tol=1e-12)
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_history_and_trace(self):
        model, y = instance(11, T=5)
        hist = []
        msgs, marg = collective_forward_backward(model, y, tol=1e-12, history=hist)
        assert len(hist) == msgs.sweeps == len(msgs.trace) == len(msgs.wall_ns)
        np.testing.assert_allclose(hist[-1], marg, atol=1e-12)

    def test_backends_agree(self):
        model, y = instance(12, T=8)
        _, a = collective_forward_backward(model, y, tol=1e-12, backend="python")
        _, b = collective_forward_backward(model, y, tol=1e-12, backend=kernels.BACKEND)
        np.testing.assert_allclose(a, b, atol=1e-13)

    def test_infeasible(self):
        model = HmmModel(2, [1.0, 0.0], np.eye(2), np.eye(2))
        with pytest.raises(InfeasibleError):
            collective_forward_backward(model, [[0.0, 1.0], [0.5, 0.5]])

    def test_wrong_row_count(self):
        model, y = instance(13, T=3)
        with pytest.raises(ValueError):
            collective_forward_backward(model, y[:2])


class TestFiles:
    def test_json_round_trip(self, tmp_path):
        model, _ = instance(14)
        path = tmp_path / "hmm.json"
        path.write_text(json.dumps(hmm_to_dict(model)))
        back = load_hmm(path)
        np.testing.assert_array_equal(back.transition, model.transition)
        np.testing.assert_array_equal(back.emission, model.emission)

    def test_missing_field(self):
        with pytest.raises(ValueError):
            hmm_from_dict({"T": 2, "pi": [1.0]})

    def test_dimension_mismatch(self):
        doc = hmm_to_dict(instance(15)[0])
        doc["obs_dim"] = 99
        with pytest.raises(ValueError):
            hmm_from_dict(doc)

    def test_observation_csv(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("3,1\nnan,nan\n0,4\n")
        rows = load_observations(path, obs_dim=2)
        assert rows[1] is None
        np.testing.assert_array_equal(rows[2], [0, 4])
        with pytest.raises(ValueError):
            load_observations(path, obs_dim=3)
