import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agginf import kernels

BACKENDS = ["python"]
try:
    kernels.backend("cython")
    BACKENDS.append("cython")
except ImportError:
    pass


@pytest.fixture(params=BACKENDS)
def impl(request):
    return kernels.backend(request.param)


class TestMessage:
    def test_matches_numpy(self, impl):
        rng = np.random.default_rng(0)
        psi = rng.uniform(0.1, 2, size=(3, 5))
        w = rng.uniform(size=3)
        out = np.empty(5)
        mass = impl.message(psi, w, out)
        ref = w @ psi
        np.testing.assert_allclose(out, ref / ref.sum(), atol=1e-15)
        assert mass == pytest.approx(ref.sum())

    def test_transposed_view(self, impl):
        rng = np.random.default_rng(1)
        psi = rng.uniform(0.1, 2, size=(4, 3))
        w = rng.uniform(size=3)
        out = np.empty(4)
        impl.message(psi.T, w, out)
        ref = psi @ w
        np.testing.assert_allclose(out, ref / ref.sum(), atol=1e-15)

    def test_zero_weight(self, impl):
        out = np.empty(2)
        assert impl.message(np.ones((2, 2)), np.zeros(2), out) == 0.0


class TestScaling:
    def test_zero_targets_pinned(self, impl):
        u = np.empty(3)
        code = impl.scaling(np.array([0.5, 0.0, 0.5]), np.array([0.25, 0.0, 0.75]), u)
        assert code == kernels.OK
        np.testing.assert_allclose(u, [2.0, 0.0, 2 / 3])

    def test_infeasible(self, impl):
        u = np.empty(2)
        assert impl.scaling(np.array([0.5, 0.5]), np.array([1.0, 0.0]), u) == kernels.INFEASIBLE


def test_backends_agree_on_chain_sweep():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(2)
    T, d, o = 7, 4, 3
    trans = rng.dirichlet(np.ones(d), size=(T - 1, d))
    emis = rng.dirichlet(np.ones(o), size=(1, d))
    y = rng.dirichlet(np.ones(o), size=T)
    observed = np.array([1, 1, 0, 1, 1, 0, 1], dtype=np.uint8)
    states = []
    for name in BACKENDS:
        alpha = np.full((T, d), 1 / d)
        beta = np.full((T, d), 1 / d)
        gamma = np.full((T, d), 1 / d)
        xi = np.full((T, o), 1 / o)
        u = np.ones((T, o))
        for _ in range(3):
            assert kernels.backend(name).chain_sweep(trans, emis, y, observed, alpha, beta, gamma, xi, u) == kernels.OK
        states.append((alpha, beta, gamma, xi, u))
    for a, b in zip(*states):
        np.testing.assert_allclose(a, b, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), d=st.integers(1, 6), T=st.integers(1, 5))
def test_sample_paths_backends_identical(seed, d, T):
    rng = np.random.default_rng(seed)
    cum = np.cumsum(rng.dirichlet(np.ones(d), size=(2, d)), axis=2)
    cum[..., -1] = 1.0
    start = rng.integers(0, d, size=50).astype(np.int64)
    u = rng.random((50, T - 1))
    outs = []
    for name in BACKENDS:
        out = np.empty((50, T), dtype=np.int64)
        kernels.backend(name).sample_paths(cum, start, u, out)
        outs.append(out)
    for o in outs:
        assert o.min() >= 0 and o.max() < d
        np.testing.assert_array_equal(o[:, 0], start)
        np.testing.assert_array_equal(o, outs[0])


def test_pure_python_switch(monkeypatch):
    import importlib

    monkeypatch.setenv("AGGINF_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("AGGINF_PURE_PYTHON")
        importlib.reload(kernels)
