"""Hidden Markov models with aggregate observations.

Collective forward-backward is SBP on the HMM tree with the schedule
``o_1, ..., o_T, o_{T-1}, ..., o_2``.  It keeps four normalized message
families per time step:

* ``alpha[t]``  hidden ``t-1`` to hidden ``t`` (forward),
* ``beta[t]``   hidden ``t+1`` to hidden ``t`` (backward),
* ``gamma[t]``  observation ``t`` to hidden ``t``,
* ``xi[t]``     hidden ``t`` to observation ``t``.

Time is 0-based throughout.  Transition tables are indexed
``[x_t, x_{t+1}]``; emission tables ``[o_t, x_t]``, matching the JSON file
format.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .mot import InfeasibleError
from .pgm import Potentials, TreeGraph


@dataclass
class HmmModel:
    T: int
    pi: np.ndarray
    transition: np.ndarray
    emission: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.transition = np.asarray(self.transition, dtype=float)
        self.emission = np.asarray(self.emission, dtype=float)
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.transition.ndim == 2:
            self.transition = self.transition[None]
        if self.emission.ndim == 2:
            self.emission = self.emission[None]
        d = self.pi.shape[0]
        if abs(self.pi.sum() - 1.0) > 1e-9 or np.any(self.pi < 0):
            raise ValueError("pi must be a probability vector")
        if self.transition.shape[1:] != (d, d):
            raise ValueError(f"transition tables must be {d}x{d}")
        if self.transition.shape[0] not in (1, max(self.T - 1, 1)):
            raise ValueError("need one transition table or one per step")
        if self.emission.shape[2] != d:
            raise ValueError("emission tables must have hidden_dim columns")
        if self.emission.shape[0] not in (1, self.T):
            raise ValueError("need one emission table or one per step")
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(axis=2) - 1)) > 1e-9:
            raise ValueError("transition rows must be probability vectors")
        if np.any(self.emission < 0) or np.max(np.abs(self.emission.sum(axis=1) - 1)) > 1e-9:
            raise ValueError("emission columns must be probability vectors")

    @property
    def hidden_dim(self) -> int:
        return self.pi.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.emission.shape[1]

    def trans(self, t: int) -> np.ndarray:
        """Table for the step ``t -> t+1``."""
        return self.transition[t % self.transition.shape[0]]

    def emis(self, t: int) -> np.ndarray:
        return self.emission[t % self.emission.shape[0]]

    def prior_marginals(self) -> np.ndarray:
        out = np.empty((self.T, self.hidden_dim))
        out[0] = self.pi
        for t in range(1, self.T):
            out[t] = out[t - 1] @ self.trans(t - 1)
        return out


@dataclass
class HmmMessages:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray
    u: np.ndarray
    observed: np.ndarray
    sweeps: int = 0
    converged: bool = False
    trace: list[float] = field(default_factory=list)
    wall_ns: list[int] = field(default_factory=list)

    @classmethod
    def initial(cls, model: HmmModel, observed: np.ndarray) -> "HmmMessages":
        T, d, o = model.T, model.hidden_dim, model.obs_dim
        msgs = cls(
            alpha=np.empty((T, d)),
            beta=np.full((T, d), 1.0 / d),
            gamma=np.full((T, d), 1.0 / d),
            xi=np.empty((T, o)),
            u=np.ones((T, o)),
            observed=np.asarray(observed, dtype=np.uint8),
        )
        msgs.alpha[0] = model.pi
        for t in range(1, T):
            cfb_forward_step(msgs, model, t)
        for t in range(T - 2, -1, -1):
            cfb_backward_step(msgs, model, t)
        for t in range(T):
            _update_xi(msgs, model, t)
        return msgs

    def marginals(self) -> np.ndarray:
        n = self.alpha * self.beta * self.gamma
        return n / n.sum(axis=1, keepdims=True)


def _normalized(v: np.ndarray) -> np.ndarray:
    s = v.sum()
    if not s > 0:
        raise FloatingPointError("message underflowed to zero")
    return v / s


def cfb_forward_step(msgs: HmmMessages, model: HmmModel, t: int) -> np.ndarray:
    """``alpha_t ~ sum_{x_{t-1}} p(x_t | x_{t-1}) alpha_{t-1} gamma_{t-1}``."""
    msgs.alpha[t] = _normalized((msgs.alpha[t - 1] * msgs.gamma[t - 1]) @ model.trans(t - 1))
    return msgs.alpha[t]


def cfb_backward_step(msgs: HmmMessages, model: HmmModel, t: int) -> np.ndarray:
    """``beta_t ~ sum_{x_{t+1}} p(x_{t+1} | x_t) beta_{t+1} gamma_{t+1}``."""
    msgs.beta[t] = _normalized(model.trans(t) @ (msgs.beta[t + 1] * msgs.gamma[t + 1]))
    return msgs.beta[t]


def _update_xi(msgs: HmmMessages, model: HmmModel, t: int) -> None:
    msgs.xi[t] = _normalized(model.emis(t) @ (msgs.alpha[t] * msgs.beta[t]))


def cfb_observation_messages(
    msgs: HmmMessages, model: HmmModel, y: np.ndarray, t: int
) -> tuple[np.ndarray, np.ndarray]:
    """Refresh ``xi_t`` from ``alpha_t, beta_t``, then scale ``gamma_t`` against ``y``."""
    _update_xi(msgs, model, t)
    if kernels.scaling(np.asarray(y, dtype=float), msgs.xi[t], msgs.u[t]) == kernels.INFEASIBLE:
        raise InfeasibleError(f"observation at step {t} has mass the model cannot reach")
    msgs.gamma[t] = _normalized(model.emis(t).T @ msgs.u[t])
    return msgs.gamma[t], msgs.xi[t]


def _as_observations(model: HmmModel, observations) -> tuple[np.ndarray, np.ndarray]:
    T, o = model.T, model.obs_dim
    y = np.zeros((T, o))
    observed = np.zeros(T, dtype=np.uint8)
    if len(observations) != T:
        raise ValueError(f"expected {T} observation rows, got {len(observations)}")
    for t, row in enumerate(observations):
        if row is None:
            continue
        row = np.asarray(row, dtype=float)
        if np.all(np.isnan(row)):
            continue
        if row.shape != (o,) or np.any(row < 0) or not row.sum() > 0:
            raise ValueError(f"observation row {t} is not a nonnegative vector over {o} symbols")
        y[t] = row / row.sum()
        observed[t] = 1
    return y, observed


def _refreshed_alpha(msgs: HmmMessages, model: HmmModel) -> np.ndarray:
    alpha = msgs.alpha.copy()
    for t in range(1, model.T):
        alpha[t] = _normalized((alpha[t - 1] * msgs.gamma[t - 1]) @ model.trans(t - 1))
    return alpha


def observation_residual(msgs: HmmMessages, model: HmmModel, y: np.ndarray) -> np.ndarray:
    """Per-step ``|P(o_t) - y_t|_1`` with every message brought up to date."""
    alpha = _refreshed_alpha(msgs, model)
    res = np.zeros(model.T)
    for t in np.flatnonzero(msgs.observed):
        xi = model.emis(t) @ (alpha[t] * msgs.beta[t])
        p = _normalized(xi * msgs.u[t])
        res[t] = np.abs(p - y[t]).sum()
    return res


def collective_forward_backward(
    model: HmmModel,
    observations: Sequence,
    tol: float = 1e-9,
    max_iters: int = 10000,
    backend: str | None = None,
    history: list | None = None,
) -> tuple[HmmMessages, np.ndarray]:
    """Hidden-state marginals matching aggregate observation distributions.

    ``observations[t]`` is a nonnegative vector over observation symbols
    (normalized here), or ``None``/all-NaN when step ``t`` has no data; such
    steps are left unconstrained.  Each iteration is one forward and one
    backward pass; iteration stops once every observed step's residual is at
    most ``tol``.  When ``history`` is a list, the hidden marginals after
    every sweep are appended to it.
    """
    t0 = time.perf_counter_ns()
    y, observed = _as_observations(model, observations)
    msgs = HmmMessages.initial(model, observed)
    impl = kernels.backend(backend) if backend else kernels
    emis_hx = np.ascontiguousarray(np.swapaxes(model.emission, 1, 2))
    trans = np.ascontiguousarray(model.transition)
    if not observed.any():
        msgs.converged = True
        return msgs, msgs.marginals()
    for sweep in range(1, max_iters + 1):
        if model.T == 1:
            cfb_observation_messages(msgs, model, y[0], 0)
        else:
            code = impl.chain_sweep(
                trans, emis_hx, y, msgs.observed, msgs.alpha, msgs.beta, msgs.gamma, msgs.xi, msgs.u
            )
            if code == kernels.INFEASIBLE:
                raise InfeasibleError("an observation has mass the model cannot reach")
            if code == kernels.UNDERFLOW:
                raise FloatingPointError("message underflowed to zero")
        msgs.sweeps = sweep
        res = observation_residual(msgs, model, y)
        msgs.trace.append(float(res.sum()))
        msgs.wall_ns.append(time.perf_counter_ns() - t0)
        if history is not None:
            alpha = _refreshed_alpha(msgs, model)
            n = alpha * msgs.beta * msgs.gamma
            history.append(n / n.sum(axis=1, keepdims=True))
        if res.max() <= tol:
            msgs.converged = True
            break
    msgs.alpha = _refreshed_alpha(msgs, model)
    for t in range(model.T):
        _update_xi(msgs, model, t)
    return msgs, msgs.marginals()


def pairwise_marginals(msgs: HmmMessages, model: HmmModel) -> np.ndarray:
    """``n_{t,t+1}(x_t, x_{t+1})`` for ``t = 0 .. T-2``."""
    T, d = model.T, model.hidden_dim
    out = np.empty((max(T - 1, 0), d, d))
    for t in range(T - 1):
        left = msgs.alpha[t] * msgs.gamma[t]
        right = msgs.beta[t + 1] * msgs.gamma[t + 1]
        b = left[:, None] * model.trans(t) * right[None, :]
        out[t] = b / b.sum()
    return out


def standard_forward_backward(model: HmmModel, obs: Sequence[int]) -> np.ndarray:
    """Posteriors ``p(x_t | o_0..o_{T-1})`` for one observed sequence."""
    T = model.T
    obs = [int(o) for o in obs]
    if len(obs) != T or any(not 0 <= o < model.obs_dim for o in obs):
        raise ValueError("need one valid observation index per step")
    lik = np.array([model.emis(t)[obs[t]] for t in range(T)])
    alpha = np.empty((T, model.hidden_dim))
    beta = np.ones((T, model.hidden_dim))
    alpha[0] = model.pi
    for t in range(1, T):
        a = (alpha[t - 1] * lik[t - 1]) @ model.trans(t - 1)
        if not a.sum() > 0:
            raise InfeasibleError(f"observations up to step {t - 1} have zero likelihood")
        alpha[t] = a / a.sum()
    for t in range(T - 2, -1, -1):
        b = model.trans(t) @ (beta[t + 1] * lik[t + 1])
        if not b.sum() > 0:
            raise InfeasibleError(f"observations after step {t} have zero likelihood")
        beta[t] = b / b.sum()
    post = alpha * beta * lik
    s = post.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise InfeasibleError("observation sequence has zero likelihood")
    return post / s


def hmm_to_tree(model: HmmModel, observed: Sequence[int] | None = None) -> tuple[TreeGraph, Potentials]:
    """The HMM as a pairwise tree: hidden ``x_t`` is node ``t``, ``o_t`` is node ``T + t``.

    The initial distribution is folded into the first edge at node 0.
    ``observed`` lists the time steps whose observation node is constrained
    (all of them by default).
    """
    T = model.T
    edges = [(t, t + 1) for t in range(T - 1)] + [(t, T + t) for t in range(T)]
    dims = (model.hidden_dim,) * T + (model.obs_dim,) * T
    steps = range(T) if observed is None else observed
    graph = TreeGraph(dims, tuple(edges), frozenset(T + t for t in steps))
    tables = {(t, t + 1): model.trans(t).copy() for t in range(T - 1)}
    for t in range(T):
        tables[(t, T + t)] = model.emis(t).T.copy()
    first = (0, 1) if T > 1 else (0, T)
    tables[first] = tables[first] * model.pi[:, None]
    return graph, Potentials(graph, tables, strict=False)


def load_hmm(path: str | Path) -> HmmModel:
    """Read ``{T, hidden_dim, obs_dim, pi, transition, emission}`` from JSON."""
    with open(path) as fh:
        doc = json.load(fh)
    return hmm_from_dict(doc)


def hmm_from_dict(doc: dict) -> HmmModel:
    try:
        model = HmmModel(int(doc["T"]), doc["pi"], doc["transition"], doc["emission"])
    except KeyError as exc:
        raise ValueError(f"HMM file is missing field {exc.args[0]!r}") from None
    if "hidden_dim" in doc and int(doc["hidden_dim"]) != model.hidden_dim:
        raise ValueError("hidden_dim does not match pi")
    if "obs_dim" in doc and int(doc["obs_dim"]) != model.obs_dim:
        raise ValueError("obs_dim does not match emission")
    return model


def hmm_to_dict(model: HmmModel) -> dict:
    trans = model.transition[0] if model.transition.shape[0] == 1 else model.transition
    emis = model.emission[0] if model.emission.shape[0] == 1 else model.emission
    return {
        "T": model.T,
        "hidden_dim": model.hidden_dim,
        "obs_dim": model.obs_dim,
        "pi": model.pi.tolist(),
        "transition": trans.tolist(),
        "emission": emis.tolist(),
    }


def load_observations(path: str | Path, obs_dim: int | None = None) -> list[np.ndarray | None]:
    """T x obs_dim CSV of aggregate counts or frequencies; blank/NaN rows mean no data."""
    data = np.genfromtxt(path, delimiter=",", dtype=float, ndmin=2)
    if obs_dim is not None and data.shape[1] != obs_dim:
        raise ValueError(f"observation file has {data.shape[1]} columns, expected {obs_dim}")
    return [None if np.all(np.isnan(row)) else row for row in data]


def random_hmm(rng: np.random.Generator, T: int, hidden_dim: int, obs_dim: int) -> HmmModel:
    pi = rng.dirichlet(np.ones(hidden_dim))
    trans = rng.dirichlet(np.ones(hidden_dim), size=hidden_dim)
    emis = rng.dirichlet(np.ones(obs_dim), size=hidden_dim).T
    return HmmModel(T, pi, trans, emis)
