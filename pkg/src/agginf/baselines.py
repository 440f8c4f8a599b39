"""Approximate MAP inference for collective graphical models with noisy counts.

These solvers take node counts at population scale ``M`` and a likelihood
``p(y | n)`` on the observed nodes, and minimize the CGM free energy

    F(n) = sum_ij sum n_ij ln(n_ij / psi_ij) - sum_i (deg_i - 1) sum n_i ln n_i
           - ln p(y | n)

over edge-consistent counts with ``sum n_i = M``.  On a tree every
stationary point is a BP fixed point of the model tilted by node
potentials ``exp(g_i)`` with ``g_i = d ln p / d n_i``, and the three
solvers here only differ in how they move those log-potentials:

* NLBP plugs in the gradient at the current counts and damps the counts,
* Bethe-RDA uses a weighted running average of past gradients,
* PROX moves a fixed fraction of the way toward the current gradient.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np

from .bp import MessageUnderflowError, all_beliefs, all_edge_beliefs, bp_solve
from .pgm import Potentials, TreeGraph


class ConstraintViolation(ValueError):
    """Counts are not edge-consistent or do not sum to the population size."""


class NoisyObservationModel(Protocol):
    def loglik(self, n: np.ndarray, y: np.ndarray) -> float: ...

    def grad(self, n: np.ndarray, y: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class PoissonObservation:
    """Independent counts ``y(x) ~ Poisson(beta * n(x))``."""

    beta: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    def loglik(self, n: np.ndarray, y: np.ndarray) -> float:
        n = np.asarray(n, dtype=float)
        y = np.asarray(y, dtype=float)
        rate = self.beta * n
        pos = y > 0
        if np.any(rate[pos] <= 0):
            return -math.inf
        const = sum(math.lgamma(v + 1.0) for v in y[pos])
        return float(np.sum(y[pos] * np.log(rate[pos])) - rate.sum() - const)

    def grad(self, n: np.ndarray, y: np.ndarray) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        y = np.asarray(y, dtype=float)
        g = np.full(n.shape, -self.beta)
        pos = y > 0
        with np.errstate(divide="ignore"):
            g[pos] += y[pos] / n[pos]
        return g


def observation_model(name: str, **params) -> NoisyObservationModel:
    if name == "poisson":
        return PoissonObservation(**params)
    raise ValueError(f"unknown observation model {name!r}")


def _xlogx(a: np.ndarray) -> float:
    pos = a > 0
    return float(np.sum(a[pos] * np.log(a[pos])))


def check_constraints(
    graph: TreeGraph,
    node_counts,
    edge_counts: Mapping[tuple[int, int], np.ndarray],
    M: float,
    tol: float = 1e-6,
) -> float:
    """Largest violation of normalization and edge consistency (relative to ``M``)."""
    worst = 0.0
    for v in range(graph.node_count):
        worst = max(worst, abs(float(np.sum(node_counts[v])) - M))
    for i, j in graph.edges:
        nij = np.asarray(edge_counts[(i, j)])
        worst = max(worst, float(np.max(np.abs(nij.sum(axis=1) - node_counts[i]))))
        worst = max(worst, float(np.max(np.abs(nij.sum(axis=0) - node_counts[j]))))
    worst /= max(M, 1.0)
    if worst > tol:
        raise ConstraintViolation(f"counts violate the marginal constraints by {worst:.3g} (relative)")
    return worst


def cgm_free_energy(
    graph: TreeGraph,
    potentials: Potentials,
    node_counts,
    edge_counts: Mapping[tuple[int, int], np.ndarray],
    obs_model: NoisyObservationModel | None,
    y: Mapping[int, np.ndarray],
    M: float | None = None,
    tol: float = 1e-6,
) -> float:
    """Free energy of a count configuration (``0 ln 0 = 0``)."""
    if M is None:
        M = float(np.sum(node_counts[0]))
    check_constraints(graph, node_counts, edge_counts, M, tol)
    energy = 0.0
    for i, j in graph.edges:
        nij = np.asarray(edge_counts[(i, j)], dtype=float)
        psi = np.asarray(potentials[i, j])
        pos = nij > 0
        if np.any(psi[pos] <= 0):
            return math.inf
        energy += _xlogx(nij) - float(np.sum(nij[pos] * np.log(psi[pos])))
    for v in range(graph.node_count):
        energy -= (graph.degree(v) - 1) * _xlogx(np.asarray(node_counts[v], dtype=float))
    if obs_model is not None:
        for v, yv in y.items():
            energy -= obs_model.loglik(node_counts[v], yv)
    return energy


@dataclass
class BaselineResult:
    marginals: list[np.ndarray]
    counts: list[np.ndarray]
    edge_counts: dict[tuple[int, int], np.ndarray]
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    history: list[list[np.ndarray]] = field(default_factory=list)
    wall_ns: list[int] = field(default_factory=list)
    iterations: int = 0
    status: str = "max_iters"

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "residual", "energy"])
            for row in self.trace:
                w.writerow([row[0], repr(row[1]), repr(row[2])])


class _Diverged(Exception):
    pass


def _tilted_bp(graph, potentials, M, log_factors):
    """Counts ``M * BP`` of the model with node potentials ``exp(log_factors)``."""
    factors = {}
    for v, h in log_factors.items():
        if not np.all(np.isfinite(h)):
            raise _Diverged(f"non-finite potential at node {v}")
        factors[v] = np.exp(h - h.max())
    try:
        store = bp_solve(graph, potentials, "auto", node_factors=factors)
        nodes = all_beliefs(store, factors)
        edges = all_edge_beliefs(store, potentials, factors)
    except (MessageUnderflowError, FloatingPointError) as exc:
        raise _Diverged(str(exc)) from None
    if not all(np.all(np.isfinite(n)) for n in nodes):
        raise _Diverged("non-finite marginals")
    return [M * n for n in nodes], {k: M * b for k, b in edges.items()}


def _gradients(obs_model, y, counts):
    with np.errstate(all="ignore"):
        g = {v: obs_model.grad(counts[v], yv) for v, yv in y.items()}
    for v, gv in g.items():
        if not np.all(np.isfinite(gv)):
            raise _Diverged(f"gradient blew up at node {v}")
    return g


def _change(old, new, M):
    return max(float(np.abs(a - b).sum()) for a, b in zip(old, new)) / M


def _energy(graph, potentials, counts, edges, obs_model, y, M):
    try:
        return cgm_free_energy(graph, potentials, counts, edges, obs_model, y, M, tol=1e-4)
    except ConstraintViolation:
        return math.nan


def _run(graph, potentials, obs_model, y, M, step, max_iters, tol, record_history, init=None):
    """Shared driver: ``step(t, counts, edges) -> (counts, edges)``."""
    y = {int(v): np.asarray(yv, dtype=float) for v, yv in y.items()}
    if init is None:
        counts, edges = _tilted_bp(graph, potentials, M, {})
    else:
        counts, edges = init
    t0 = time.perf_counter_ns()
    res = BaselineResult([c / M for c in counts], counts, edges)
    if record_history:
        res.history.append([c / M for c in counts])
    try:
        for t in range(1, max_iters + 1):
            new_counts, new_edges = step(t, counts, edges)
            change = _change(counts, new_counts, M)
            counts, edges = new_counts, new_edges
            res.iterations = t
            res.trace.append((t, change, _energy(graph, potentials, counts, edges, obs_model, y, M)))
            res.wall_ns.append(time.perf_counter_ns() - t0)
            if record_history:
                res.history.append([c / M for c in counts])
            if not math.isfinite(change):
                raise _Diverged("non-finite iterate")
            if change < tol:
                res.status = "converged"
                break
    except _Diverged:
        res.status = "diverged"
    res.counts, res.edge_counts = counts, edges
    res.marginals = [c / M for c in counts]
    return res


def nlbp_solve(
    graph: TreeGraph,
    potentials: Potentials,
    obs_model: NoisyObservationModel,
    y: Mapping[int, np.ndarray],
    M: float,
    damping: float = 0.5,
    max_iters: int = 1000,
    tol: float = 1e-10,
    record_history: bool = False,
) -> BaselineResult:
    """Non-linear BP with count damping ``n <- (1 - a) n + a n_new``.

    Counts start from ``n_ij ~ psi_ij`` scaled to ``M`` (node counts taken
    from each node's lowest-indexed edge).  Every iteration rebuilds the
    tilted potentials from the gradient at the current counts and reruns BP.
    Iteration stops when the worst 1-norm change of a normalized node
    marginal drops below ``tol``.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    y = {int(v): np.asarray(yv, dtype=float) for v, yv in y.items()}
    edges0 = {}
    for i, j in graph.edges:
        psi = np.asarray(potentials[i, j], dtype=float)
        edges0[(i, j)] = M * psi / psi.sum()
    counts0 = []
    for v in range(graph.node_count):
        nbrs = graph.neighbors(v)
        if not nbrs:
            counts0.append(np.full(graph.state_dims[v], M / graph.state_dims[v]))
            continue
        k = min(nbrs)
        table = edges0[(v, k)] if v < k else edges0[(k, v)].T
        counts0.append(table.sum(axis=1))

    def step(t, counts, edges):
        g = _gradients(obs_model, y, counts)
        new_counts, new_edges = _tilted_bp(graph, potentials, M, g)
        counts = [(1 - damping) * a + damping * b for a, b in zip(counts, new_counts)]
        edges = {k: (1 - damping) * edges[k] + damping * new_edges[k] for k in edges}
        return counts, edges

    return _run(graph, potentials, obs_model, y, M, step, max_iters, tol, record_history, (counts0, edges0))


def bethe_rda_solve(
    graph: TreeGraph,
    potentials: Potentials,
    obs_model: NoisyObservationModel,
    y: Mapping[int, np.ndarray],
    M: float,
    learning_rate: float | Callable[[int], float] = 1.0,
    max_iters: int = 100000,
    tol: float = 1e-9,
    record_history: bool = False,
) -> BaselineResult:
    """Regularized dual averaging over BP-tilted potentials.

    With ``gbar_t = (t-1)/t gbar_{t-1} - g(n_{t-1}) / t`` the node
    log-potentials at step ``t`` are ``-t / (b_t + t) * gbar_t`` where
    ``b_t`` is ``learning_rate`` (a constant or a function of ``t``).
    Averaging makes the iterates settle at roughly ``O(1/t)``.
    """
    rate = learning_rate if callable(learning_rate) else (lambda t, c=float(learning_rate): c)
    y = {int(v): np.asarray(yv, dtype=float) for v, yv in y.items()}
    gbar = {v: np.zeros(graph.state_dims[v]) for v in y}

    def step(t, counts, edges):
        g = _gradients(obs_model, y, counts)
        for v in gbar:
            gbar[v] = ((t - 1) / t) * gbar[v] - g[v] / t
        b = rate(t)
        if b < 0:
            raise ValueError("learning rate must be nonnegative")
        logs = {v: -(t / (b + t)) * gbar[v] for v in gbar}
        return _tilted_bp(graph, potentials, M, logs)

    return _run(graph, potentials, obs_model, y, M, step, max_iters, tol, record_history)


def prox_solve(
    graph: TreeGraph,
    potentials: Potentials,
    obs_model: NoisyObservationModel,
    y: Mapping[int, np.ndarray],
    M: float,
    step_weight: float = 0.1,
    max_iters: int = 10000,
    tol: float = 1e-10,
    record_history: bool = False,
) -> BaselineResult:
    """KL-proximal gradient steps.

    Each step linearizes ``-ln p(y | n)`` at the current counts and solves
    the Bethe subproblem regularized by the Bethe divergence to the current
    counts.  In log-potential space that is ``h <- (1 - w) h + w g(n)`` with
    ``w = eta / (1 + eta)`` for proximal step size ``eta``.
    """
    if not 0 < step_weight <= 1:
        raise ValueError("step_weight must lie in (0, 1]")
    y = {int(v): np.asarray(yv, dtype=float) for v, yv in y.items()}
    h = {v: np.zeros(graph.state_dims[v]) for v in y}

    def step(t, counts, edges):
        g = _gradients(obs_model, y, counts)
        for v in h:
            h[v] = (1 - step_weight) * h[v] + step_weight * g[v]
        return _tilted_bp(graph, potentials, M, h)

    return _run(graph, potentials, obs_model, y, M, step, max_iters, tol, record_history)


def stationarity_gap(
    graph: TreeGraph,
    potentials: Potentials,
    obs_model: NoisyObservationModel,
    y: Mapping[int, np.ndarray],
    M: float,
    result: BaselineResult,
) -> float:
    """How far the counts are from the BP fixed point their own gradient implies.

    Zero exactly at stationary points of the free energy on a tree.
    """
    g = _gradients(obs_model, {int(v): np.asarray(a, dtype=float) for v, a in y.items()}, result.counts)
    counts, _ = _tilted_bp(graph, potentials, M, g)
    return _change(result.counts, counts, M)
