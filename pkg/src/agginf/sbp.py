"""Sinkhorn belief propagation.

Inference with aggregate observations is an entropic multi-marginal
transport problem whose cost splits along the edges of the model.  Sinkhorn
scaling is applied at the observed nodes; the marginal projection that each
scaling step needs is computed by belief propagation, and on a tree only the
messages along the path to the next scaled node have to be refreshed.

The scaling vector ``u_i`` of an observed node is kept as a node factor, so
every message in the store is an ordinary BP message of the model
``K * (u_1 x ... x u_J)``.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .bp import (
    MessageStore,
    MessageUnderflowError,
    bp_message_update,
    bp_solve,
    edge_belief,
    incoming_product,
    tree_schedule,
)
from .mot import InfeasibleError
from .pgm import Potentials, TreeGraph, normalize_observed_leaves


@dataclass
class SbpConfig:
    tol: float = 1e-9
    max_iters: int = 10000
    schedule: Sequence[int] | None = None
    split_internal: bool = True


@dataclass
class Schedule:
    """Cyclic template of observed nodes plus the tree path between neighbors.

    ``hops[n]`` lists the directed edges refreshed after scaling at
    ``template[n]``: the path to ``template[n + 1]`` minus its first edge,
    which the scaling step itself already produced.
    """

    template: list[int]
    hops: list[list[tuple[int, int]]]

    @classmethod
    def build(cls, graph: TreeGraph, template: Sequence[int] | None = None) -> "Schedule":
        observed = sorted(graph.observed)
        if template is None:
            template = default_template(graph)
        template = [int(v) for v in template]
        if observed and set(template) != set(observed):
            raise ValueError("schedule must cover exactly the observed nodes")
        n = len(template)
        for a in range(n):
            if n > 1 and template[a] == template[(a + 1) % n]:
                raise ValueError("consecutive schedule entries must differ")
        hops = []
        loopy = not _is_tree(graph)
        for a in range(n):
            src, dst = template[a], template[(a + 1) % n]
            if loopy or src == dst:
                hops.append([])
                continue
            path = graph.tree_path(src, dst)
            hops.append([(path[k], path[k + 1]) for k in range(1, len(path) - 1)])
        return cls(template, hops)


def _is_tree(graph: TreeGraph) -> bool:
    return graph.require_tree or len(graph.edges) == graph.node_count - 1


def default_template(graph: TreeGraph) -> list[int]:
    """Depth-first order of the observed nodes followed by its reverse.

    The search starts at the lowest-indexed observed node and, at every
    node, visits observed leaves before other neighbors (then by index).  On
    an HMM chain this yields ``o_1, ..., o_T, o_{T-1}, ..., o_2``.
    """
    obs = graph.observed
    if not obs:
        return []
    root = min(obs)
    order = []
    seen = {root}
    stack = [root]
    while stack:
        v = stack.pop()
        if v in obs:
            order.append(v)
        nbrs = [w for w in graph.neighbors(v) if w not in seen]
        nbrs.sort(key=lambda w: (not (w in obs and graph.degree(w) == 1), w))
        for w in reversed(nbrs):
            seen.add(w)
            stack.append(w)
    if len(order) <= 2:
        return order
    return order + order[-2:0:-1]


@dataclass
class SbpState:
    graph: TreeGraph
    store: MessageStore
    observations: dict[int, np.ndarray]
    scalings: dict[int, np.ndarray]
    sweeps: int = 0
    converged: bool = False
    residuals: list[dict[int, float]] = field(default_factory=list)
    step_updates: list[int] = field(default_factory=list)
    step_bounds: list[int] = field(default_factory=list)
    wall_ns: list[int] = field(default_factory=list)

    @property
    def sweep_residuals(self) -> list[float]:
        """Aggregate observation residual ``sum_i |P_i - y_i|_1`` per sweep."""
        return [float(sum(r.values())) for r in self.residuals]

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sweep", "node", "residual"])
            for s, row in enumerate(self.residuals, start=1):
                for node, r in sorted(row.items()):
                    w.writerow([s, node, repr(r)])


@dataclass
class SbpResult:
    state: SbpState
    marginals: list[np.ndarray]
    edge_marginals: dict[tuple[int, int], np.ndarray]
    mapping: dict[int, int]
    graph: TreeGraph
    potentials: Potentials

    @property
    def converged(self) -> bool:
        return self.state.converged

    def unobserved_marginals(self) -> dict[int, np.ndarray]:
        original = {self.mapping[v] for v in self.state.observations}
        return {v: m for v, m in enumerate(self.marginals) if v not in original}


def init_state(
    graph: TreeGraph, potentials: Potentials, observations: Mapping[int, np.ndarray]
) -> SbpState:
    """Uniform messages followed by one unconstrained BP pass."""
    obs = {}
    for v in graph.observed:
        if v not in observations:
            raise KeyError(f"no observation for observed node {v}")
        y = np.asarray(observations[v], dtype=float)
        if y.shape != (graph.state_dims[v],) or np.any(y < 0) or abs(y.sum() - 1) > 1e-9:
            raise ValueError(f"observation at node {v} is not a probability vector")
        obs[v] = y / y.sum()
    scalings = {v: np.ones(graph.state_dims[v]) for v in obs}
    store = MessageStore.uniform(graph)
    if _is_tree(graph):
        bp_solve(graph, potentials, "tree", node_factors=scalings, store=store)
    else:
        bp_solve(graph, potentials, "sequential", node_factors=scalings, store=store, max_iters=200)
    store.updates = 0
    return SbpState(graph, store, obs, scalings)


def sbp_scaling_update(state: SbpState, potentials: Potentials, i: int) -> dict[int, np.ndarray]:
    """Sinkhorn step at observed node ``i``.

    Sets ``u_i = y_i / prod_k m_{k->i}`` (zero where ``y_i`` is zero) and
    refreshes every outgoing message, which for a leaf is
    ``m_{i->j}(x_j) ~ sum_{x_i} psi_ij(x_i, x_j) y_i(x_i) / m_{j->i}(x_i)``.
    Afterwards the model's marginal at ``i`` equals ``y_i``.
    """
    store = state.store
    incoming = incoming_product(store, i)
    u = state.scalings[i]
    if kernels.scaling(state.observations[i], incoming, u) == kernels.INFEASIBLE:
        raise InfeasibleError(f"observation at node {i} has mass where the model has none")
    out = {}
    for j in state.graph.neighbors(i):
        out[j] = bp_message_update(store, potentials, i, j, state.scalings)
    return out


def sbp_path_propagate(
    state: SbpState, potentials: Potentials, hops: Iterable[tuple[int, int]]
) -> None:
    """Refresh the given directed edges in order with ordinary BP updates."""
    for a, b in hops:
        bp_message_update(state.store, potentials, a, b, state.scalings)


def observation_residuals(state: SbpState, potentials: Potentials) -> dict[int, float]:
    """1-norm gap between every observed marginal and its target.

    Evaluated on a scratch copy of the messages brought fully up to date, so
    the solver's own messages and update counter are left untouched.
    """
    if not state.observations:
        return {}
    scratch = _refreshed(state, potentials)
    out = {}
    for i, y in state.observations.items():
        p = incoming_product(scratch, i, node_factors=state.scalings)
        s = p.sum()
        out[i] = float(np.abs(p / s - y).sum()) if s > 0 else float("inf")
    return out


def _refreshed(state: SbpState, potentials: Potentials) -> MessageStore:
    scratch = state.store.copy()
    if _is_tree(state.graph):
        for i, j in tree_schedule(state.graph):
            bp_message_update(scratch, potentials, i, j, state.scalings)
    return scratch


def sbp_sweep(state: SbpState, potentials: Potentials, schedule: Schedule) -> None:
    """One pass over the schedule template."""
    loopy = not _is_tree(state.graph)
    for i, hops in zip(schedule.template, schedule.hops):
        before = state.store.updates
        sbp_scaling_update(state, potentials, i)
        if loopy:
            bp_solve(state.graph, potentials, "sequential", state.scalings, max_iters=1, store=state.store)
        else:
            sbp_path_propagate(state, potentials, hops)
        state.step_updates.append(state.store.updates - before)
        state.step_bounds.append(len(hops) + 1 + state.graph.degree(i))
    state.sweeps += 1


def sbp_solve(
    graph: TreeGraph,
    potentials: Potentials,
    observations: Mapping[int, np.ndarray],
    schedule: Sequence[int] | None = None,
    tol: float = 1e-9,
    max_iters: int = 10000,
    split_internal: bool = True,
) -> SbpResult:
    """Marginals of the model closest in KL to the prior that matches the data.

    ``observations`` maps each node in ``graph.observed`` to its normalized
    aggregate distribution.  Observed internal nodes are first moved to leaf
    duplicates (``split_internal``); results are reported in the caller's
    node indexing.  Iteration stops when the worst observation residual at a
    sweep end is at most ``tol`` or after ``max_iters`` sweeps, in which case
    ``converged`` is false.
    """
    t0 = time.perf_counter_ns()
    mapping = {v: v for v in range(graph.node_count)}
    work_graph, work_pots = graph, potentials
    obs = dict(observations)
    if split_internal and _is_tree(graph) and any(graph.degree(v) != 1 for v in graph.observed):
        work_graph, work_pots, mapping = normalize_observed_leaves(graph, potentials)
        moved = {new: old for new, old in mapping.items() if new != old}
        obs = {v: observations[v] for v in work_graph.observed if v not in moved}
        obs.update({new: observations[old] for new, old in moved.items()})
        if schedule is not None:
            back = {old: new for new, old in moved.items()}
            schedule = [back.get(v, v) for v in schedule]
    state = init_state(work_graph, work_pots, obs)
    sched = Schedule.build(work_graph, schedule)
    if not state.observations:
        state.converged = True
    else:
        for _ in range(max_iters):
            sbp_sweep(state, work_pots, sched)
            res = observation_residuals(state, work_pots)
            state.residuals.append(res)
            state.wall_ns.append(time.perf_counter_ns() - t0)
            if max(res.values()) <= tol:
                state.converged = True
                break
    if _is_tree(work_graph):
        state.store = _refreshed(state, work_pots)
    J = graph.node_count
    beliefs = []
    for v in range(work_graph.node_count):
        b = incoming_product(state.store, v, node_factors=state.scalings)
        s = b.sum()
        if not s > 0:
            raise MessageUnderflowError(f"belief at node {v} has zero mass")
        beliefs.append(b / s)
    edges = {
        (i, j): edge_belief(state.store, work_pots, i, j, state.scalings) for i, j in work_graph.edges
    }
    return SbpResult(state, beliefs[:J], edges, mapping, work_graph, work_pots)


def theorem_residuals(result: SbpResult) -> dict[str, float]:
    """Worst violation of the two fixed-point message equations.

    ``"bp"`` covers messages leaving unobserved nodes, ``"scaling"`` the
    messages ``m_{i->j} ~ sum psi_ij y_i / m_{j->i}`` leaving observed ones.
    """
    state, pots, graph = result.state, result.potentials, result.graph
    store = state.store
    worst_bp = worst_sc = 0.0
    for i, j in graph.directed_edges():
        if i in state.observations:
            y = state.observations[i]
            incoming = incoming_product(store, i)
            ratio = np.zeros_like(y)
            pos = y > 0
            ratio[pos] = y[pos] / incoming[pos]
            w = ratio * incoming_product(store, i, exclude=j)
            fresh = w @ pots[i, j]
            worst_sc = max(worst_sc, float(np.max(np.abs(fresh / fresh.sum() - store[(i, j)]))))
        else:
            w = incoming_product(store, i, exclude=j)
            fresh = w @ pots[i, j]
            worst_bp = max(worst_bp, float(np.max(np.abs(fresh / fresh.sum() - store[(i, j)]))))
    return {"bp": worst_bp, "scaling": worst_sc}


def stationarity_residual(result: SbpResult) -> float:
    """Gap between reported edge marginals and their Lagrangian reconstruction.

    Rebuilds ``n_ij ~ psi_ij * (n_i / m_{j->i}) x (n_j / m_{i->j})`` with
    ``0 / 0 = 0`` and returns the worst entrywise difference.
    """
    state, pots, graph = result.state, result.potentials, result.graph
    store = state.store
    worst = 0.0
    nodes = []
    for v in range(graph.node_count):
        b = incoming_product(store, v, node_factors=state.scalings)
        nodes.append(b / b.sum())
    for i, j in graph.edges:
        ai = _safe_ratio(nodes[i], store[(j, i)])
        aj = _safe_ratio(nodes[j], store[(i, j)])
        rec = pots[i, j] * ai[:, None] * aj[None, :]
        rec = rec / rec.sum()
        worst = max(worst, float(np.max(np.abs(rec - result.edge_marginals[(i, j)]))))
    return worst


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    pos = num > 0
    out[pos] = num[pos] / den[pos]
    return out


def _xlogy(x: np.ndarray, y: np.ndarray) -> float:
    pos = x > 0
    if np.any(y[pos] <= 0):
        return float("inf")
    return float(np.sum(x[pos] * np.log(y[pos])))


def bethe_free_energy(
    graph: TreeGraph,
    potentials: Potentials,
    node_marginals: Sequence[np.ndarray],
    edge_marginals: Mapping[tuple[int, int], np.ndarray],
    check_tol: float = 1e-6,
) -> float:
    """``sum_ij sum n_ij ln(n_ij / psi_ij) - sum_i (deg_i - 1) sum n_i ln n_i``.

    ``deg_i`` is the number of neighbors of ``i``.  Marginals must be
    normalized and edge-consistent to within ``check_tol``.
    """
    for v, n in enumerate(node_marginals):
        if abs(np.sum(n) - 1.0) > check_tol:
            raise ValueError(f"node marginal {v} is not normalized")
    energy = 0.0
    for i, j in graph.edges:
        nij = np.asarray(edge_marginals[(i, j)], dtype=float)
        if (
            np.max(np.abs(nij.sum(axis=1) - node_marginals[i])) > check_tol
            or np.max(np.abs(nij.sum(axis=0) - node_marginals[j])) > check_tol
        ):
            raise ValueError(f"edge marginal ({i}, {j}) is inconsistent with its nodes")
        energy += _xlogy(nij, nij) - _xlogy(nij, np.asarray(potentials[i, j]))
    for v, n in enumerate(node_marginals):
        n = np.asarray(n, dtype=float)
        energy -= (graph.degree(v) - 1) * _xlogy(n, n)
    return energy
