"""Sum-product belief propagation on pairwise models.

Messages are sum-normalized after every update.  Optional per-node factors
(``node_factors[i]``, a nonnegative vector over node ``i``'s states) multiply
into every message leaving ``i`` and into ``i``'s beliefs; the Sinkhorn
solvers use them to carry the scaling vectors of observed leaves.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .pgm import AggregateMarginal, EdgeMarginal, Potentials, TreeGraph


class MessageUnderflowError(FloatingPointError):
    """A message lost all of its mass (degenerate potentials or factors)."""


@dataclass
class MessageStore:
    graph: TreeGraph
    messages: dict[tuple[int, int], np.ndarray]
    converged: bool = True
    iterations: int = 0
    trace: list[float] = field(default_factory=list)
    updates: int = 0

    @classmethod
    def uniform(cls, graph: TreeGraph) -> "MessageStore":
        msgs = {
            (i, j): np.full(graph.state_dims[j], 1.0 / graph.state_dims[j])
            for i, j in graph.directed_edges()
        }
        return cls(graph, msgs)

    def __getitem__(self, key: tuple[int, int]) -> np.ndarray:
        return self.messages[key]

    def copy(self) -> "MessageStore":
        return MessageStore(
            self.graph,
            {k: v.copy() for k, v in self.messages.items()},
            self.converged,
            self.iterations,
            list(self.trace),
            self.updates,
        )


def incoming_product(
    store: MessageStore, i: int, exclude: int | None = None, node_factors: Mapping | None = None
) -> np.ndarray:
    """``phi_i * prod_{k in N(i) \\ exclude} m_{k->i}`` as a fresh array."""
    graph = store.graph
    if node_factors is not None and i in node_factors:
        w = np.array(node_factors[i], dtype=float)
    else:
        w = np.ones(graph.state_dims[i])
    for k in graph.neighbors(i):
        if k != exclude:
            w *= store.messages[(k, i)]
    return w


def bp_message_update(
    store: MessageStore,
    potentials: Potentials,
    i: int,
    j: int,
    node_factors: Mapping | None = None,
) -> np.ndarray:
    """Recompute ``m_{i->j}(x_j) ~ sum_{x_i} psi_ij phi_i prod_{k != j} m_{k->i}`` in place."""
    w = incoming_product(store, i, exclude=j, node_factors=node_factors)
    out = store.messages[(i, j)]
    mass = kernels.message(potentials[i, j], w, out)
    store.updates += 1
    if not mass > 0:
        raise MessageUnderflowError(f"message {i}->{j} underflowed to zero")
    return out


def tree_schedule(graph: TreeGraph, root: int = 0) -> list[tuple[int, int]]:
    """Leaf-to-root then root-to-leaf ordering of all directed edges."""
    order = [root]
    parent = {root: -1}
    queue = deque([root])
    while queue:
        v = queue.popleft()
        for w in graph.neighbors(v):
            if w not in parent:
                parent[w] = v
                order.append(w)
                queue.append(w)
    up = [(v, parent[v]) for v in reversed(order) if parent[v] >= 0]
    down = [(parent[v], v) for v in order if parent[v] >= 0]
    return up + down


def bp_solve(
    graph: TreeGraph,
    potentials: Potentials,
    schedule: str | Sequence[tuple[int, int]] = "auto",
    node_factors: Mapping | None = None,
    tol: float = 1e-9,
    max_iters: int = 1000,
    damping: float = 0.0,
    store: MessageStore | None = None,
) -> MessageStore:
    """Run sum-product BP.

    ``schedule="auto"`` picks the exact two-pass schedule on trees and
    synchronous (optionally damped) updates otherwise.  ``"sequential"``
    sweeps all directed edges in ascending order on loopy graphs.  An explicit
    list of directed edges is executed once, in order.  Loopy runs that hit
    ``max_iters`` return with ``converged=False``.
    """
    if store is None:
        store = MessageStore.uniform(graph)
    if not isinstance(schedule, str):
        for i, j in schedule:
            bp_message_update(store, potentials, i, j, node_factors)
        return store
    is_tree = graph.require_tree or len(graph.edges) == graph.node_count - 1
    if schedule == "auto":
        schedule = "tree" if is_tree else "synchronous"
    if schedule == "tree":
        for i, j in tree_schedule(graph):
            bp_message_update(store, potentials, i, j, node_factors)
        store.converged = True
        store.iterations = 1
        return store
    edges = graph.directed_edges()
    store.converged = False
    for it in range(1, max_iters + 1):
        if schedule == "synchronous":
            old = {k: v.copy() for k, v in store.messages.items()}
            frozen = MessageStore(graph, old)
            new = {}
            for i, j in edges:
                w = incoming_product(frozen, i, exclude=j, node_factors=node_factors)
                out = np.empty(graph.state_dims[j])
                if not kernels.message(potentials[i, j], w, out) > 0:
                    raise MessageUnderflowError(f"message {i}->{j} underflowed to zero")
                new[(i, j)] = out
            store.updates += len(edges)
            for k, v in new.items():
                if damping:
                    v = (1.0 - damping) * v + damping * old[k]
                store.messages[k][:] = v
        elif schedule == "sequential":
            old = {k: v.copy() for k, v in store.messages.items()}
            for i, j in edges:
                bp_message_update(store, potentials, i, j, node_factors)
        else:
            raise ValueError(f"unknown schedule {schedule!r}")
        change = max(float(np.max(np.abs(store.messages[k] - old[k]))) for k in edges) if edges else 0.0
        store.trace.append(change)
        store.iterations = it
        if change < tol:
            store.converged = True
            break
    return store


def belief(store: MessageStore, i: int, node_factors: Mapping | None = None) -> np.ndarray:
    """Normalized product of all messages into ``i`` (and its node factor)."""
    b = incoming_product(store, i, node_factors=node_factors)
    s = b.sum()
    if not s > 0:
        raise MessageUnderflowError(f"belief at node {i} has zero mass")
    return b / s


def edge_belief(
    store: MessageStore,
    potentials: Potentials,
    i: int,
    j: int,
    node_factors: Mapping | None = None,
) -> np.ndarray:
    wi = incoming_product(store, i, exclude=j, node_factors=node_factors)
    wj = incoming_product(store, j, exclude=i, node_factors=node_factors)
    b = potentials[i, j] * wi[:, None] * wj[None, :]
    s = b.sum()
    if not s > 0:
        raise MessageUnderflowError(f"edge belief ({i}, {j}) has zero mass")
    return b / s


def bp_node_marginal(store: MessageStore, i: int, node_factors: Mapping | None = None) -> AggregateMarginal:
    return AggregateMarginal(i, belief(store, i, node_factors))


def bp_edge_marginal(
    store: MessageStore,
    potentials: Potentials,
    i: int,
    j: int,
    node_factors: Mapping | None = None,
) -> EdgeMarginal:
    return EdgeMarginal(i, j, edge_belief(store, potentials, i, j, node_factors))


def all_beliefs(store: MessageStore, node_factors: Mapping | None = None) -> list[np.ndarray]:
    return [belief(store, i, node_factors) for i in range(store.graph.node_count)]


def all_edge_beliefs(
    store: MessageStore, potentials: Potentials, node_factors: Mapping | None = None
) -> dict[tuple[int, int], np.ndarray]:
    return {(i, j): edge_belief(store, potentials, i, j, node_factors) for i, j in store.graph.edges}


def message_residuals(
    store: MessageStore, potentials: Potentials, node_factors: Mapping | None = None
) -> dict[tuple[int, int], float]:
    """Max-abs gap between each stored message and its BP recomputation."""
    out = {}
    for i, j in store.graph.directed_edges():
        w = incoming_product(store, i, exclude=j, node_factors=node_factors)
        fresh = w @ potentials[i, j]
        fresh = fresh / fresh.sum()
        out[(i, j)] = float(np.max(np.abs(fresh - store.messages[(i, j)])))
    return out
