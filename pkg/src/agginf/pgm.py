"""Graphs, potentials and distributions shared by every solver.

Node indices are zero-based integers.  Potentials are stored once per
unordered edge ``(i, j)`` with ``i < j``; asking for ``(j, i)`` returns the
transposed view.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

DENSE_CAP = 10**7


class StructureError(ValueError):
    """Graph or model structure not supported by the requested operation."""


class UnsupportedStructureError(StructureError):
    pass


class SizeError(ValueError):
    """Dense tensor would exceed the configured entry cap."""


def _edge_key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class TreeGraph:
    state_dims: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    observed: frozenset[int] = frozenset()
    require_tree: bool = True
    _adj: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.state_dims)
        if not dims:
            raise StructureError("graph needs at least one node")
        if any(d < 1 for d in dims):
            raise StructureError("state dimensions must be >= 1")
        J = len(dims)
        edges = []
        seen = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j or not (0 <= i < J and 0 <= j < J):
                raise StructureError(f"invalid edge ({i}, {j})")
            key = _edge_key(i, j)
            if key in seen:
                raise StructureError(f"duplicate edge {key}")
            seen.add(key)
            edges.append(key)
        observed = frozenset(int(v) for v in self.observed)
        for v in observed:
            if not 0 <= v < J:
                raise StructureError(f"observed node {v} out of range")
        adj: list[list[int]] = [[] for _ in range(J)]
        for i, j in edges:
            adj[i].append(j)
            adj[j].append(i)
        object.__setattr__(self, "state_dims", dims)
        object.__setattr__(self, "edges", tuple(edges))
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "_adj", tuple(tuple(sorted(a)) for a in adj))
        if self.require_tree:
            ok, why = validate_tree(self)
            if not ok:
                raise StructureError(why)

    @property
    def node_count(self) -> int:
        return len(self.state_dims)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self._adj[i]

    def degree(self, i: int) -> int:
        return len(self._adj[i])

    def is_leaf(self, i: int) -> bool:
        return len(self._adj[i]) == 1

    def directed_edges(self) -> list[tuple[int, int]]:
        out = []
        for i, j in self.edges:
            out.append((i, j))
            out.append((j, i))
        return sorted(out)

    def with_observed(self, observed: Iterable[int]) -> "TreeGraph":
        return TreeGraph(self.state_dims, self.edges, frozenset(observed), self.require_tree)

    def tree_path(self, src: int, dst: int) -> list[int]:
        """Node sequence of the unique path from ``src`` to ``dst`` (inclusive)."""
        parent = {src: -1}
        queue = deque([src])
        while queue:
            v = queue.popleft()
            if v == dst:
                break
            for w in self._adj[v]:
                if w not in parent:
                    parent[w] = v
                    queue.append(w)
        if dst not in parent:
            raise StructureError(f"no path from {src} to {dst}")
        path = [dst]
        while path[-1] != src:
            path.append(parent[path[-1]])
        return path[::-1]


def _ancestors(parent: list[int], v: int) -> list[int]:
    out = []
    while v != -1:
        out.append(v)
        v = parent[v]
    return out


def validate_tree(graph: TreeGraph) -> tuple[bool, str]:
    """Return ``(True, "")`` if the graph is connected and acyclic.

    Otherwise the diagnostic names the first cycle found or the set of nodes
    not reachable from node 0.
    """
    J = graph.node_count
    adj: list[list[int]] = [[] for _ in range(J)]
    for i, j in graph.edges:
        adj[i].append(j)
        adj[j].append(i)
    parent = [-2] * J
    parent[0] = -1
    stack = [0]
    while stack:
        v = stack.pop()
        for w in sorted(adj[v]):
            if w == parent[v]:
                continue
            if parent[w] != -2:
                chain_v = _ancestors(parent, v)
                chain_w = _ancestors(parent, w)
                common = set(chain_v) & set(chain_w)
                lca = next(x for x in chain_v if x in common)
                cycle = chain_v[: chain_v.index(lca) + 1] + chain_w[: chain_w.index(lca)][::-1]
                return False, "cycle: " + " - ".join(str(c) for c in cycle + [cycle[0]])
            parent[w] = v
            stack.append(w)
    missing = [v for v in range(J) if parent[v] == -2]
    if missing:
        return False, f"disconnected: nodes {missing} unreachable from node 0"
    return True, ""


@dataclass(frozen=True)
class EdgePotential:
    i: int
    j: int
    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 2:
            raise ValueError("edge potential must be a matrix")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)


class Potentials(Mapping):
    """Edge potentials keyed by unordered edge.

    ``pots[i, j]`` has shape ``(d_i, d_j)`` for either orientation.  Zero
    entries are rejected unless ``strict=False`` (used for the identity
    couplings that split observed nodes).
    """

    def __init__(self, graph: TreeGraph, tables, strict: bool = True):
        if isinstance(tables, Mapping):
            items = list(tables.items())
        else:
            items = [((p.i, p.j), p.table) for p in tables]
        store = {}
        for (i, j), t in items:
            t = np.array(t, dtype=float)
            if i > j:
                i, j, t = j, i, t.T
            if (i, j) not in graph.edges and _edge_key(i, j) not in graph.edges:
                raise StructureError(f"potential on non-edge ({i}, {j})")
            if t.shape != (graph.state_dims[i], graph.state_dims[j]):
                raise ValueError(
                    f"potential ({i}, {j}) has shape {t.shape}, expected "
                    f"{(graph.state_dims[i], graph.state_dims[j])}"
                )
            if not np.all(np.isfinite(t)):
                raise ValueError(f"potential ({i}, {j}) has non-finite entries")
            if strict and np.any(t <= 0):
                raise ValueError(f"potential ({i}, {j}) must be strictly positive")
            if np.any(t < 0) or not np.any(t > 0):
                raise ValueError(f"potential ({i}, {j}) must be nonnegative and nonzero")
            t.setflags(write=False)
            store[(i, j)] = t
        missing = set(graph.edges) - set(store)
        if missing:
            raise StructureError(f"missing potentials for edges {sorted(missing)}")
        self.graph = graph
        self._tables = store

    def __getitem__(self, key):
        i, j = key
        if i < j:
            return self._tables[(i, j)]
        return self._tables[(j, i)].T

    def __iter__(self):
        return iter(self._tables)

    def __len__(self):
        return len(self._tables)

    def as_list(self) -> list[EdgePotential]:
        return [EdgePotential(i, j, t) for (i, j), t in sorted(self._tables.items())]

    def scaled(self, factors: Mapping[tuple[int, int], float]) -> "Potentials":
        tabs = {k: t * factors.get(k, 1.0) for k, t in self._tables.items()}
        return Potentials(self.graph, tabs, strict=False)


@dataclass(frozen=True)
class AggregateMarginal:
    node: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("marginal must be a finite nonnegative vector")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"marginal for node {self.node} sums to {p.sum()!r}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class EdgeMarginal:
    i: int
    j: int
    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 2 or np.any(t < 0) or abs(t.sum() - 1.0) > 1e-12:
            raise ValueError("edge marginal must be a nonnegative matrix summing to 1")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)


def normalize(v: np.ndarray) -> np.ndarray:
    s = v.sum()
    if not s > 0:
        raise FloatingPointError("cannot normalize a vector with zero mass")
    return v / s


# ---------------------------------------------------------------------------
# directed models


@dataclass
class DirectedModel:
    """Bayesian network with at most two parents per node.

    ``cpts[v]`` has shape ``(d_p1, [d_p2,] d_v)`` and sums to one over the
    last axis; parents appear in the order given by ``parents[v]``.  Root
    nodes carry a prior vector of shape ``(d_v,)``.
    """

    state_dims: tuple[int, ...]
    parents: dict[int, tuple[int, ...]]
    cpts: dict[int, np.ndarray]

    def __post_init__(self):
        self.state_dims = tuple(int(d) for d in self.state_dims)
        J = len(self.state_dims)
        self.parents = {v: tuple(self.parents.get(v, ())) for v in range(J)}
        for v in range(J):
            cpt = np.asarray(self.cpts[v], dtype=float)
            pa = self.parents[v]
            shape = tuple(self.state_dims[p] for p in pa) + (self.state_dims[v],)
            if cpt.shape != shape:
                raise ValueError(f"cpt of node {v} has shape {cpt.shape}, expected {shape}")
            if np.any(cpt < 0) or not np.allclose(cpt.sum(axis=-1), 1.0, atol=1e-10):
                raise ValueError(f"cpt of node {v} is not a conditional distribution")
            self.cpts[v] = cpt
        self.topological_order()

    @property
    def node_count(self) -> int:
        return len(self.state_dims)

    def topological_order(self) -> list[int]:
        J = self.node_count
        indeg = [len(self.parents[v]) for v in range(J)]
        children: list[list[int]] = [[] for _ in range(J)]
        for v, pa in self.parents.items():
            for p in pa:
                children[p].append(v)
        ready = sorted(v for v in range(J) if indeg[v] == 0)
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for c in children[v]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort()
        if len(order) != J:
            raise StructureError("directed model contains a cycle")
        return order

    def joint(self) -> np.ndarray:
        J = self.node_count
        total = int(np.prod(self.state_dims))
        if total > DENSE_CAP:
            raise SizeError(f"joint has {total} entries (cap {DENSE_CAP})")
        out = np.ones(self.state_dims)
        for v in range(J):
            axes = list(self.parents[v]) + [v]
            shape = [1] * J
            for a in axes:
                shape[a] = self.state_dims[a]
            # reorder cpt axes into ascending node order before broadcasting
            perm = np.argsort(axes)
            out = out * np.transpose(self.cpts[v], perm).reshape(shape)
        return out


def _pairwise_log_decomposition(logf: np.ndarray):
    """Split a 3-way log table into pairwise parts plus a residual interaction.

    Returns ``(ac, bc, ab, resid)`` with ``logf[a,b,c] = ab[a,b] + ac[a,c] +
    bc[b,c] + resid[a,b,c]`` and ``resid`` the three-way ANOVA interaction.
    """
    m_abc = logf
    m_ab = logf.mean(axis=2)
    m_ac = logf.mean(axis=1)
    m_bc = logf.mean(axis=0)
    m_a = logf.mean(axis=(1, 2))
    m_b = logf.mean(axis=(0, 2))
    m_c = logf.mean(axis=(0, 1))
    m = logf.mean()
    resid = (
        m_abc
        - m_ab[:, :, None]
        - m_ac[:, None, :]
        - m_bc[None, :, :]
        + m_a[:, None, None]
        + m_b[None, :, None]
        + m_c[None, None, :]
        - m
    )
    ab = m_ab
    ac = m_ac - m_a[:, None]
    bc = m_bc - m_b[:, None] - m_c[None, :] + m
    return ac, bc, ab, resid


def moralize(
    model: DirectedModel, allow_approximation: bool = False, tol: float = 1e-10
) -> tuple[TreeGraph, list[EdgePotential]]:
    """Convert a directed model into a pairwise MRF on its moral graph.

    Single-parent tables become the edge potential ``p(child | parent)``;
    root priors are absorbed into the edge towards the lowest-indexed
    neighbor.  A two-parent table can only be written with pairwise factors
    when its three-way log interaction vanishes (logistic-style CPTs); the
    cross-parent edge absorbs the parent-pair normalizer.  Otherwise a
    :class:`UnsupportedStructureError` is raised unless
    ``allow_approximation`` is set, in which case the interaction is dropped.
    """
    J = model.node_count
    dims = model.state_dims
    tables: dict[tuple[int, int], np.ndarray] = {}

    def mult(i, j, t):
        key = _edge_key(i, j)
        t = t if i < j else t.T
        tables[key] = tables[key] * t if key in tables else np.array(t, dtype=float)

    for v in range(J):
        pa = model.parents[v]
        if len(pa) > 2:
            raise UnsupportedStructureError(f"node {v} has {len(pa)} parents; at most 2 supported")
    edges = set()
    for v in range(J):
        pa = model.parents[v]
        for p in pa:
            edges.add(_edge_key(p, v))
        if len(pa) == 2:
            edges.add(_edge_key(*pa))
    for i, j in edges:
        tables[(i, j)] = np.ones((dims[i], dims[j]))

    nbrs: dict[int, list[int]] = {v: [] for v in range(J)}
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)

    for v in range(J):
        pa = model.parents[v]
        cpt = model.cpts[v]
        if len(pa) == 0:
            if not nbrs[v]:
                if J > 1:
                    raise StructureError(f"node {v} is isolated")
                continue
            u = min(nbrs[v])
            mult(v, u, cpt[:, None] * np.ones((1, dims[u])))
        elif len(pa) == 1:
            mult(pa[0], v, cpt)
        else:
            a, b = pa
            with np.errstate(divide="ignore"):
                logf = np.log(cpt)
            if not np.all(np.isfinite(logf)):
                raise UnsupportedStructureError(
                    f"two-parent table of node {v} has zeros; no pairwise encoding"
                )
            ac, bc, ab, resid = _pairwise_log_decomposition(logf)
            if np.max(np.abs(resid)) > tol and not allow_approximation:
                raise UnsupportedStructureError(
                    f"p({v} | {a}, {b}) has a three-way interaction "
                    f"(max {np.max(np.abs(resid)):.3g}); pass allow_approximation=True"
                )
            mult(a, v, np.exp(ac))
            mult(b, v, np.exp(bc))
            mult(a, b, np.exp(ab))
    graph = TreeGraph(dims, tuple(sorted(edges)), require_tree=False)
    ok, _ = validate_tree(graph)
    if ok:
        graph = TreeGraph(dims, graph.edges, require_tree=True)
    pots = [EdgePotential(i, j, tables[(i, j)]) for i, j in sorted(tables)]
    return graph, pots


def normalize_observed_leaves(
    graph: TreeGraph, potentials: Potentials | None = None
) -> tuple[TreeGraph, Potentials | None, dict[int, int]]:
    """Move observations on internal nodes onto fresh leaf duplicates.

    Each observed node with degree other than one gets a new leaf attached
    through an identity coupling, and the observation moves to that leaf.
    The returned mapping sends every node of the new graph to its original
    index.
    """
    J = graph.node_count
    mapping = {v: v for v in range(J)}
    dims = list(graph.state_dims)
    edges = list(graph.edges)
    observed = set(graph.observed)
    extra: dict[tuple[int, int], np.ndarray] = {}
    for v in sorted(graph.observed):
        if graph.degree(v) == 1:
            continue
        new = len(dims)
        dims.append(graph.state_dims[v])
        edges.append((v, new))
        extra[(v, new)] = np.eye(graph.state_dims[v])
        observed.discard(v)
        observed.add(new)
        mapping[new] = v
    if not extra:
        return graph, potentials, mapping
    new_graph = TreeGraph(tuple(dims), tuple(edges), frozenset(observed), graph.require_tree)
    new_pots = None
    if potentials is not None:
        tabs = {k: potentials[k] for k in potentials}
        tabs.update(extra)
        new_pots = Potentials(new_graph, tabs, strict=False)
    return new_graph, new_pots, mapping


def joint_distribution(graph: TreeGraph, potentials: Potentials, cap: int = DENSE_CAP) -> np.ndarray:
    """Normalized joint tensor ``prod psi_ij / Z`` by direct broadcasting."""
    total = int(np.prod(graph.state_dims, dtype=np.int64))
    if total > cap:
        raise SizeError(f"joint has {total} entries (cap {cap})")
    out = unnormalized_joint(graph, potentials)
    return out / out.sum()


def unnormalized_joint(graph: TreeGraph, potentials: Potentials) -> np.ndarray:
    J = graph.node_count
    out = np.ones(graph.state_dims)
    for i, j in graph.edges:
        shape = [1] * J
        shape[i] = graph.state_dims[i]
        shape[j] = graph.state_dims[j]
        out = out * potentials[i, j].reshape(shape)
    return out


# ---------------------------------------------------------------------------
# model files


def load_model(path: str | Path) -> tuple[TreeGraph, Potentials, dict[int, np.ndarray]]:
    """Read a model JSON file.

    Returns the graph, its potentials and any observations given inline as
    ``observation`` arrays on nodes.  A ``directed`` section, when present,
    replaces ``edges`` by the moralized model.
    """
    with open(path) as fh:
        doc = json.load(fh)
    return model_from_dict(doc)


def model_from_dict(doc: dict) -> tuple[TreeGraph, Potentials, dict[int, np.ndarray]]:
    nodes = sorted(doc["nodes"], key=lambda n: int(n["id"]))
    ids = [int(n["id"]) for n in nodes]
    if ids != list(range(len(ids))):
        raise StructureError("node ids must be 0..J-1")
    dims = tuple(int(n["dim"]) for n in nodes)
    observed = frozenset(int(n["id"]) for n in nodes if n.get("observed", False))
    observations = {
        int(n["id"]): np.asarray(n["observation"], dtype=float)
        for n in nodes
        if n.get("observation") is not None
    }
    require_tree = bool(doc.get("require_tree", True))
    if "directed" in doc:
        d = doc["directed"]
        parents = {int(k): tuple(int(p) for p in v) for k, v in d.get("parents", {}).items()}
        cpts = {}
        for k, v in d["cpts"].items():
            k = int(k)
            shape = tuple(dims[p] for p in parents.get(k, ())) + (dims[k],)
            cpts[k] = np.asarray(v, dtype=float).reshape(shape)
        g, pots = moralize(DirectedModel(dims, parents, cpts))
        graph = TreeGraph(g.state_dims, g.edges, observed, g.require_tree)
        return graph, Potentials(graph, pots), observations
    edges = tuple((int(e["i"]), int(e["j"])) for e in doc["edges"])
    graph = TreeGraph(dims, edges, observed, require_tree)
    tabs = {
        (int(e["i"]), int(e["j"])): np.asarray(e["table"], dtype=float).reshape(
            dims[int(e["i"])], dims[int(e["j"])]
        )
        for e in doc["edges"]
    }
    return graph, Potentials(graph, tabs), observations


def model_to_dict(
    graph: TreeGraph, potentials: Potentials, observations: Mapping[int, np.ndarray] | None = None
) -> dict:
    observations = observations or {}
    nodes = []
    for v, d in enumerate(graph.state_dims):
        entry = {"id": v, "dim": d, "observed": v in graph.observed}
        if v in observations:
            entry["observation"] = [float(x) for x in observations[v]]
        nodes.append(entry)
    edges = [
        {"i": i, "j": j, "table": [float(x) for x in np.ravel(potentials[i, j])]}
        for i, j in graph.edges
    ]
    return {"nodes": nodes, "edges": edges, "require_tree": graph.require_tree}


def random_tree(rng: np.random.Generator, J: int) -> tuple[tuple[int, int], ...]:
    """Uniform-ish random labelled tree by random attachment."""
    edges = []
    for v in range(1, J):
        edges.append((int(rng.integers(0, v)), v))
    perm = rng.permutation(J)
    return tuple(_edge_key(int(perm[i]), int(perm[j])) for i, j in edges)


def random_potentials(
    rng: np.random.Generator, graph: TreeGraph, low: float = 0.1, high: float = 2.0
) -> Potentials:
    return Potentials(
        graph,
        {e: rng.uniform(low, high, size=(graph.state_dims[e[0]], graph.state_dims[e[1]])) for e in graph.edges},
    )


def leaves(graph: TreeGraph) -> list[int]:
    return [v for v in range(graph.node_count) if graph.degree(v) == 1]
