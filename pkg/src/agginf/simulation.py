"""Synthetic populations on a grid, sensor models and small benchmark instances.

Cells of an ``L x L`` grid are numbered ``row * L + col`` with row 0 at the
bottom and column 0 on the left.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .hmm import HmmModel
from .pgm import Potentials, TreeGraph


@dataclass(frozen=True)
class GridWorld:
    L: int
    goal: tuple[int, int] | None = None
    wind: tuple[float, float] = (1.0, 1.0)
    radius: int = 2

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("grid side must be at least 2")
        if self.goal is None:
            object.__setattr__(self, "goal", (self.L - 1, self.L - 1))
        gx, gy = self.goal
        if not (0 <= gx < self.L and 0 <= gy < self.L):
            raise ValueError("goal must lie inside the grid")
        if self.radius < 1:
            raise ValueError("move radius must be at least 1")

    @property
    def cells(self) -> int:
        return self.L * self.L

    def cell(self, col: int, row: int) -> int:
        return row * self.L + col

    def coords(self) -> np.ndarray:
        """``(cells, 2)`` array of ``(col, row)`` positions."""
        idx = np.arange(self.cells)
        return np.stack([idx % self.L, idx // self.L], axis=1).astype(float)


def _cos(vectors: np.ndarray, direction: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1) * np.linalg.norm(direction, axis=-1)
    out = np.zeros(norms.shape)
    ok = norms > 0
    out[ok] = np.sum(vectors * direction, axis=-1)[ok] / norms[ok]
    return out


def build_loglinear_transition(world: GridWorld, w: Sequence[float] = (3.0, 5.0, 5.0, 10.0)) -> np.ndarray:
    """Row-stochastic ``cells x cells`` table of a log-linear move model.

    A move ``s -> s'`` to any cell within Chebyshev distance ``world.radius``
    has weight ``exp(w . f)`` with features ``-|s' - s|`` (Euclidean),
    ``cos(move, wind)``, ``cos(move, goal - s)`` and ``[s' == s]``.  Both
    cosines are zero for the stay move and at the goal.  An infinite weight
    puts all mass on the moves where its feature is positive.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (4,) or np.any(np.isnan(w)):
        raise ValueError("w must hold four weights")
    xy = world.coords()
    move = xy[None, :, :] - xy[:, None, :]
    cand = np.max(np.abs(move), axis=2) <= world.radius
    feats = np.stack(
        [
            -np.linalg.norm(move, axis=2),
            _cos(move, np.asarray(world.wind, dtype=float)),
            _cos(move, (np.asarray(world.goal, dtype=float) - xy)[:, None, :]),
            np.eye(world.cells),
        ],
        axis=2,
    )
    with np.errstate(invalid="ignore"):
        logits = np.where(cand, np.nansum(np.where(feats != 0, feats * w, 0.0), axis=2), -np.inf)
    P = np.zeros_like(logits)
    for s in range(world.cells):
        row = logits[s]
        top = np.isposinf(row)
        if top.any():
            P[s, top] = 1.0 / top.sum()
            continue
        row = row - row[cand[s]].max()
        e = np.where(cand[s], np.exp(row), 0.0)
        P[s] = e / e.sum()
    return P


@dataclass
class PopulationTrace:
    M: int
    counts: np.ndarray
    paths: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.counts.shape[0]

    def marginals(self) -> np.ndarray:
        return self.counts / self.M


def sample_population(
    transition: np.ndarray,
    initial: np.ndarray,
    M: int,
    T: int,
    seed: int | np.random.Generator | None = None,
    keep_paths: bool = False,
) -> PopulationTrace:
    """``M`` independent Markov trajectories of length ``T``, tabulated per step.

    ``transition`` is one ``d x d`` table or a stack of per-step tables.
    """
    if M < 1 or T < 1:
        raise ValueError("need M >= 1 and T >= 1")
    rng = np.random.default_rng(seed)
    trans = np.asarray(transition, dtype=float)
    if trans.ndim == 2:
        trans = trans[None]
    d = trans.shape[1]
    cum = np.cumsum(trans, axis=2)
    cum[..., -1] = 1.0
    start = rng.choice(d, size=M, p=np.asarray(initial, dtype=float)).astype(np.int64)
    uniforms = rng.random((M, max(T - 1, 0)))
    paths = np.empty((M, T), dtype=np.int64)
    kernels.sample_paths(np.ascontiguousarray(cum), start, uniforms, paths)
    counts = np.stack([np.bincount(paths[:, t], minlength=d) for t in range(T)]).astype(float)
    return PopulationTrace(M, counts, paths if keep_paths else None)


def observe_poisson(counts: np.ndarray, beta: float = 1.0, rng=None) -> np.ndarray:
    """Independent ``Poisson(beta * n)`` readings of every count."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    rng = np.random.default_rng(rng)
    return rng.poisson(beta * np.asarray(counts, dtype=float)).astype(float)


@dataclass(frozen=True)
class SensorField:
    """Sensors at grid cells; each agent reports to exactly one of them.

    ``kind="gaussian"`` weights sensor ``o`` by ``exp(-r^2 / (2 scale^2))``,
    ``kind="exponential"`` by ``exp(-r / scale)``, with ``r`` the Euclidean
    distance between the agent's cell and the sensor.
    """

    positions: tuple[int, ...]
    kind: str = "gaussian"
    scale: float = 2.0

    def emission(self, world: GridWorld) -> np.ndarray:
        """``sensors x cells`` table ``p(o | x)``; every column sums to one."""
        if self.kind not in ("gaussian", "exponential"):
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        xy = world.coords()
        r = np.linalg.norm(xy[list(self.positions)][:, None, :] - xy[None, :, :], axis=2)
        logits = -r**2 / (2 * self.scale**2) if self.kind == "gaussian" else -r / self.scale
        logits = logits - logits.max(axis=0, keepdims=True)
        E = np.exp(logits)
        return E / E.sum(axis=0, keepdims=True)


def random_sensor_positions(world: GridWorld, k: int, rng) -> tuple[int, ...]:
    rng = np.random.default_rng(rng)
    return tuple(int(c) for c in np.sort(rng.choice(world.cells, size=k, replace=False)))


def observe_sensors(counts: np.ndarray, emission: np.ndarray, rng=None) -> np.ndarray:
    """Per-step sensor tallies when each agent picks one sensor from ``p(o | x)``."""
    rng = np.random.default_rng(rng)
    counts = np.asarray(counts)
    out = np.zeros((counts.shape[0], emission.shape[0]))
    for t in range(counts.shape[0]):
        for x in np.flatnonzero(counts[t]):
            out[t] += rng.multinomial(int(counts[t, x]), emission[:, x])
    return out


def corner_initial(world: GridWorld, radius: int = 1) -> np.ndarray:
    """Uniform over the cells within ``radius`` of the bottom-left corner."""
    xy = world.coords()
    mask = np.max(xy, axis=1) <= radius
    return mask / mask.sum()


def two_cluster_initial(world: GridWorld) -> np.ndarray:
    """Equal mass at the bottom-left and bottom-center cells."""
    p = np.zeros(world.cells)
    p[world.cell(0, 0)] += 0.5
    p[world.cell(world.L // 2, 0)] += 0.5
    return p


def chain_potentials(pi: np.ndarray, transition: np.ndarray, T: int) -> tuple[TreeGraph, Potentials]:
    """Markov chain over ``T`` steps as a pairwise path, ``pi`` folded into the first edge."""
    d = len(pi)
    if T == 1:
        raise ValueError("a single-step chain has no edges")
    graph = TreeGraph((d,) * T, tuple((t, t + 1) for t in range(T - 1)), frozenset(range(T)))
    tables = {(t, t + 1): np.array(transition, dtype=float) for t in range(T - 1)}
    tables[(0, 1)] = tables[(0, 1)] * np.asarray(pi)[:, None]
    return graph, Potentials(graph, tables, strict=False)


@dataclass
class BirdMigration:
    world: GridWorld
    truth: PopulationTrace
    model: HmmModel
    sensor_counts: np.ndarray
    chain: TreeGraph
    chain_potentials: Potentials
    poisson_counts: np.ndarray
    beta: float

    @property
    def sbp_observations(self) -> list[np.ndarray]:
        return [row / row.sum() for row in self.sensor_counts]

    @property
    def poisson_observations(self) -> dict[int, np.ndarray]:
        return {t: row for t, row in enumerate(self.poisson_counts)}


def build_bird_migration(
    L: int = 10,
    T: int = 10,
    M: int = 1000,
    seed: int = 0,
    w: Sequence[float] = (3.0, 5.0, 5.0, 10.0),
    sigma: float = 2.0,
    beta: float = 1.0,
    radius: int = 2,
) -> BirdMigration:
    """Birds fly from the bottom-left corner toward the top-right.

    Both observation models are drawn from the same simulated population:
    per-cell Gaussian sensors (one sensor per cell) feed the exact-marginal
    model, and Poisson-noisy cell counts feed the count-based solvers.
    """
    rng = np.random.default_rng(seed)
    world = GridWorld(L, radius=radius)
    P = build_loglinear_transition(world, w)
    pi = corner_initial(world)
    truth = sample_population(P, pi, M, T, rng)
    sensors = SensorField(tuple(range(world.cells)), "gaussian", sigma)
    E = sensors.emission(world)
    tallies = observe_sensors(truth.counts, E, rng)
    noisy = observe_poisson(truth.counts, beta, rng)
    graph, pots = chain_potentials(pi, P, T)
    return BirdMigration(world, truth, HmmModel(T, pi, P, E), tallies, graph, pots, noisy, beta)


@dataclass
class SparseSensing:
    world: GridWorld
    sensors: SensorField
    truth: PopulationTrace
    model: HmmModel
    sensor_counts: np.ndarray

    @property
    def observations(self) -> list[np.ndarray]:
        return [row / row.sum() for row in self.sensor_counts]


def build_sparse_sensing(
    L: int = 20,
    n_sensors: int = 16,
    M: int = 10000,
    T: int = 15,
    seed: int = 0,
    w: Sequence[float] = (3.0, 5.0, 5.0, 10.0),
    decay: float = 2.0,
    estimator_prior: str = "uniform",
    radius: int = 2,
) -> SparseSensing:
    """Two clusters tracked by a few sensors with exponential-decay connection.

    The population starts at the bottom-left and bottom-center cells.  The
    estimator's initial distribution is ``"uniform"`` over cells (it does not
    know where the clusters start) or ``"true"``.
    """
    rng = np.random.default_rng(seed)
    world = GridWorld(L, radius=radius)
    P = build_loglinear_transition(world, w)
    init = two_cluster_initial(world)
    truth = sample_population(P, init, M, T, rng)
    sensors = SensorField(random_sensor_positions(world, n_sensors, rng), "exponential", decay)
    E = sensors.emission(world)
    tallies = observe_sensors(truth.counts, E, rng)
    if estimator_prior == "uniform":
        prior = np.full(world.cells, 1.0 / world.cells)
    elif estimator_prior == "true":
        prior = init
    else:
        raise ValueError(f"unknown estimator prior {estimator_prior!r}")
    return SparseSensing(world, sensors, truth, HmmModel(T, prior, P, E), tallies)


def build_loopy_instance(
    seed: int, d: int = 5, rows: int = 2, cols: int = 4, noise: float = 1.0
) -> tuple[TreeGraph, Potentials, dict[int, np.ndarray]]:
    """Hidden nodes on a ``rows x cols`` grid, each with one observed leaf.

    Hidden node ``r * cols + c`` is joined to its right and upper neighbors;
    leaf ``rows * cols + k`` hangs off hidden node ``k``.  Every edge gets
    ``exp(I + Q)`` with ``Q`` entrywise ``N(0, noise^2)``, and every leaf a
    random aggregate distribution.
    """
    rng = np.random.default_rng(seed)
    H = rows * cols
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.append((k, k + 1))
            if r + 1 < rows:
                edges.append((k, k + cols))
    edges += [(k, H + k) for k in range(H)]
    graph = TreeGraph((d,) * (2 * H), tuple(edges), frozenset(range(H, 2 * H)), require_tree=False)
    tables = {e: np.exp(np.eye(d) + noise * rng.standard_normal((d, d))) for e in edges}
    obs = {H + k: rng.dirichlet(np.ones(d)) for k in range(H)}
    return graph, Potentials(graph, tables), obs
