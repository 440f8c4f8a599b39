"""Dense multi-marginal optimal transport with entropic regularization.

Everything here materializes the full J-mode tensor, so it is only meant
for desk-scale problems: it is the brute-force reference the message
passing solvers are checked against.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .pgm import DENSE_CAP, Potentials, SizeError, TreeGraph, unnormalized_joint


class InfeasibleError(ValueError):
    """Observations put mass where the model assigns none."""


def project(B: np.ndarray, j: int) -> np.ndarray:
    """Sum a tensor over every axis except ``j``."""
    axes = tuple(a for a in range(B.ndim) if a != j)
    return B.sum(axis=axes)


def cost_from_potentials(graph: TreeGraph, potentials: Potentials, cap: int = DENSE_CAP) -> np.ndarray:
    """``C(x) = -sum_{(i,j)} ln psi_ij(x_i, x_j)``; zero potentials give ``+inf``."""
    total = int(np.prod(graph.state_dims, dtype=np.int64))
    if total > cap:
        raise SizeError(f"cost tensor has {total} entries (cap {cap})")
    J = graph.node_count
    C = np.zeros(graph.state_dims)
    with np.errstate(divide="ignore"):
        for i, j in graph.edges:
            shape = [1] * J
            shape[i] = graph.state_dims[i]
            shape[j] = graph.state_dims[j]
            C = C - np.log(potentials[i, j]).reshape(shape)
    return C


def kernel_from_potentials(graph: TreeGraph, potentials: Potentials, cap: int = DENSE_CAP) -> np.ndarray:
    """``K = exp(-C)`` built directly as the product of potentials."""
    total = int(np.prod(graph.state_dims, dtype=np.int64))
    if total > cap:
        raise SizeError(f"kernel tensor has {total} entries (cap {cap})")
    return unnormalized_joint(graph, potentials)


def _outer(us: list[np.ndarray]) -> np.ndarray:
    U = np.ones(())
    for u in us:
        U = np.multiply.outer(U, u)
    return U


@dataclass
class SinkhornResult:
    scalings: list[np.ndarray]
    plan: np.ndarray
    trace: list[float] = field(default_factory=list)
    sweeps: int = 0
    converged: bool = False

    def marginal(self, j: int) -> np.ndarray:
        return project(self.plan, j)


def sinkhorn(
    K: np.ndarray,
    targets: Mapping[int, np.ndarray],
    tol: float = 1e-9,
    max_iters: int = 10000,
    epsilon: float | None = None,
    post_update_check: bool = False,
) -> SinkhornResult:
    """Multi-marginal Sinkhorn scaling of a nonnegative tensor.

    ``K`` is the Gibbs kernel; when ``epsilon`` is given it is interpreted as
    a cost tensor ``C`` instead and ``K = exp(-C / epsilon)``.  Axes named in
    ``targets`` are scaled in ascending order.  Iteration stops after the
    first sweep in which every constrained marginal was within ``tol``
    (1-norm, after normalizing the tensor) just before its own update; the
    trace records the worst such residual per sweep.
    Target entries equal to zero pin the corresponding scaling entries to
    zero.
    """
    if epsilon is not None:
        K = np.exp(-np.asarray(K, dtype=float) / epsilon)
    K = np.asarray(K, dtype=float)
    if np.any(K < 0):
        raise ValueError("kernel must be nonnegative")
    order = sorted(targets)
    mus = {j: np.asarray(targets[j], dtype=float) for j in order}
    for j, mu in mus.items():
        if mu.shape != (K.shape[j],):
            raise ValueError(f"target for axis {j} has shape {mu.shape}")
        if abs(mu.sum() - 1.0) > 1e-9 or np.any(mu < 0):
            raise ValueError(f"target for axis {j} is not a probability vector")
    us = [np.ones(n) for n in K.shape]
    res = SinkhornResult(us, K.copy())
    if not order:
        res.plan = K / K.sum()
        res.converged = True
        return res
    for sweep in range(1, max_iters + 1):
        worst = 0.0
        for j in order:
            B = K * _outer(us)
            P = project(B, j)
            mass = P.sum()
            worst = max(worst, float(np.abs(P / mass - mus[j]).sum()) if mass > 0 else np.inf)
            pos = mus[j] > 0
            if np.any(P[pos] <= 0):
                raise InfeasibleError(f"axis {j}: target mass where the kernel has none")
            new = np.zeros_like(us[j])
            new[pos] = us[j][pos] * mus[j][pos] / P[pos]
            us[j] = new
            if post_update_check:
                Pj = project(K * _outer(us), j)
                if np.max(np.abs(Pj - mus[j])) > 1e-13:
                    raise AssertionError(f"axis {j} not matched after its scaling")
        res.trace.append(worst)
        res.sweeps = sweep
        if worst <= tol:
            res.converged = True
            break
    res.scalings = us
    res.plan = K * _outer(us)
    return res


def kl_divergence(B: np.ndarray, K: np.ndarray) -> float:
    """``sum B ln(B / K)`` with ``0 ln 0 = 0``; ``K`` may be unnormalized."""
    pos = B > 0
    if np.any(K[pos] <= 0):
        return np.inf
    return float(np.sum(B[pos] * np.log(B[pos] / K[pos])))


def dense_marginals(
    graph: TreeGraph,
    potentials: Potentials,
    observations: Mapping[int, np.ndarray],
    tol: float = 1e-12,
    max_iters: int = 100000,
) -> tuple[list[np.ndarray], SinkhornResult]:
    """Node marginals of the entropic MOT solution with observed axes fixed."""
    K = kernel_from_potentials(graph, potentials)
    K = K / K.max()
    res = sinkhorn(K, observations, tol=tol, max_iters=max_iters)
    B = res.plan / res.plan.sum()
    res.plan = B
    return [project(B, j) for j in range(graph.node_count)], res
