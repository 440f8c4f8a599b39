"""Pure numpy versions of the hot loops.

Signatures and in-place semantics match the compiled ``_ckernels`` module
exactly; ``agginf.kernels`` picks one of the two at import time.

Status codes returned by the sweep kernels::

    0  ok
    1  infeasible: an observation has mass where the model puts none
    2  a message lost all of its mass
"""
import numpy as np

OK, INFEASIBLE, UNDERFLOW = 0, 1, 2


def message(psi, w, out):
    """``out[j] = sum_i psi[i, j] * w[i]``, normalized in place.

    Returns the unnormalized mass; a zero return leaves ``out`` untouched
    apart from the raw product.
    """
    np.dot(w, psi, out=out)
    s = out.sum()
    if s > 0:
        out /= s
    return s


def scaling(y, incoming, u):
    """Sinkhorn scaling vector ``u = y / incoming`` with zero-mass terms dropped.

    Returns ``INFEASIBLE`` when ``y`` has mass where ``incoming`` is zero.
    """
    pos = y > 0
    if np.any(incoming[pos] <= 0):
        return INFEASIBLE
    u[:] = 0.0
    u[pos] = y[pos] / incoming[pos]
    return OK


def chain_sweep(trans, emis, y, observed, alpha, beta, gamma, xi, u):
    """One forward pass and one backward pass of collective forward-backward.

    ``trans`` has shape ``(S, d, d)`` with ``S`` either 1 (homogeneous) or
    ``T - 1``; ``trans[s, i, j] = p(x_{t+1} = j | x_t = i)``.  ``emis`` has
    shape ``(E, d, o)`` with ``E`` either 1 or ``T``.  Unobserved steps keep
    their ``gamma`` as is.
    """
    T = alpha.shape[0]
    S = trans.shape[0]
    E = emis.shape[0]
    tmp = np.empty(alpha.shape[1])
    for t in range(1, T):
        code = _scale_step(t - 1, emis[(t - 1) % E], y, observed, gamma, xi, u)
        if code:
            return code
        np.multiply(alpha[t - 1], gamma[t - 1], out=tmp)
        if not message(trans[(t - 1) % S], tmp, alpha[t]) > 0:
            return UNDERFLOW
        np.multiply(alpha[t], beta[t], out=tmp)
        if not message(emis[t % E], tmp, xi[t]) > 0:
            return UNDERFLOW
    for t in range(T - 2, -1, -1):
        code = _scale_step(t + 1, emis[(t + 1) % E], y, observed, gamma, xi, u)
        if code:
            return code
        np.multiply(beta[t + 1], gamma[t + 1], out=tmp)
        if not message(trans[t % S].T, tmp, beta[t]) > 0:
            return UNDERFLOW
        np.multiply(alpha[t], beta[t], out=tmp)
        if not message(emis[t % E], tmp, xi[t]) > 0:
            return UNDERFLOW
    return OK


def _scale_step(t, em, y, observed, gamma, xi, u):
    if not observed[t]:
        return OK
    code = scaling(y[t], xi[t], u[t])
    if code:
        return code
    if not message(em.T, u[t], gamma[t]) > 0:
        return UNDERFLOW
    return OK


def sample_paths(cum_trans, states, uniforms, out):
    """Advance ``M`` independent chains by inverse-CDF sampling.

    ``cum_trans[s, i, :]`` is the cumulative row of the step-``s`` transition
    (``s`` cycles modulo the number of stacked tables).  ``states`` holds the
    initial states, ``uniforms`` has shape ``(M, T - 1)`` and ``out`` has
    shape ``(M, T)``.
    """
    M, T = out.shape
    S = cum_trans.shape[0]
    d = cum_trans.shape[2]
    out[:, 0] = states
    for t in range(1, T):
        rows = cum_trans[(t - 1) % S][out[:, t - 1]]
        nxt = (rows < uniforms[:, t - 1:t]).sum(axis=1)
        np.minimum(nxt, d - 1, out=nxt)
        out[:, t] = nxt
