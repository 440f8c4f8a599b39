# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot loops in ``agginf._pykernels``.

Same signatures, same in-place semantics, same status codes.
"""
from cython.view cimport array as cvarray

cdef enum:
    OK = 0
    INFEASIBLE = 1
    UNDERFLOW = 2


cdef double _message(const double[:, :] psi, const double[:] w, double[:] out) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef Py_ssize_t n = psi.shape[0], m = psi.shape[1]
    cdef double s = 0.0, wi
    for j in range(m):
        out[j] = 0.0
    for i in range(n):
        wi = w[i]
        if wi == 0.0:
            continue
        for j in range(m):
            out[j] += psi[i, j] * wi
    for j in range(m):
        s += out[j]
    if s > 0.0:
        for j in range(m):
            out[j] /= s
    return s


cdef double _message_t(const double[:, :] psi, const double[:] w, double[:] out) noexcept nogil:
    # out[i] = sum_j psi[i, j] * w[j]
    cdef Py_ssize_t i, j
    cdef Py_ssize_t n = psi.shape[0], m = psi.shape[1]
    cdef double s = 0.0, acc
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += psi[i, j] * w[j]
        out[i] = acc
        s += acc
    if s > 0.0:
        for i in range(n):
            out[i] /= s
    return s


def message(psi, w, out):
    return _message(psi, w, out)


cdef int _scaling(const double[:] y, const double[:] incoming, double[:] u) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(y.shape[0]):
        if y[k] > 0.0:
            if incoming[k] <= 0.0:
                return INFEASIBLE
            u[k] = y[k] / incoming[k]
        else:
            u[k] = 0.0
    return OK


def scaling(y, incoming, u):
    return _scaling(y, incoming, u)


cdef int _scale_step(Py_ssize_t t, const double[:, :] em, const double[:, :] y,
                     const unsigned char[:] observed, double[:, :] gamma,
                     double[:, :] xi, double[:, :] u) noexcept nogil:
    cdef int code
    if not observed[t]:
        return OK
    code = _scaling(y[t], xi[t], u[t])
    if code:
        return code
    if not _message_t(em, u[t], gamma[t]) > 0.0:
        return UNDERFLOW
    return OK


def chain_sweep(const double[:, :, :] trans, const double[:, :, :] emis,
                const double[:, :] y, const unsigned char[:] observed,
                double[:, :] alpha, double[:, :] beta, double[:, :] gamma,
                double[:, :] xi, double[:, :] u):
    cdef double[:] tmp = cvarray(shape=(alpha.shape[1],), itemsize=sizeof(double), format="d")
    cdef int code
    with nogil:
        code = _chain_sweep(trans, emis, y, observed, alpha, beta, gamma, xi, u, tmp)
    return code


cdef int _chain_sweep(const double[:, :, :] trans, const double[:, :, :] emis,
                      const double[:, :] y, const unsigned char[:] observed,
                      double[:, :] alpha, double[:, :] beta, double[:, :] gamma,
                      double[:, :] xi, double[:, :] u, double[:] tmp) noexcept nogil:
    cdef Py_ssize_t T = alpha.shape[0], d = alpha.shape[1]
    cdef Py_ssize_t S = trans.shape[0], E = emis.shape[0]
    cdef Py_ssize_t t, k
    cdef int code = OK
    for t in range(1, T):
        code = _scale_step(t - 1, emis[(t - 1) % E], y, observed, gamma, xi, u)
        if code:
            return code
        for k in range(d):
            tmp[k] = alpha[t - 1, k] * gamma[t - 1, k]
        if not _message(trans[(t - 1) % S], tmp, alpha[t]) > 0.0:
            return UNDERFLOW
        for k in range(d):
            tmp[k] = alpha[t, k] * beta[t, k]
        if not _message(emis[t % E], tmp, xi[t]) > 0.0:
            return UNDERFLOW
    for t in range(T - 2, -1, -1):
        code = _scale_step(t + 1, emis[(t + 1) % E], y, observed, gamma, xi, u)
        if code:
            return code
        for k in range(d):
            tmp[k] = beta[t + 1, k] * gamma[t + 1, k]
        if not _message_t(trans[t % S], tmp, beta[t]) > 0.0:
            return UNDERFLOW
        for k in range(d):
            tmp[k] = alpha[t, k] * beta[t, k]
        if not _message(emis[t % E], tmp, xi[t]) > 0.0:
            return UNDERFLOW
    return OK


def sample_paths(const double[:, :, :] cum_trans, const long[:] states,
                 const double[:, :] uniforms, long[:, :] out):
    cdef Py_ssize_t M = out.shape[0], T = out.shape[1]
    cdef Py_ssize_t S = cum_trans.shape[0], d = cum_trans.shape[2]
    cdef Py_ssize_t m, t, lo, hi, mid, s
    cdef double r
    with nogil:
        for m in range(M):
            out[m, 0] = states[m]
            for t in range(1, T):
                s = (t - 1) % S
                r = uniforms[m, t - 1]
                lo = 0
                hi = d - 1
                # first index whose cumulative mass reaches r
                while lo < hi:
                    mid = (lo + hi) // 2
                    if cum_trans[s, out[m, t - 1], mid] < r:
                        lo = mid + 1
                    else:
                        hi = mid
                out[m, t] = lo
