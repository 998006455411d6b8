# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for binary Potts mean-field and exhaustive Gibbs enumeration.

With labels {0, 1} and q_i = Q_i(1), a sequential update reads
    q_i <- sigmoid(a_i + w * sum_{j != i} K_ij (2 q_j - 1)),   a_i = u_i(0) - u_i(1).
"""
import numpy as np

from libc.math cimport exp


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _field(const double[:, :, ::1] K, const double[:, ::1] q,
                          Py_ssize_t b, Py_ssize_t i, Py_ssize_t n) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t j
    for j in range(i):
        s += K[b, i, j] * (2.0 * q[b, j] - 1.0)
    for j in range(i + 1, n):
        s += K[b, i, j] * (2.0 * q[b, j] - 1.0)
    return s


def meanfield_forward(const double[:, ::1] a, const double[:, :, ::1] K, double w, int n_sweeps):
    """Run ``n_sweeps`` ascending-index sweeps from q = sigmoid(a).

    Returns (q_final, q_init, overwritten) where ``overwritten[b, t, i]`` is the
    value of q_i just before sweep t rewrote it (needed to replay backwards).
    """
    cdef Py_ssize_t B = a.shape[0], N = a.shape[1], b, t, i
    q_np = np.empty((B, N), dtype=np.float64)
    old_np = np.empty((B, n_sweeps, N), dtype=np.float64)
    cdef double[:, ::1] q = q_np
    cdef double[:, :, ::1] old = old_np
    with nogil:
        for b in range(B):
            for i in range(N):
                q[b, i] = _sigmoid(a[b, i])
    q0 = q_np.copy()
    with nogil:
        for b in range(B):
            for t in range(n_sweeps):
                for i in range(N):
                    old[b, t, i] = q[b, i]
                    q[b, i] = _sigmoid(a[b, i] + w * _field(K, q, b, i, N))
    return q_np, q0, old_np


def meanfield_backward(const double[:, :, ::1] K, double w, const double[:, ::1] q_final,
                       const double[:, :, ::1] overwritten, const double[:, ::1] grad_q):
    """Reverse-mode pass through the sweeps of :func:`meanfield_forward`.

    Returns (grad_a, grad_K, grad_w) for upstream gradient ``grad_q`` on q_final.
    """
    cdef Py_ssize_t B = K.shape[0], N = K.shape[1], T = overwritten.shape[1]
    cdef Py_ssize_t b, t, i, j
    cdef double qi, gs, s, m
    q_np = np.array(q_final, dtype=np.float64, copy=True)
    gq_np = np.array(grad_q, dtype=np.float64, copy=True)
    ga_np = np.zeros((B, N), dtype=np.float64)
    gK_np = np.zeros((B, N, N), dtype=np.float64)
    cdef double[:, ::1] q = q_np
    cdef double[:, ::1] gq = gq_np
    cdef double[:, ::1] ga = ga_np
    cdef double[:, :, ::1] gK = gK_np
    cdef double gw = 0.0
    with nogil:
        for b in range(B):
            for t in range(T - 1, -1, -1):
                for i in range(N - 1, -1, -1):
                    qi = q[b, i]
                    gs = gq[b, i] * qi * (1.0 - qi)
                    gq[b, i] = 0.0
                    if gs != 0.0:
                        s = 0.0
                        for j in range(N):
                            if j == i:
                                continue
                            m = 2.0 * q[b, j] - 1.0
                            s += K[b, i, j] * m
                            gK[b, i, j] += gs * w * m
                            gq[b, j] += gs * 2.0 * w * K[b, i, j]
                        ga[b, i] += gs
                        gw += gs * s
                    q[b, i] = overwritten[b, t, i]
            # q is back at its initial value sigmoid(a)
            for i in range(N):
                ga[b, i] += gq[b, i] * q[b, i] * (1.0 - q[b, i])
    return ga_np, gK_np, gw


def enumerate_energies(const double[:, ::1] unary, const double[:, ::1] K, double w):
    """Energy of every labelling; bit i of the index is the label of patch i."""
    cdef Py_ssize_t N = unary.shape[0], i, j
    cdef Py_ssize_t L = (<Py_ssize_t>1) << N, l
    cdef int yi, yj
    cdef double e
    out_np = np.empty(L, dtype=np.float64)
    cdef double[::1] out = out_np
    with nogil:
        for l in range(L):
            e = 0.0
            for i in range(N):
                yi = (l >> i) & 1
                e += unary[i, yi]
                for j in range(i + 1, N):
                    yj = (l >> j) & 1
                    if yi != yj:
                        e += w * K[i, j]
            out[l] = e
    return out_np
