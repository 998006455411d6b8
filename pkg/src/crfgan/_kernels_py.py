"""Numpy fallback with the same interface as the compiled ``_kernels`` module."""
import numpy as np


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def meanfield_forward(a, K, w, n_sweeps):
    a = np.ascontiguousarray(a, dtype=np.float64)
    K = np.ascontiguousarray(K, dtype=np.float64)
    B, N = a.shape
    q = _sigmoid(a)
    q0 = q.copy()
    old = np.empty((B, n_sweeps, N))
    diag = np.einsum("bii->bi", K)
    for b in range(B):
        m = 2.0 * q[b] - 1.0
        for t in range(n_sweeps):
            for i in range(N):
                old[b, t, i] = q[b, i]
                s = K[b, i] @ m - diag[b, i] * m[i]
                q[b, i] = _sigmoid(a[b, i] + w * s)
                m[i] = 2.0 * q[b, i] - 1.0
    return q, q0, old


def meanfield_backward(K, w, q_final, overwritten, grad_q):
    K = np.ascontiguousarray(K, dtype=np.float64)
    B, N, _ = K.shape
    T = overwritten.shape[1]
    q = np.array(q_final, dtype=np.float64)
    gq = np.array(grad_q, dtype=np.float64)
    ga = np.zeros((B, N))
    gK = np.zeros((B, N, N))
    gw = 0.0
    for b in range(B):
        m = 2.0 * q[b] - 1.0
        for t in range(T - 1, -1, -1):
            for i in range(N - 1, -1, -1):
                qi = q[b, i]
                gs = gq[b, i] * qi * (1.0 - qi)
                gq[b, i] = 0.0
                if gs != 0.0:
                    mi = m[i]
                    m[i] = 0.0  # exclude j == i
                    s = K[b, i] @ m
                    gK[b, i] += gs * w * m
                    gq[b] += gs * 2.0 * w * K[b, i]
                    gq[b, i] = 0.0
                    m[i] = mi
                    ga[b, i] += gs
                    gw += gs * s
                q[b, i] = overwritten[b, t, i]
                m[i] = 2.0 * q[b, i] - 1.0
        ga[b] += gq[b] * q[b] * (1.0 - q[b])
    return ga, gK, gw


def enumerate_energies(unary, K, w):
    unary = np.asarray(unary, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    N = unary.shape[0]
    idx = np.arange(1 << N)
    Y = ((idx[:, None] >> np.arange(N)[None, :]) & 1).astype(np.float64)
    un = Y @ unary[:, 1] + (1.0 - Y) @ unary[:, 0]
    Ku = np.triu(K, 1)
    # labels differ on pair (i, j) iff y_i (1 - y_j) + (1 - y_i) y_j == 1
    pair = np.einsum("li,ij,lj->l", Y, Ku, 1.0 - Y) + np.einsum("li,ij,lj->l", 1.0 - Y, Ku, Y)
    return un + w * pair
