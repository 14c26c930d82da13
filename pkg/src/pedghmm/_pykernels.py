"""NumPy/SciPy implementations of the hot loops.

Used when the compiled extension is unavailable, and as the reference
the compiled kernels are tested against.
"""
import numpy as np
import scipy.sparse as sp


def _csr(indptr, indices, data):
    n = len(indptr) - 1
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def nearest_two(pos, x, y):
    d = (pos[:, 0] - x) ** 2 + (pos[:, 1] - y) ** 2
    n = d.shape[0]
    if n == 0:
        return -1, -1, 1e308, 1e308
    # stable order keeps the lowest index on ties, like the compiled scan
    order = np.argsort(d, kind="stable")
    b = int(order[0])
    if n == 1:
        return b, -1, float(d[b]), 1e308
    s = int(order[1])
    return b, s, float(d[b]), float(d[s])


def propagate(indptr, indices, data, w, steps):
    at = _csr(indptr, indices, data).T.tocsr()
    cur = np.array(w, dtype=np.float64, copy=True)
    for _ in range(steps):
        cur = at @ cur
    return cur


def filter_step(indptr, indices, data, w, lik):
    out = (_csr(indptr, indices, data).T @ w) * lik
    return out, float(out.sum())


def forward_loglik(indptr, indices, data, pi, B):
    at = _csr(indptr, indices, data).T.tocsr()
    ll = 0.0
    a = pi * B[0]
    for t in range(B.shape[0]):
        if t:
            a = (at @ a) * B[t]
        c = a.sum()
        if not c > 0.0:
            return ll, t
        a = a / c
        ll += np.log(c)
    return float(ll), -1


def forward_backward(indptr, indices, data, pi, B):
    T, n = B.shape
    A = _csr(indptr, indices, data)
    at = A.T.tocsr()
    alpha = np.empty((T, n))
    scale = np.empty(T)
    a = pi * B[0]
    for t in range(T):
        if t:
            a = (at @ alpha[t - 1]) * B[t]
        c = a.sum()
        if not c > 0.0:
            return 0.0, np.zeros(n), np.zeros(n), np.zeros(len(data)), t
        alpha[t] = a / c
        scale[t] = c
    ll = float(np.log(scale).sum())

    rows = np.repeat(np.arange(n), np.diff(indptr))
    cols = np.asarray(indices)
    beta = np.ones(n)
    gsum = np.zeros(n)
    xsum = np.zeros(len(data))
    for t in range(T - 2, -1, -1):
        v = B[t + 1] * beta / scale[t + 1]
        xsum += alpha[t, rows] * data * v[cols]
        beta = A @ v
        gsum += alpha[t] * beta
    gamma0 = alpha[0] * beta
    return ll, gamma0, gsum, xsum, -1
