# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: sparse propagation, scaled forward-backward and
nearest-node matching. Signatures mirror :mod:`pedghmm._pykernels`."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int32_t i32


def nearest_two(const f64[:, ::1] pos, double x, double y):
    cdef Py_ssize_t n = pos.shape[0], k
    cdef Py_ssize_t b = -1, s = -1
    cdef double db = 1e308, ds = 1e308, d, dx, dy
    for k in range(n):
        dx = pos[k, 0] - x
        dy = pos[k, 1] - y
        d = dx * dx + dy * dy
        if d < db:
            s = b
            ds = db
            b = k
            db = d
        elif d < ds:
            s = k
            ds = d
    return b, s, db, ds


cdef void _scatter(const i32[::1] indptr, const i32[::1] indices, const f64[::1] data,
                   const f64[::1] w, f64[::1] out) noexcept nogil:
    cdef Py_ssize_t n = w.shape[0], i, k
    cdef double wi
    for i in range(n):
        out[i] = 0.0
    for i in range(n):
        wi = w[i]
        if wi == 0.0:
            continue
        for k in range(indptr[i], indptr[i + 1]):
            out[indices[k]] += wi * data[k]


def propagate(const i32[::1] indptr, const i32[::1] indices, const f64[::1] data,
              w, Py_ssize_t steps):
    cdef Py_ssize_t n = indptr.shape[0] - 1, h
    cdef f64[::1] cur = np.array(w, dtype=np.float64, copy=True)
    cdef f64[::1] nxt = np.empty(n, dtype=np.float64)
    cdef f64[::1] tmp
    with nogil:
        for h in range(steps):
            _scatter(indptr, indices, data, cur, nxt)
            tmp = cur
            cur = nxt
            nxt = tmp
    return np.asarray(cur)


def filter_step(const i32[::1] indptr, const i32[::1] indices, const f64[::1] data,
                const f64[::1] w, const f64[::1] lik):
    cdef Py_ssize_t n = w.shape[0], i
    cdef double total = 0.0
    out = np.empty(n, dtype=np.float64)
    cdef f64[::1] o = out
    with nogil:
        _scatter(indptr, indices, data, w, o)
        for i in range(n):
            o[i] *= lik[i]
            total += o[i]
    return out, total


def forward_loglik(const i32[::1] indptr, const i32[::1] indices, const f64[::1] data,
                   const f64[::1] pi, const f64[:, ::1] B):
    """Scaled forward pass. Returns (sum of log scales, failing step or -1)."""
    cdef Py_ssize_t T = B.shape[0], n = B.shape[1], t, i
    cdef f64[::1] a = np.empty(n, dtype=np.float64)
    cdef f64[::1] pred = np.empty(n, dtype=np.float64)
    cdef double c, ll = 0.0
    cdef Py_ssize_t fail = -1
    with nogil:
        for t in range(T):
            c = 0.0
            if t == 0:
                for i in range(n):
                    a[i] = pi[i] * B[0, i]
                    c += a[i]
            else:
                _scatter(indptr, indices, data, a, pred)
                for i in range(n):
                    a[i] = pred[i] * B[t, i]
                    c += a[i]
            if not c > 0.0:
                fail = t
                break
            for i in range(n):
                a[i] /= c
            ll += log(c)
    return ll, fail


def forward_backward(const i32[::1] indptr, const i32[::1] indices, const f64[::1] data,
                     const f64[::1] pi, const f64[:, ::1] B):
    """Scaled forward-backward statistics.

    Returns (log-likelihood, gamma at t=0, gamma summed over t < T-1,
    xi summed over t aligned with ``data``, failing step or -1).
    """
    cdef Py_ssize_t T = B.shape[0], n = B.shape[1], nnz = data.shape[0], t, i, k, j
    alpha_arr = np.empty((T, n), dtype=np.float64)
    cdef f64[:, ::1] alpha = alpha_arr
    cdef f64[::1] scale = np.empty(T, dtype=np.float64)
    cdef f64[::1] pred = np.empty(n, dtype=np.float64)
    cdef f64[::1] beta = np.ones(n, dtype=np.float64)
    cdef f64[::1] v = np.empty(n, dtype=np.float64)
    gamma0 = np.zeros(n, dtype=np.float64)
    gsum = np.zeros(n, dtype=np.float64)
    xsum = np.zeros(nnz, dtype=np.float64)
    cdef f64[::1] g0 = gamma0, gs = gsum, xs = xsum
    cdef double c, ll = 0.0, acc, ai
    cdef Py_ssize_t fail = -1
    with nogil:
        c = 0.0
        for i in range(n):
            alpha[0, i] = pi[i] * B[0, i]
            c += alpha[0, i]
        if not c > 0.0:
            fail = 0
        else:
            scale[0] = c
            ll += log(c)
            for i in range(n):
                alpha[0, i] /= c
            for t in range(1, T):
                _scatter(indptr, indices, data, alpha[t - 1], pred)
                c = 0.0
                for i in range(n):
                    alpha[t, i] = pred[i] * B[t, i]
                    c += alpha[t, i]
                if not c > 0.0:
                    fail = t
                    break
                scale[t] = c
                ll += log(c)
                for i in range(n):
                    alpha[t, i] /= c
        if fail < 0:
            # beta_hat(T-1) = 1; walk backwards accumulating xi and gamma
            for t in range(T - 2, -1, -1):
                for j in range(n):
                    v[j] = B[t + 1, j] * beta[j] / scale[t + 1]
                for i in range(n):
                    acc = 0.0
                    ai = alpha[t, i]
                    for k in range(indptr[i], indptr[i + 1]):
                        j = indices[k]
                        acc += data[k] * v[j]
                        xs[k] += ai * data[k] * v[j]
                    pred[i] = acc
                for i in range(n):
                    beta[i] = pred[i]
                    gs[i] += alpha[t, i] * beta[i]
            for i in range(n):
                g0[i] = alpha[0, i] * beta[i]
    return ll, gamma0, gsum, xsum, fail
