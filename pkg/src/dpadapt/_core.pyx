# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the dense-network and mixture hot loops.

Single-threaded, fixed left-to-right summation order: results are
bit-stable across runs and thread counts. The pure-Python module
_kernels_py holds the fallback implementations with the same contract.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

LOG_2PI = float(np.log(2.0 * np.pi))
cdef double C_LOG_2PI = 1.8378770664093453


def affine(x, w, b):
    """x @ w + b for a (B,m) batch, (m,n) weight, (n,) bias."""
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], m = xv.shape[1], n = wv.shape[1]
    out = np.empty((B, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, k
    cdef double acc
    with nogil:
        for i in range(B):
            for j in range(n):
                acc = bv[j]
                for k in range(m):
                    acc += xv[i, k] * wv[k, j]
                ov[i, j] = acc
    return out


def matmul_nt(d, w):
    """d @ w.T: propagate a (B,n) delta back through an (m,n) weight."""
    cdef double[:, ::1] dv = np.ascontiguousarray(d, dtype=np.float64)
    cdef double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t B = dv.shape[0], n = dv.shape[1], m = wv.shape[0]
    out = np.empty((B, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, k
    cdef double acc
    with nogil:
        for i in range(B):
            for j in range(m):
                acc = 0.0
                for k in range(n):
                    acc += dv[i, k] * wv[j, k]
                ov[i, j] = acc
    return out


def matmul_tn(a, d):
    """a.T @ d: sum of per-example outer products, (B,m) x (B,n) -> (m,n)."""
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] dv = np.ascontiguousarray(d, dtype=np.float64)
    cdef Py_ssize_t B = av.shape[0], m = av.shape[1], n = dv.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, k
    with nogil:
        for i in range(B):
            for j in range(m):
                for k in range(n):
                    ov[j, k] += av[i, j] * dv[i, k]
    return out


def per_example_outer(a, d):
    """Stacked outer products a_i d_i^T, (B,m) x (B,n) -> (B,m,n)."""
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] dv = np.ascontiguousarray(d, dtype=np.float64)
    cdef Py_ssize_t B = av.shape[0], m = av.shape[1], n = dv.shape[1]
    out = np.empty((B, m, n), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t i, j, k
    with nogil:
        for i in range(B):
            for j in range(m):
                for k in range(n):
                    ov[i, j, k] = av[i, j] * dv[i, k]
    return out


def row_sq_norms(x):
    """Squared L2 norm of each row of a 2-D array."""
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], p = xv.shape[1]
    out = np.empty(B, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, j
    cdef double acc
    with nogil:
        for i in range(B):
            acc = 0.0
            for j in range(p):
                acc += xv[i, j] * xv[i, j]
            ov[i] = acc
    return out


def gmm_log_components(x, means, variances, log_weights):
    """log pi_k + log N(x_i; mu_k, diag(var_k)) for every (i, k) pair."""
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] mv = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] vv = np.ascontiguousarray(variances, dtype=np.float64)
    cdef double[::1] lw = np.ascontiguousarray(log_weights, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], d = xv.shape[1], K = mv.shape[0]
    out = np.empty((B, K), dtype=np.float64)
    cdef double[:, ::1] ov = out
    log_norm = np.empty(K, dtype=np.float64)
    cdef double[::1] nv = log_norm
    cdef Py_ssize_t i, k, j
    cdef double acc, diff
    with nogil:
        for k in range(K):
            acc = 0.0
            for j in range(d):
                acc += log(vv[k, j])
            nv[k] = -0.5 * (acc + d * C_LOG_2PI)
        for i in range(B):
            for k in range(K):
                acc = 0.0
                for j in range(d):
                    diff = xv[i, j] - mv[k, j]
                    acc += diff / vv[k, j] * diff
                ov[i, k] = lw[k] + nv[k] - 0.5 * acc
    return out


def logsumexp_rows(m):
    """Row-wise log(sum(exp(m))) with max-subtraction."""
    cdef double[:, ::1] mv = np.ascontiguousarray(m, dtype=np.float64)
    cdef Py_ssize_t B = mv.shape[0], K = mv.shape[1]
    out = np.empty(B, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, k
    cdef double hi, acc
    with nogil:
        for i in range(B):
            hi = mv[i, 0]
            for k in range(1, K):
                if mv[i, k] > hi:
                    hi = mv[i, k]
            acc = 0.0
            for k in range(K):
                acc += exp(mv[i, k] - hi)
            ov[i] = hi + log(acc)
    return out
