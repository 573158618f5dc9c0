# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled float64 kernels for dense layers and row-wise softmax/entropy.

Matrix products go through the BLAS bound by scipy; bias, rectifier and
reductions are fused into single passes. Inputs must be C-contiguous
float64; the dispatcher in ``kernels.py`` guarantees that.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _gemm_rowmajor(char transa, char transb, int m, int n, int k,
                                double* a, int lda, double* b, int ldb,
                                double* c, int ldc) noexcept nogil:
    # Row-major C(m x n) = op(A) @ op(B), computed as column-major C^T = op(B)^T op(A)^T.
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm(&transb, &transa, &n, &m, &k, &one, b, &ldb, a, &lda, &zero, c, &ldc)


def dense_forward(double[:, ::1] x, double[:, ::1] w, double[::1] b, bint relu):
    cdef int n = x.shape[0]
    cdef int k = x.shape[1]
    cdef int m = w.shape[1]
    if w.shape[0] != k or b.shape[0] != m:
        raise ValueError("dense_forward: shape mismatch")
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double v
    with nogil:
        if n > 0 and m > 0:
            if k > 0:
                _gemm_rowmajor(b'N', b'N', n, m, k, &x[0, 0], k, &w[0, 0], m, &out[0, 0], m)
            else:
                for i in range(n):
                    for j in range(m):
                        out[i, j] = 0.0
            for i in range(n):
                for j in range(m):
                    v = out[i, j] + b[j]
                    if relu and v < 0.0:
                        v = 0.0
                    out[i, j] = v
    return out_arr


def dense_backward(double[:, ::1] x, double[:, ::1] w, double[:, ::1] out,
                   double[:, ::1] grad_out, bint relu, bint need_input_grad=True):
    cdef int n = x.shape[0]
    cdef int k = x.shape[1]
    cdef int m = w.shape[1]
    g_arr = np.empty((n, m), dtype=np.float64)
    gw_arr = np.zeros((k, m), dtype=np.float64)
    gb_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] g = g_arr
    cdef double[:, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, ::1] gx
    cdef Py_ssize_t i, j
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(m):
                v = grad_out[i, j]
                if relu and not (out[i, j] > 0.0):
                    v = 0.0
                g[i, j] = v
                gb[j] += v
        if n > 0 and m > 0 and k > 0:
            # grad_w (k x m) = x^T (k x n) @ g (n x m)
            _gemm_rowmajor(b'T', b'N', k, m, n, &x[0, 0], k, &g[0, 0], m, &gw[0, 0], m)
    if not need_input_grad:
        return gw_arr, gb_arr, None
    gx_arr = np.zeros((n, k), dtype=np.float64)
    gx = gx_arr
    with nogil:
        if n > 0 and m > 0 and k > 0:
            # grad_x (n x k) = g (n x m) @ w^T (m x k)
            _gemm_rowmajor(b'N', b'T', n, k, m, &g[0, 0], m, &w[0, 0], m, &gx[0, 0], k)
    return gw_arr, gb_arr, gx_arr


def logsumexp_rows(double[:, ::1] a):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double mx, s
    with nogil:
        for i in range(n):
            mx = a[i, 0]
            for j in range(1, k):
                if a[i, j] > mx:
                    mx = a[i, j]
            s = 0.0
            for j in range(k):
                s += exp(a[i, j] - mx)
            out[i] = mx + log(s)
    return out_arr


def log_softmax(double[:, ::1] logits):
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t k = logits.shape[1]
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] lse = logsumexp_rows(logits)
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(k):
                out[i, j] = logits[i, j] - lse[i]
    return out_arr


def softmax(double[:, ::1] logits):
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t k = logits.shape[1]
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double mx, s
    with nogil:
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, k):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(k):
                out[i, j] = exp(logits[i, j] - mx)
                s += out[i, j]
            for j in range(k):
                out[i, j] /= s
    return out_arr


def row_entropy(double[:, ::1] probs):
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t k = probs.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double h, p
    with nogil:
        for i in range(n):
            h = 0.0
            for j in range(k):
                p = probs[i, j]
                if p > 0.0:
                    h -= p * log(p)
            out[i] = h
    return out_arr
