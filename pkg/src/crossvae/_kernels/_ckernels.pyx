# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ragged kernels; drop-in replacements for ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs

cnp.import_array()


def latent_gather_forward(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                          const double[:, ::1] emb, const double[:, ::1] phi0):
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1
    cdef Py_ssize_t k = emb.shape[1]
    cdef Py_ssize_t m = phi0.shape[1]
    out_arr = np.zeros((n_rows, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, e, j, c, col, base
    cdef double w
    with nogil:
        for b in range(n_rows):
            for e in range(indptr[b], indptr[b + 1]):
                j = indices[e]
                base = j * k
                for c in range(k):
                    w = emb[j, c]
                    if w == 0.0:
                        continue
                    for col in range(m):
                        out[b, col] += w * phi0[base + c, col]
    return out_arr


def latent_gather_backward(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                           const double[:, ::1] emb, const double[:, ::1] grad_out):
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1
    cdef Py_ssize_t n = emb.shape[0]
    cdef Py_ssize_t k = emb.shape[1]
    cdef Py_ssize_t m = grad_out.shape[1]
    grad_arr = np.zeros((n * k, m), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    # per-item sum of upstream rows, then one outer product per item
    acc_arr = np.zeros((n, m), dtype=np.float64)
    seen_arr = np.zeros(n, dtype=np.int8)
    cdef double[:, ::1] acc = acc_arr
    cdef cnp.int8_t[::1] seen = seen_arr
    cdef Py_ssize_t b, e, j, c, col, base
    cdef double w
    with nogil:
        for b in range(n_rows):
            for e in range(indptr[b], indptr[b + 1]):
                j = indices[e]
                seen[j] = 1
                for col in range(m):
                    acc[j, col] += grad_out[b, col]
        for j in range(n):
            if not seen[j]:
                continue
            base = j * k
            for c in range(k):
                w = emb[j, c]
                for col in range(m):
                    grad[base + c, col] = w * acc[j, col]
    return grad_arr


def attention_forward(const double[:, ::1] p, const double[:, ::1] emb,
                      const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                      double eps, bint softmax):
    cdef Py_ssize_t n_rows = p.shape[0]
    cdef Py_ssize_t k = p.shape[1]
    cdef Py_ssize_t nnz = indices.shape[0]
    context_arr = np.zeros((n_rows, k), dtype=np.float64)
    weights_arr = np.zeros(nnz, dtype=np.float64)
    denom_arr = np.zeros(n_rows, dtype=np.float64)
    uniform_arr = np.zeros(n_rows, dtype=np.int8)
    cdef double[:, ::1] context = context_arr
    cdef double[::1] weights = weights_arr
    cdef double[::1] denom = denom_arr
    cdef cnp.int8_t[::1] uniform = uniform_arr
    cdef Py_ssize_t b, e, j, c, lo, hi
    cdef double s, total, peak, a
    with nogil:
        for b in range(n_rows):
            lo = indptr[b]
            hi = indptr[b + 1]
            if hi == lo:
                continue
            for e in range(lo, hi):
                j = indices[e]
                s = 0.0
                for c in range(k):
                    s = s + p[b, c] * emb[j, c]
                weights[e] = s
            if softmax:
                peak = weights[lo]
                for e in range(lo + 1, hi):
                    if weights[e] > peak:
                        peak = weights[e]
                total = 0.0
                for e in range(lo, hi):
                    weights[e] = exp(weights[e] - peak)
                    total = total + weights[e]
                denom[b] = total
                for e in range(lo, hi):
                    weights[e] = weights[e] / total
            else:
                total = 0.0
                for e in range(lo, hi):
                    total = total + weights[e]
                denom[b] = total
                if fabs(total) <= eps:
                    uniform[b] = 1
                    for e in range(lo, hi):
                        weights[e] = 1.0 / (hi - lo)
                else:
                    for e in range(lo, hi):
                        weights[e] = weights[e] / total
            for e in range(lo, hi):
                j = indices[e]
                a = weights[e]
                for c in range(k):
                    context[b, c] += a * emb[j, c]
    return context_arr, weights_arr, denom_arr, uniform_arr


def attention_backward(const double[:, ::1] grad_c, const double[:, ::1] emb,
                       const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                       const double[::1] weights, const double[::1] denom,
                       const cnp.int8_t[::1] uniform, bint softmax):
    cdef Py_ssize_t n_rows = grad_c.shape[0]
    cdef Py_ssize_t k = grad_c.shape[1]
    grad_arr = np.zeros((n_rows, k), dtype=np.float64)
    scratch_arr = np.zeros(indices.shape[0], dtype=np.float64)
    cdef double[:, ::1] grad_p = grad_arr
    cdef double[::1] dw = scratch_arr
    cdef Py_ssize_t b, e, j, c, lo, hi
    cdef double s, mean, ds
    with nogil:
        for b in range(n_rows):
            lo = indptr[b]
            hi = indptr[b + 1]
            if hi == lo or (not softmax and uniform[b]):
                continue
            mean = 0.0
            for e in range(lo, hi):
                j = indices[e]
                s = 0.0
                for c in range(k):
                    s = s + grad_c[b, c] * emb[j, c]
                dw[e] = s
                mean = mean + weights[e] * s
            for e in range(lo, hi):
                j = indices[e]
                if softmax:
                    ds = weights[e] * (dw[e] - mean)
                else:
                    ds = (dw[e] - mean) / denom[b]
                for c in range(k):
                    grad_p[b, c] += ds * emb[j, c]
    return grad_arr
