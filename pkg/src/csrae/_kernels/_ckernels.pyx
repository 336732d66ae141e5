# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: pairwise Gaussian overlaps, brute-force kNN, Jacobi eigh."""

import numpy as np

from libc.math cimport log, sqrt, fabs, copysign, M_PI
from libc.stdlib cimport malloc, free

cdef double LOG_2PI = log(2.0 * M_PI)


def pairwise_log_overlap(const double[:, ::1] mu_a, const double[:, ::1] var_a,
                         const double[:, ::1] mu_b, const double[:, ::1] var_b):
    cdef Py_ssize_t n = mu_a.shape[0]
    cdef Py_ssize_t m = mu_b.shape[0]
    cdef Py_ssize_t dim = mu_a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, s, d
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(dim):
                s = var_a[i, k] + var_b[j, k]
                d = mu_a[i, k] - mu_b[j, k]
                acc += LOG_2PI + log(s) + d * d / s
            o[i, j] = -0.5 * acc
    return out


def pairwise_log_overlap_grad(const double[:, ::1] mu_a, const double[:, ::1] var_a,
                              const double[:, ::1] mu_b, const double[:, ::1] var_b,
                              const double[:, ::1] grad_out):
    cdef Py_ssize_t n = mu_a.shape[0]
    cdef Py_ssize_t m = mu_b.shape[0]
    cdef Py_ssize_t dim = mu_a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double g, s, d, gm, gv
    g_mu_a = np.zeros((n, dim), dtype=np.float64)
    g_var_a = np.zeros((n, dim), dtype=np.float64)
    g_mu_b = np.zeros((m, dim), dtype=np.float64)
    g_var_b = np.zeros((m, dim), dtype=np.float64)
    cdef double[:, ::1] gma = g_mu_a
    cdef double[:, ::1] gva = g_var_a
    cdef double[:, ::1] gmb = g_mu_b
    cdef double[:, ::1] gvb = g_var_b
    for i in range(n):
        for j in range(m):
            g = grad_out[i, j]
            if g == 0.0:
                continue
            for k in range(dim):
                s = var_a[i, k] + var_b[j, k]
                d = mu_a[i, k] - mu_b[j, k]
                gm = -g * d / s
                gv = 0.5 * g * (d * d / s - 1.0) / s
                gma[i, k] += gm
                gmb[j, k] -= gm
                gva[i, k] += gv
                gvb[j, k] += gv
    return g_mu_a, g_var_a, g_mu_b, g_var_b


cdef inline bint _before(double da, Py_ssize_t ia, double db, Py_ssize_t ib) nogil:
    return da < db or (da == db and ia < ib)


def knn_predict(const double[:, ::1] train, const long[::1] labels,
                const double[:, ::1] query, Py_ssize_t k):
    cdef Py_ssize_t n = train.shape[0]
    cdef Py_ssize_t nq = query.shape[0]
    cdef Py_ssize_t dim = train.shape[1]
    cdef Py_ssize_t q, t, d, pos, a, b
    cdef double acc, diff
    cdef double *best_d = <double *> malloc(k * sizeof(double))
    cdef Py_ssize_t *best_i = <Py_ssize_t *> malloc(k * sizeof(Py_ssize_t))
    cdef Py_ssize_t count, filled, cnt_a
    cdef double sum_a, mean_a, best_mean
    cdef long lab, best_lab
    cdef Py_ssize_t best_cnt
    out = np.empty(nq, dtype=np.int64)
    cdef long[::1] o = out
    try:
        for q in range(nq):
            filled = 0
            for t in range(n):
                acc = 0.0
                for d in range(dim):
                    diff = query[q, d] - train[t, d]
                    acc += diff * diff
                if filled == k and not _before(acc, t, best_d[k - 1], best_i[k - 1]):
                    continue
                # insertion into the sorted (distance, index) buffer
                pos = filled if filled < k else k - 1
                while pos > 0 and _before(acc, t, best_d[pos - 1], best_i[pos - 1]):
                    best_d[pos] = best_d[pos - 1]
                    best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = acc
                best_i[pos] = t
                if filled < k:
                    filled += 1
            best_cnt = -1
            best_mean = 0.0
            best_lab = 0
            for a in range(filled):
                lab = labels[best_i[a]]
                # count each label once, at its first occurrence in the buffer
                count = 0
                for b in range(a):
                    if labels[best_i[b]] == lab:
                        count = 1
                        break
                if count:
                    continue
                cnt_a = 0
                sum_a = 0.0
                for b in range(filled):
                    if labels[best_i[b]] == lab:
                        cnt_a += 1
                        sum_a += sqrt(best_d[b])
                mean_a = sum_a / cnt_a
                if (cnt_a > best_cnt
                        or (cnt_a == best_cnt and mean_a < best_mean)
                        or (cnt_a == best_cnt and mean_a == best_mean and lab < best_lab)):
                    best_cnt = cnt_a
                    best_mean = mean_a
                    best_lab = lab
            o[q] = best_lab
    finally:
        free(best_d)
        free(best_i)
    return out


def jacobi_eigh(a_in, double tol=1e-14, int max_sweeps=100):
    a_np = np.array(a_in, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] a = a_np
    cdef Py_ssize_t n = a.shape[0]
    v_np = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] v = v_np
    cdef Py_ssize_t p, q, r, sweep
    cdef double off, prev_off, total, apq, theta, t, c, s, x, y, scale
    total = 0.0
    for p in range(n):
        for q in range(n):
            total += a[p, q] * a[p, q]
    scale = total if total > 1e-300 else 1e-300
    prev_off = 1e308
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(n):
                if p != q:
                    off += a[p, q] * a[p, q]
        if off <= tol * tol * scale or off >= prev_off:
            break
        prev_off = off
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = copysign(1.0, theta) / (fabs(theta) + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for r in range(n):
                    x = a[r, p]
                    y = a[r, q]
                    a[r, p] = c * x - s * y
                    a[r, q] = s * x + c * y
                for r in range(n):
                    x = a[p, r]
                    y = a[q, r]
                    a[p, r] = c * x - s * y
                    a[q, r] = s * x + c * y
                a[p, q] = 0.0
                a[q, p] = 0.0
                for r in range(n):
                    x = v[r, p]
                    y = v[r, q]
                    v[r, p] = c * x - s * y
                    v[r, q] = s * x + c * y
    w = np.diagonal(a_np).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v_np[:, order]
