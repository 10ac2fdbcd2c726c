# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SSM kernels. Mirrors ``_kernels_py`` exactly in signature."""

import numpy as np


def ssm_kernel(const double[:, ::1] abar, const double[:, ::1] bc, Py_ssize_t n):
    cdef Py_ssize_t nd = abar.shape[0], nh = abar.shape[1]
    cdef Py_ssize_t d, h, k
    cdef double p, w
    out = np.zeros((nd, n), dtype=np.float64)
    cdef double[:, ::1] K = out
    with nogil:
        for d in range(nd):
            for h in range(nh):
                p = 1.0
                w = bc[d, h]
                for k in range(n):
                    K[d, k] += w * p
                    p = p * abar[d, h]
    return out


def ssm_kernel_backward(const double[:, ::1] abar, const double[:, ::1] bc,
                        Py_ssize_t n, const double[:, ::1] grad):
    cdef Py_ssize_t nd = abar.shape[0], nh = abar.shape[1]
    cdef Py_ssize_t d, h, k
    cdef double p, prev, acc_bc, acc_a, a
    ga = np.empty((nd, nh), dtype=np.float64)
    gb = np.empty((nd, nh), dtype=np.float64)
    cdef double[:, ::1] g_abar = ga
    cdef double[:, ::1] g_bc = gb
    with nogil:
        for d in range(nd):
            for h in range(nh):
                a = abar[d, h]
                p = 1.0
                prev = 0.0
                acc_bc = 0.0
                acc_a = 0.0
                for k in range(n):
                    acc_bc += grad[d, k] * p
                    if k > 0:
                        acc_a += grad[d, k] * k * prev
                    prev = p
                    p = p * a
                g_bc[d, h] = acc_bc
                g_abar[d, h] = bc[d, h] * acc_a
    return ga, gb


def causal_conv(const double[:, ::1] kernel, const double[:, :, ::1] x):
    cdef Py_ssize_t nb = x.shape[0], nd = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t b, d, t, j
    cdef double acc
    out = np.empty((nb, nd, n), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    with nogil:
        for b in range(nb):
            for d in range(nd):
                for t in range(n):
                    acc = 0.0
                    for j in range(t + 1):
                        acc += kernel[d, j] * x[b, d, t - j]
                    y[b, d, t] = acc
    return out


def causal_conv_backward(const double[:, ::1] kernel, const double[:, :, ::1] x,
                         const double[:, :, ::1] grad):
    cdef Py_ssize_t nb = x.shape[0], nd = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t b, d, t, j
    cdef double acc_x, acc_k
    gx_arr = np.empty((nb, nd, n), dtype=np.float64)
    gk_arr = np.zeros((nd, n), dtype=np.float64)
    cdef double[:, :, ::1] g_x = gx_arr
    cdef double[:, ::1] g_k = gk_arr
    with nogil:
        for b in range(nb):
            for d in range(nd):
                for t in range(n):
                    # g_x[t] = sum_j K[j] g[t + j];  g_k[t] += sum_m x[m] g[m + t]
                    acc_x = 0.0
                    acc_k = 0.0
                    for j in range(n - t):
                        acc_x += kernel[d, j] * grad[b, d, t + j]
                        acc_k += x[b, d, j] * grad[b, d, t + j]
                    g_x[b, d, t] = acc_x
                    g_k[d, t] += acc_k
    return gk_arr, gx_arr


def diag_scan(const double[:, :, :, ::1] a, const double[:, :, :, ::1] u,
              const double[:, :, ::1] h0):
    cdef Py_ssize_t nb = a.shape[0], n = a.shape[1], nd = a.shape[2], nh = a.shape[3]
    cdef Py_ssize_t b, t, d, h
    out = np.empty((nb, n, nd, nh), dtype=np.float64)
    cdef double[:, :, :, ::1] hs = out
    # time outermost so the inner loops walk contiguous memory
    with nogil:
        for b in range(nb):
            for d in range(nd):
                for h in range(nh):
                    hs[b, 0, d, h] = a[b, 0, d, h] * h0[b, d, h] + u[b, 0, d, h]
            for t in range(1, n):
                for d in range(nd):
                    for h in range(nh):
                        hs[b, t, d, h] = a[b, t, d, h] * hs[b, t - 1, d, h] + u[b, t, d, h]
    return out


def diag_scan_backward(const double[:, :, :, ::1] a, const double[:, :, :, ::1] hs,
                       const double[:, :, ::1] h0, const double[:, :, :, ::1] grad):
    cdef Py_ssize_t nb = a.shape[0], n = a.shape[1], nd = a.shape[2], nh = a.shape[3]
    cdef Py_ssize_t b, t, d, h
    cdef double c
    ga_arr = np.empty((nb, n, nd, nh), dtype=np.float64)
    gu_arr = np.empty((nb, n, nd, nh), dtype=np.float64)
    gh_arr = np.zeros((nb, nd, nh), dtype=np.float64)
    cdef double[:, :, :, ::1] g_a = ga_arr
    cdef double[:, :, :, ::1] g_u = gu_arr
    cdef double[:, :, ::1] carry = gh_arr
    with nogil:
        for b in range(nb):
            for t in range(n - 1, -1, -1):
                for d in range(nd):
                    for h in range(nh):
                        c = carry[b, d, h] + grad[b, t, d, h]
                        g_u[b, t, d, h] = c
                        if t > 0:
                            g_a[b, t, d, h] = c * hs[b, t - 1, d, h]
                        else:
                            g_a[b, t, d, h] = c * h0[b, d, h]
                        carry[b, d, h] = c * a[b, t, d, h]
    return ga_arr, gu_arr, gh_arr
