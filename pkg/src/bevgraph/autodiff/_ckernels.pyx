# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Cython implementations of the dense tape kernels.

Mirrors the `_pykernels` API exactly. Matrix products go through BLAS
dgemm (row-major C = A @ B computed as column-major C^T = B^T A^T); the
remaining kernels are tight typed loops, which mostly wins by cutting
numpy dispatch overhead at the small matrix sizes the tape works with.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as cexp, log as clog, sin as csin, cos as ccos
from libc.math cimport atan as catan, fabs, isfinite, INFINITY
from scipy.linalg.cython_blas cimport dgemm

BACKEND_NAME = "c"

ctypedef cnp.int64_t idx_t


cdef inline void _dgemm_nn(double[:, ::1] a, double[:, ::1] b,
                           double[:, ::1] c) noexcept nogil:
    # c (m,n) = a (m,k) @ b (k,n), all row-major.
    cdef int m = <int>a.shape[0], k = <int>a.shape[1], n = <int>b.shape[1]
    cdef double one = 1.0, zero = 0.0
    if m > 0 and n > 0 and k > 0:
        dgemm("N", "N", &n, &m, &k, &one, &b[0, 0], &n, &a[0, 0], &k,
              &zero, &c[0, 0], &n)


cdef inline void _dgemm_nt(double[:, ::1] a, double[:, ::1] b,
                           double[:, ::1] c) noexcept nogil:
    # c (m,n) = a (m,k) @ b(n,k)^T.
    cdef int m = <int>a.shape[0], k = <int>a.shape[1], n = <int>b.shape[0]
    cdef double one = 1.0, zero = 0.0
    if m > 0 and n > 0 and k > 0:
        dgemm("T", "N", &n, &m, &k, &one, &b[0, 0], &k, &a[0, 0], &k,
              &zero, &c[0, 0], &n)


cdef inline void _dgemm_tn(double[:, ::1] a, double[:, ::1] b,
                           double[:, ::1] c) noexcept nogil:
    # c (m,n) = a(k,m)^T @ b (k,n).
    cdef int m = <int>a.shape[1], k = <int>a.shape[0], n = <int>b.shape[1]
    cdef double one = 1.0, zero = 0.0
    if m > 0 and n > 0 and k > 0:
        dgemm("N", "T", &n, &m, &k, &one, &b[0, 0], &n, &a[0, 0], &m,
              &zero, &c[0, 0], &n)


def matmul(double[:, ::1] a, double[:, ::1] b):
    out = np.zeros((a.shape[0], b.shape[1]))
    cdef double[:, ::1] c = out
    if out.size:
        _dgemm_nn(a, b, c)
    return out


def matmul_bwd_a(double[:, ::1] g, double[:, ::1] b):
    out = np.zeros((g.shape[0], b.shape[0]))
    cdef double[:, ::1] c = out
    if out.size:
        _dgemm_nt(g, b, c)
    return out


def matmul_bwd_b(double[:, ::1] a, double[:, ::1] g):
    out = np.zeros((a.shape[1], g.shape[1]))
    cdef double[:, ::1] c = out
    if out.size:
        _dgemm_tn(a, g, c)
    return out


def add(double[:, ::1] a, double[:, ::1] b):
    out = np.empty((a.shape[0], a.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            o[i, j] = a[i, j] + b[i, j]
    return out


def sub(double[:, ::1] a, double[:, ::1] b):
    out = np.empty((a.shape[0], a.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            o[i, j] = a[i, j] - b[i, j]
    return out


def mul(double[:, ::1] a, double[:, ::1] b):
    out = np.empty((a.shape[0], a.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            o[i, j] = a[i, j] * b[i, j]
    return out


def div(double[:, ::1] a, double[:, ::1] b):
    out = np.empty((a.shape[0], a.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            o[i, j] = a[i, j] / b[i, j]
    return out


def div_bwd(double[:, ::1] a, double[:, ::1] b, double[:, ::1] g):
    ga = np.empty((a.shape[0], a.shape[1]))
    gb = np.empty((a.shape[0], a.shape[1]))
    cdef double[:, ::1] oa = ga, ob = gb
    cdef Py_ssize_t i, j
    cdef double t
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            t = g[i, j] / b[i, j]
            oa[i, j] = t
            ob[i, j] = -t * a[i, j] / b[i, j]
    return ga, gb


def scal(double[:, ::1] a, double c):
    out = np.empty((a.shape[0], a.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            o[i, j] = a[i, j] * c
    return out


def add_const(double[:, ::1] a, double c):
    out = np.empty((a.shape[0], a.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            o[i, j] = a[i, j] + c
    return out


def add_bias(double[:, ::1] a, double[:, ::1] bias):
    out = np.empty((a.shape[0], a.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            o[i, j] = a[i, j] + bias[0, j]
    return out


def add_rowcol(double[:, ::1] u, double[:, ::1] v):
    out = np.empty((u.shape[0], v.shape[0]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(u.shape[0]):
        for j in range(v.shape[0]):
            o[i, j] = u[i, 0] + v[j, 0]
    return out


def leaky_relu(double[:, ::1] x, double slope):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = x[i, j] if x[i, j] >= 0.0 else slope * x[i, j]
    return out


def leaky_relu_bwd(double[:, ::1] x, double[:, ::1] g, double slope):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = g[i, j] if x[i, j] >= 0.0 else slope * g[i, j]
    return out


def exp_(double[:, ::1] x):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = cexp(x[i, j])
    return out


def exp_bwd(double[:, ::1] out, double[:, ::1] g):
    res = np.empty((out.shape[0], out.shape[1]))
    cdef double[:, ::1] o = res
    cdef Py_ssize_t i, j
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            o[i, j] = g[i, j] * out[i, j]
    return res


def log_(double[:, ::1] x):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = clog(x[i, j])
    return out


def log_bwd(double[:, ::1] x, double[:, ::1] g):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = g[i, j] / x[i, j]
    return out


def sin_(double[:, ::1] x):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = csin(x[i, j])
    return out


def sin_bwd(double[:, ::1] x, double[:, ::1] g):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = g[i, j] * ccos(x[i, j])
    return out


def cos_(double[:, ::1] x):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = ccos(x[i, j])
    return out


def cos_bwd(double[:, ::1] x, double[:, ::1] g):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = -g[i, j] * csin(x[i, j])
    return out


def atan_(double[:, ::1] x):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = catan(x[i, j])
    return out


def atan_bwd(double[:, ::1] x, double[:, ::1] g):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = g[i, j] / (1.0 + x[i, j] * x[i, j])
    return out


def sigmoid_(double[:, ::1] x):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double e
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            if x[i, j] >= 0.0:
                o[i, j] = 1.0 / (1.0 + cexp(-x[i, j]))
            else:
                e = cexp(x[i, j])
                o[i, j] = e / (1.0 + e)
    return out


def sigmoid_bwd(double[:, ::1] out, double[:, ::1] g):
    res = np.empty((out.shape[0], out.shape[1]))
    cdef double[:, ::1] o = res
    cdef Py_ssize_t i, j
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            o[i, j] = g[i, j] * out[i, j] * (1.0 - out[i, j])
    return res


def pow_const(double[:, ::1] x, double p):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = x[i, j] ** p
    return out


def pow_const_bwd(double[:, ::1] x, double p, double[:, ::1] g):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            if x[i, j] == 0.0:
                o[i, j] = 0.0
            else:
                o[i, j] = g[i, j] * p * x[i, j] ** (p - 1.0)
    return out


def clamp(double[:, ::1] x, double lo, double hi):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double v
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            v = x[i, j]
            o[i, j] = lo if v < lo else (hi if v > hi else v)
    return out


def clamp_bwd(double[:, ::1] x, double lo, double hi, double[:, ::1] g):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = g[i, j] if lo <= x[i, j] <= hi else 0.0
    return out


def smooth_l1(double[:, ::1] x):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double a
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            a = fabs(x[i, j])
            o[i, j] = 0.5 * x[i, j] * x[i, j] if a < 1.0 else a - 0.5
    return out


def smooth_l1_bwd(double[:, ::1] x, double[:, ::1] g):
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double v
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            v = x[i, j]
            v = -1.0 if v < -1.0 else (1.0 if v > 1.0 else v)
            o[i, j] = g[i, j] * v
    return out


def sum_all(double[:, ::1] x):
    out = np.empty((1, 1))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double s = 0.0
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            s += x[i, j]
    o[0, 0] = s
    return out


def sum_all_bwd(double[:, ::1] g, Py_ssize_t m, Py_ssize_t n):
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double v = g[0, 0]
    for i in range(m):
        for j in range(n):
            o[i, j] = v
    return out


def sum_rows(double[:, ::1] x):
    out = np.empty((x.shape[0], 1))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(x.shape[0]):
        s = 0.0
        for j in range(x.shape[1]):
            s += x[i, j]
        o[i, 0] = s
    return out


def sum_rows_bwd(double[:, ::1] g, Py_ssize_t n):
    out = np.empty((g.shape[0], n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(g.shape[0]):
        for j in range(n):
            o[i, j] = g[i, 0]
    return out


def sum_cols(double[:, ::1] x):
    out = np.zeros((1, x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            o[0, j] += x[i, j]
    return out


def sum_cols_bwd(double[:, ::1] g, Py_ssize_t m):
    out = np.empty((m, g.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(m):
        for j in range(g.shape[1]):
            o[i, j] = g[0, j]
    return out


def masked_softmax(double[:, ::1] s, double[:, ::1] mask):
    out = np.empty((s.shape[0], s.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double mx, denom
    for i in range(s.shape[0]):
        mx = -INFINITY
        for j in range(s.shape[1]):
            if mask[i, j] > 0.0 and s[i, j] > mx:
                mx = s[i, j]
        if mx == -INFINITY:
            mx = 0.0
        denom = 0.0
        for j in range(s.shape[1]):
            if mask[i, j] > 0.0:
                o[i, j] = cexp(s[i, j] - mx)
                denom += o[i, j]
            else:
                o[i, j] = 0.0
        if denom == 0.0:
            denom = 1.0
        for j in range(s.shape[1]):
            o[i, j] /= denom
    return out


def masked_softmax_bwd(double[:, ::1] p, double[:, ::1] g):
    out = np.empty((p.shape[0], p.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(p.shape[0]):
        dot = 0.0
        for j in range(p.shape[1]):
            dot += p[i, j] * g[i, j]
        for j in range(p.shape[1]):
            o[i, j] = p[i, j] * (g[i, j] - dot)
    return out


def gather_rows(double[:, ::1] a, idx_t[::1] idx):
    out = np.empty((idx.shape[0], a.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(idx.shape[0]):
        for j in range(a.shape[1]):
            o[i, j] = a[idx[i], j]
    return out


def gather_rows_bwd(double[:, ::1] g, idx_t[::1] idx, Py_ssize_t m):
    out = np.zeros((m, g.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(idx.shape[0]):
        for j in range(g.shape[1]):
            o[idx[i], j] += g[i, j]
    return out


def scatter_rows(double[:, ::1] v, idx_t[::1] idx, Py_ssize_t m):
    out = np.zeros((m, v.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(idx.shape[0]):
        for j in range(v.shape[1]):
            o[idx[i], j] += v[i, j]
    return out


def gather_pairs(double[:, ::1] s, idx_t[::1] rows, idx_t[::1] cols):
    out = np.empty((rows.shape[0], 1))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i
    for i in range(rows.shape[0]):
        o[i, 0] = s[rows[i], cols[i]]
    return out


def gather_pairs_bwd(double[:, ::1] g, idx_t[::1] rows, idx_t[::1] cols,
                     Py_ssize_t m, Py_ssize_t n):
    out = np.zeros((m, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i
    for i in range(rows.shape[0]):
        o[rows[i], cols[i]] += g[i, 0]
    return out


def scatter_pairs(double[:, ::1] v, idx_t[::1] rows, idx_t[::1] cols,
                  Py_ssize_t m, Py_ssize_t n, bint symmetric):
    out = np.zeros((m, n))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i
    for i in range(rows.shape[0]):
        o[rows[i], cols[i]] += v[i, 0]
        if symmetric:
            o[cols[i], rows[i]] += v[i, 0]
    return out


def scatter_pairs_bwd(double[:, ::1] g, idx_t[::1] rows, idx_t[::1] cols,
                      bint symmetric):
    out = np.empty((rows.shape[0], 1))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i
    for i in range(rows.shape[0]):
        o[i, 0] = g[rows[i], cols[i]]
        if symmetric:
            o[i, 0] += g[cols[i], rows[i]]
    return out


def scale_rows(double[:, ::1] a, double[:, ::1] s):
    out = np.empty((a.shape[0], a.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            o[i, j] = a[i, j] * s[i, 0]
    return out


def scale_rows_bwd_s(double[:, ::1] a, double[:, ::1] g):
    out = np.empty((a.shape[0], 1))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(a.shape[0]):
        s = 0.0
        for j in range(a.shape[1]):
            s += a[i, j] * g[i, j]
        o[i, 0] = s
    return out


def concat_cols(parts):
    cdef Py_ssize_t m = parts[0].shape[0]
    cdef Py_ssize_t total = 0
    for p in parts:
        total += p.shape[1]
    out = np.empty((m, total))
    cdef double[:, ::1] o = out
    cdef double[:, ::1] src
    cdef Py_ssize_t i, j, off = 0
    for p in parts:
        src = p
        for i in range(m):
            for j in range(src.shape[1]):
                o[i, off + j] = src[i, j]
        off += src.shape[1]
    return out


def split_cols(double[:, ::1] g, widths):
    cdef Py_ssize_t m = g.shape[0]
    cdef list out = []
    cdef double[:, ::1] dst
    cdef Py_ssize_t i, j, w, off = 0
    for width in widths:
        w = width
        part = np.empty((m, w))
        dst = part
        for i in range(m):
            for j in range(w):
                dst[i, j] = g[i, off + j]
        off += w
        out.append(part)
    return out


def all_finite(double[:, ::1] x):
    cdef Py_ssize_t i, j
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            if not isfinite(x[i, j]):
                return False
    return True
