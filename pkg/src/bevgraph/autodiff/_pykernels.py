"""Numpy implementations of the dense kernels used by the tape.

This is the fallback backend; `_ckernels.pyx` implements the same API in
Cython. Both operate on C-contiguous float64 matrices (everything in the
tape is 2-D) and int64 index vectors. Forward kernels allocate and return
their output; backward kernels return gradient arrays that the caller owns.
"""

import numpy as np

BACKEND_NAME = "python"


def matmul(a, b):
    return a @ b


def matmul_bwd_a(g, b):
    return g @ b.T


def matmul_bwd_b(a, g):
    return a.T @ g


def add(a, b):
    return a + b


def sub(a, b):
    return a - b


def mul(a, b):
    return a * b


def div(a, b):
    return a / b


def div_bwd(a, b, g):
    ga = g / b
    return ga, -ga * a / b


def scal(a, c):
    return a * c


def add_const(a, c):
    return a + c


def add_bias(a, bias):
    return a + bias


def add_rowcol(u, v):
    # u: (m,1), v: (n,1) -> (m,n) with out[i,j] = u[i] + v[j]
    return u + v.T


def leaky_relu(x, slope):
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_bwd(x, g, slope):
    return np.where(x >= 0.0, g, slope * g)


def exp_(x):
    return np.exp(x)


def exp_bwd(out, g):
    return g * out


def log_(x):
    return np.log(x)


def log_bwd(x, g):
    return g / x


def sin_(x):
    return np.sin(x)


def sin_bwd(x, g):
    return g * np.cos(x)


def cos_(x):
    return np.cos(x)


def cos_bwd(x, g):
    return -g * np.sin(x)


def atan_(x):
    return np.arctan(x)


def atan_bwd(x, g):
    return g / (1.0 + x * x)


def sigmoid_(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(out, g):
    return g * out * (1.0 - out)


def pow_const(x, p):
    # Defined for x >= 0; 0**p = 0 for p > 0.
    return np.power(x, p)


def pow_const_bwd(x, p, g):
    safe = np.where(x == 0.0, 1.0, x)
    d = p * np.power(safe, p - 1.0)
    return g * np.where(x == 0.0, 0.0, d)


def clamp(x, lo, hi):
    return np.clip(x, lo, hi)


def clamp_bwd(x, lo, hi, g):
    return np.where((x >= lo) & (x <= hi), g, 0.0)


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_bwd(x, g):
    return g * np.clip(x, -1.0, 1.0)


def sum_all(x):
    return np.array([[x.sum()]])


def sum_all_bwd(g, m, n):
    return np.full((m, n), g[0, 0])


def sum_rows(x):
    return x.sum(axis=1, keepdims=True)


def sum_rows_bwd(g, n):
    return np.broadcast_to(g, (g.shape[0], n)).copy()


def sum_cols(x):
    return x.sum(axis=0, keepdims=True)


def sum_cols_bwd(g, m):
    return np.broadcast_to(g, (m, g.shape[1])).copy()


def masked_softmax(s, mask):
    # Row-wise softmax over entries with mask == 1; masked-out entries are 0.
    neg = np.where(mask > 0.0, s, -np.inf)
    mx = neg.max(axis=1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)  # fully masked rows
    e = np.where(mask > 0.0, np.exp(s - mx), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    denom[denom == 0.0] = 1.0
    return e / denom


def masked_softmax_bwd(p, g):
    dot = (p * g).sum(axis=1, keepdims=True)
    return p * (g - dot)


def gather_rows(a, idx):
    return a[idx]


def gather_rows_bwd(g, idx, m):
    out = np.zeros((m, g.shape[1]))
    np.add.at(out, idx, g)
    return out


def scatter_rows(v, idx, m):
    out = np.zeros((m, v.shape[1]))
    np.add.at(out, idx, v)
    return out


def gather_pairs(s, rows, cols):
    return s[rows, cols].reshape(-1, 1)


def gather_pairs_bwd(g, rows, cols, m, n):
    out = np.zeros((m, n))
    np.add.at(out, (rows, cols), g[:, 0])
    return out


def scatter_pairs(v, rows, cols, m, n, symmetric):
    out = np.zeros((m, n))
    np.add.at(out, (rows, cols), v[:, 0])
    if symmetric:
        np.add.at(out, (cols, rows), v[:, 0])
    return out


def scatter_pairs_bwd(g, rows, cols, symmetric):
    out = g[rows, cols]
    if symmetric:
        out = out + g[cols, rows]
    return out.reshape(-1, 1)


def scale_rows(a, s):
    return a * s


def scale_rows_bwd_s(a, g):
    return (a * g).sum(axis=1, keepdims=True)


def concat_cols(parts):
    return np.concatenate(parts, axis=1)


def split_cols(g, widths):
    out = []
    j = 0
    for w in widths:
        out.append(np.ascontiguousarray(g[:, j:j + w]))
        j += w
    return out


def all_finite(x):
    return bool(np.isfinite(x).all())
