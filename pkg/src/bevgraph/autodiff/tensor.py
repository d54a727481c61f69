"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value on the tape is a 2-D float64 array: scalars are (1, 1),
column vectors (k, 1). Each operation records the backward rule as a
closure; `DiffTensor.backward` replays them in reverse topological order.
Gradients accumulate additively across backward calls until `zero_grad`,
so calling backward twice doubles every gradient.

Two invariants the rest of the package relies on:

* Arrays held by tensors are never mutated in place, neither values nor
  gradients. Backward rules may hand the same gradient array to several
  inputs, and the optimizer may see aliased gradients; rebinding instead
  of mutating keeps that sound.
* Operations that can produce NaN or Inf from finite inputs (exp, log,
  div, pow) validate their output and raise NonFiniteError immediately,
  so a blow-up is reported at the op that caused it rather than as a
  corrupted loss many steps later.
"""

import numpy as np

from . import kernels as K


class NonFiniteError(ArithmeticError):
    """A tape operation produced NaN or Inf."""


class DiffTensor:
    """A node of the computation graph: a value plus its backward rule."""

    __slots__ = ("values", "grad", "requires_grad", "_inputs", "_bwd")

    def __init__(self, values, requires_grad=False, inputs=(), bwd=None):
        self.values = values
        self.grad = None
        self.requires_grad = requires_grad
        self._inputs = inputs
        self._bwd = bwd

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        if self.values.shape != (1, 1):
            raise ValueError(f"item() requires shape (1, 1), got {self.values.shape}")
        return float(self.values[0, 0])

    def __repr__(self):
        return (f"DiffTensor(shape={self.values.shape}, "
                f"requires_grad={self.requires_grad})")

    def backward(self):
        """Propagate d(self)/d(input) into .grad of every reachable tensor.

        Only valid on scalar (1, 1) tensors. Gradients add into any
        already stored, matching repeated-backward accumulation.
        """
        if self.values.shape != (1, 1):
            raise ValueError(
                f"backward() requires a scalar (1, 1) tensor, got {self.values.shape}"
            )

        # Iterative post-order DFS; tensors reference their inputs, so the
        # graph is a DAG by construction, but guard against cycles anyway.
        topo = []
        done = set()
        on_path = set()
        stack = [(self, 0)]
        while stack:
            node, child_i = stack.pop()
            if child_i == 0:
                if id(node) in done:
                    continue
                on_path.add(id(node))
            if child_i < len(node._inputs):
                stack.append((node, child_i + 1))
                child = node._inputs[child_i]
                if id(child) not in done:
                    if id(child) in on_path:
                        raise RuntimeError("cycle in computation graph")
                    stack.append((child, 0))
            else:
                on_path.discard(id(node))
                done.add(id(node))
                topo.append(node)

        # Deltas from this backward call, kept separate from .grad so a
        # repeated call re-propagates a fresh unit seed.
        deltas = {id(self): np.ones((1, 1))}

        def push(tensor, g):
            key = id(tensor)
            cur = deltas.get(key)
            deltas[key] = g if cur is None else cur + g

        for node in reversed(topo):
            g = deltas.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._bwd is not None:
                node._bwd(g, push)


def _as_matrix(values):
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ValueError(f"tape values must be 2-D, got shape {arr.shape}")
    return arr


def constant(values):
    """Wrap an array as a non-differentiable tensor (scalars become (1,1))."""
    arr = _as_matrix(values)
    if not K.all_finite(arr):
        raise NonFiniteError("constant holds NaN or Inf")
    return DiffTensor(arr)


def parameter(values):
    """Wrap an array as a trainable leaf tensor."""
    arr = _as_matrix(values)
    if not K.all_finite(arr):
        raise NonFiniteError("parameter holds NaN or Inf")
    return DiffTensor(arr, requires_grad=True)


def _check_same_shape(a, b, op):
    if a.values.shape != b.values.shape:
        raise ValueError(
            f"{op}: shape mismatch {a.values.shape} vs {b.values.shape}"
        )


def _check_indices(idx, bound, op):
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"{op}: index array must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise IndexError(f"{op}: index out of range [0, {bound})")
    return idx


def matmul(a, b):
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(
            f"matmul: inner dims differ, {a.values.shape} @ {b.values.shape}"
        )
    out = K.matmul(a.values, b.values)
    if not (a.requires_grad or b.requires_grad):
        return DiffTensor(out)
    av, bv = a.values, b.values

    def bwd(g, push):
        if a.requires_grad:
            push(a, K.matmul_bwd_a(g, bv))
        if b.requires_grad:
            push(b, K.matmul_bwd_b(av, g))

    return DiffTensor(out, True, (a, b), bwd)


def add(a, b):
    _check_same_shape(a, b, "add")
    out = K.add(a.values, b.values)
    if not (a.requires_grad or b.requires_grad):
        return DiffTensor(out)

    def bwd(g, push):
        if a.requires_grad:
            push(a, g)
        if b.requires_grad:
            push(b, g)

    return DiffTensor(out, True, (a, b), bwd)


def sub(a, b):
    _check_same_shape(a, b, "sub")
    out = K.sub(a.values, b.values)
    if not (a.requires_grad or b.requires_grad):
        return DiffTensor(out)

    def bwd(g, push):
        if a.requires_grad:
            push(a, g)
        if b.requires_grad:
            push(b, K.scal(g, -1.0))

    return DiffTensor(out, True, (a, b), bwd)


def mul(a, b):
    _check_same_shape(a, b, "mul")
    out = K.mul(a.values, b.values)
    if not (a.requires_grad or b.requires_grad):
        return DiffTensor(out)
    av, bv = a.values, b.values

    def bwd(g, push):
        if a.requires_grad:
            push(a, K.mul(g, bv))
        if b.requires_grad:
            push(b, K.mul(g, av))

    return DiffTensor(out, True, (a, b), bwd)


def div(a, b):
    _check_same_shape(a, b, "div")
    out = K.div(a.values, b.values)
    if not K.all_finite(out):
        raise NonFiniteError("div produced NaN or Inf")
    if not (a.requires_grad or b.requires_grad):
        return DiffTensor(out)
    av, bv = a.values, b.values

    def bwd(g, push):
        ga, gb = K.div_bwd(av, bv, g)
        if a.requires_grad:
            push(a, ga)
        if b.requires_grad:
            push(b, gb)

    return DiffTensor(out, True, (a, b), bwd)


def scal(a, c):
    """Multiply by a Python float."""
    c = float(c)
    out = K.scal(a.values, c)
    if not a.requires_grad:
        return DiffTensor(out)

    def bwd(g, push):
        push(a, K.scal(g, c))

    return DiffTensor(out, True, (a,), bwd)


def neg(a):
    return scal(a, -1.0)


def add_const(a, c):
    c = float(c)
    out = K.add_const(a.values, c)
    if not a.requires_grad:
        return DiffTensor(out)

    def bwd(g, push):
        push(a, g)

    return DiffTensor(out, True, (a,), bwd)


def add_bias(a, bias):
    """Add a (1, n) row bias to every row of a (m, n) matrix."""
    if bias.values.shape != (1, a.values.shape[1]):
        raise ValueError(
            f"add_bias: bias {bias.values.shape} does not fit {a.values.shape}"
        )
    out = K.add_bias(a.values, bias.values)
    if not (a.requires_grad or bias.requires_grad):
        return DiffTensor(out)

    def bwd(g, push):
        if a.requires_grad:
            push(a, g)
        if bias.requires_grad:
            push(bias, K.sum_cols(g))

    return DiffTensor(out, True, (a, bias), bwd)


def add_rowcol(u, v):
    """Outer sum: out[i, j] = u[i, 0] + v[j, 0] for (m,1) u and (n,1) v."""
    if u.values.shape[1] != 1 or v.values.shape[1] != 1:
        raise ValueError("add_rowcol: both inputs must be column vectors")
    out = K.add_rowcol(u.values, v.values)
    if not (u.requires_grad or v.requires_grad):
        return DiffTensor(out)

    def bwd(g, push):
        if u.requires_grad:
            push(u, K.sum_rows(g))
        if v.requires_grad:
            push(v, K.sum_cols(g).reshape(-1, 1))

    return DiffTensor(out, True, (u, v), bwd)


def leaky_relu(a, slope=0.2):
    slope = float(slope)
    out = K.leaky_relu(a.values, slope)
    if not a.requires_grad:
        return DiffTensor(out)
    av = a.values

    def bwd(g, push):
        push(a, K.leaky_relu_bwd(av, g, slope))

    return DiffTensor(out, True, (a,), bwd)


def exp(a):
    out = K.exp_(a.values)
    if not K.all_finite(out):
        raise NonFiniteError("exp overflowed")
    if not a.requires_grad:
        return DiffTensor(out)

    def bwd(g, push):
        push(a, K.exp_bwd(out, g))

    return DiffTensor(out, True, (a,), bwd)


def log(a):
    out = K.log_(a.values)
    if not K.all_finite(out):
        raise NonFiniteError("log of a non-positive value")
    if not a.requires_grad:
        return DiffTensor(out)
    av = a.values

    def bwd(g, push):
        push(a, K.log_bwd(av, g))

    return DiffTensor(out, True, (a,), bwd)


def sin(a):
    out = K.sin_(a.values)
    if not a.requires_grad:
        return DiffTensor(out)
    av = a.values

    def bwd(g, push):
        push(a, K.sin_bwd(av, g))

    return DiffTensor(out, True, (a,), bwd)


def cos(a):
    out = K.cos_(a.values)
    if not a.requires_grad:
        return DiffTensor(out)
    av = a.values

    def bwd(g, push):
        push(a, K.cos_bwd(av, g))

    return DiffTensor(out, True, (a,), bwd)


def atan(a):
    out = K.atan_(a.values)
    if not a.requires_grad:
        return DiffTensor(out)
    av = a.values

    def bwd(g, push):
        push(a, K.atan_bwd(av, g))

    return DiffTensor(out, True, (a,), bwd)


def sigmoid(a):
    out = K.sigmoid_(a.values)
    if not a.requires_grad:
        return DiffTensor(out)

    def bwd(g, push):
        push(a, K.sigmoid_bwd(out, g))

    return DiffTensor(out, True, (a,), bwd)


def pow_const(a, p):
    """Elementwise a**p for float p; defined for non-negative inputs."""
    p = float(p)
    out = K.pow_const(a.values, p)
    if not K.all_finite(out):
        raise NonFiniteError("pow produced NaN or Inf")
    if not a.requires_grad:
        return DiffTensor(out)
    av = a.values

    def bwd(g, push):
        push(a, K.pow_const_bwd(av, p, g))

    return DiffTensor(out, True, (a,), bwd)


def clamp(a, lo=-np.inf, hi=np.inf):
    lo, hi = float(lo), float(hi)
    out = K.clamp(a.values, lo, hi)
    if not a.requires_grad:
        return DiffTensor(out)
    av = a.values

    def bwd(g, push):
        push(a, K.clamp_bwd(av, lo, hi, g))

    return DiffTensor(out, True, (a,), bwd)


def smooth_l1(a):
    """Elementwise Huber-style penalty: 0.5 x^2 below |x|=1, |x|-0.5 above."""
    out = K.smooth_l1(a.values)
    if not a.requires_grad:
        return DiffTensor(out)
    av = a.values

    def bwd(g, push):
        push(a, K.smooth_l1_bwd(av, g))

    return DiffTensor(out, True, (a,), bwd)


def sum_all(a):
    out = K.sum_all(a.values)
    if not a.requires_grad:
        return DiffTensor(out)
    m, n = a.values.shape

    def bwd(g, push):
        push(a, K.sum_all_bwd(g, m, n))

    return DiffTensor(out, True, (a,), bwd)


def mean_all(a):
    size = a.values.size
    if size == 0:
        raise ValueError("mean_all of an empty tensor")
    return scal(sum_all(a), 1.0 / size)


def sum_rows(a):
    out = K.sum_rows(a.values)
    if not a.requires_grad:
        return DiffTensor(out)
    n = a.values.shape[1]

    def bwd(g, push):
        push(a, K.sum_rows_bwd(g, n))

    return DiffTensor(out, True, (a,), bwd)


def sum_cols(a):
    out = K.sum_cols(a.values)
    if not a.requires_grad:
        return DiffTensor(out)
    m = a.values.shape[0]

    def bwd(g, push):
        push(a, K.sum_cols_bwd(g, m))

    return DiffTensor(out, True, (a,), bwd)


def masked_softmax(scores, mask):
    """Row-wise softmax restricted to entries where mask == 1.

    `mask` is a plain float64 array of zeros and ones; masked-out entries
    of the result are exactly zero and each unmasked row sums to one.
    """
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    if mask.shape != scores.values.shape:
        raise ValueError(
            f"masked_softmax: mask {mask.shape} vs scores {scores.values.shape}"
        )
    out = K.masked_softmax(scores.values, mask)
    if not scores.requires_grad:
        return DiffTensor(out)

    def bwd(g, push):
        push(scores, K.masked_softmax_bwd(out, g))

    return DiffTensor(out, True, (scores,), bwd)


def gather_rows(a, idx):
    """Select rows: out[i] = a[idx[i]]."""
    m = a.values.shape[0]
    idx = _check_indices(idx, m, "gather_rows")
    out = K.gather_rows(a.values, idx)
    if not a.requires_grad:
        return DiffTensor(out)

    def bwd(g, push):
        push(a, K.gather_rows_bwd(g, idx, m))

    return DiffTensor(out, True, (a,), bwd)


def scatter_rows(v, idx, num_rows):
    """Sum rows of v into a (num_rows, d) matrix at positions idx."""
    idx = _check_indices(idx, num_rows, "scatter_rows")
    if idx.shape[0] != v.values.shape[0]:
        raise ValueError("scatter_rows: index count differs from row count")
    out = K.scatter_rows(v.values, idx, num_rows)
    if not v.requires_grad:
        return DiffTensor(out)

    def bwd(g, push):
        push(v, K.gather_rows(g, idx))

    return DiffTensor(out, True, (v,), bwd)


def gather_pairs(s, rows, cols):
    """Select matrix entries: out[k, 0] = s[rows[k], cols[k]]."""
    m, n = s.values.shape
    rows = _check_indices(rows, m, "gather_pairs")
    cols = _check_indices(cols, n, "gather_pairs")
    if rows.shape[0] != cols.shape[0]:
        raise ValueError("gather_pairs: rows and cols differ in length")
    out = K.gather_pairs(s.values, rows, cols)
    if not s.requires_grad:
        return DiffTensor(out)

    def bwd(g, push):
        push(s, K.gather_pairs_bwd(g, rows, cols, m, n))

    return DiffTensor(out, True, (s,), bwd)


def scatter_pairs(v, rows, cols, shape, symmetric=False):
    """Sum a (k, 1) column into matrix entries (rows[k], cols[k]).

    With symmetric=True each value is also added at the transposed
    position, which assumes rows[k] != cols[k] throughout.
    """
    m, n = shape
    if symmetric and m != n:
        raise ValueError("scatter_pairs: symmetric mode requires a square shape")
    rows = _check_indices(rows, m, "scatter_pairs")
    cols = _check_indices(cols, n, "scatter_pairs")
    if rows.shape[0] != cols.shape[0]:
        raise ValueError("scatter_pairs: rows and cols differ in length")
    if v.values.shape != (rows.shape[0], 1):
        raise ValueError(
            f"scatter_pairs: values must be ({rows.shape[0]}, 1), got {v.values.shape}"
        )
    out = K.scatter_pairs(v.values, rows, cols, m, n, symmetric)
    if not v.requires_grad:
        return DiffTensor(out)

    def bwd(g, push):
        push(v, K.scatter_pairs_bwd(g, rows, cols, symmetric))

    return DiffTensor(out, True, (v,), bwd)


def scale_rows(a, s):
    """Multiply row i of a (m, n) matrix by s[i, 0]."""
    if s.values.shape != (a.values.shape[0], 1):
        raise ValueError(
            f"scale_rows: scale {s.values.shape} does not fit {a.values.shape}"
        )
    out = K.scale_rows(a.values, s.values)
    if not (a.requires_grad or s.requires_grad):
        return DiffTensor(out)
    av, sv = a.values, s.values

    def bwd(g, push):
        if a.requires_grad:
            push(a, K.scale_rows(g, sv))
        if s.requires_grad:
            push(s, K.scale_rows_bwd_s(av, g))

    return DiffTensor(out, True, (a, s), bwd)


def concat_cols(parts):
    """Concatenate tensors with equal row counts along columns."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_cols of an empty sequence")
    m = parts[0].values.shape[0]
    for p in parts:
        if p.values.shape[0] != m:
            raise ValueError("concat_cols: row counts differ")
    out = K.concat_cols([p.values for p in parts])
    if not any(p.requires_grad for p in parts):
        return DiffTensor(out)
    widths = [p.values.shape[1] for p in parts]

    def bwd(g, push):
        pieces = K.split_cols(g, widths)
        for p, piece in zip(parts, pieces):
            if p.requires_grad:
                push(p, piece)

    return DiffTensor(out, True, tuple(parts), bwd)


def split_cols(a, widths):
    """Split into column blocks of the given widths; returns a list."""
    if sum(widths) != a.values.shape[1]:
        raise ValueError(
            f"split_cols: widths {widths} do not sum to {a.values.shape[1]}"
        )
    pieces = K.split_cols(a.values, list(widths))
    if not a.requires_grad:
        return [DiffTensor(p) for p in pieces]

    outs = []
    offset = 0
    m = a.values.shape[0]
    for piece, w in zip(pieces, widths):
        lo = offset
        offset += w

        def bwd(g, push, lo=lo, w=w):
            full = np.zeros((m, a.values.shape[1]))
            full[:, lo:lo + w] = g
            push(a, full)

        outs.append(DiffTensor(piece, True, (a,), bwd))
    return outs


def reshape(a, shape):
    m, n = shape
    out = np.ascontiguousarray(a.values.reshape(m, n))
    if not a.requires_grad:
        return DiffTensor(out)
    old = a.values.shape

    def bwd(g, push):
        push(a, np.ascontiguousarray(g.reshape(old)))

    return DiffTensor(out, True, (a,), bwd)
