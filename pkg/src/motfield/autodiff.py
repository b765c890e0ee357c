"""Reverse-mode differentiation over numpy arrays.

The library differentiates scalar losses with respect to flat parameter
blocks through an explicit op vocabulary: arithmetic, exp/log/sqrt,
sigmoid, sin/cos, abs, min/max/clamp, reductions, reshaping/indexing,
spatial forward differences, 3x3 box means, bilinear gathers and softmax.
Every op dispatches: if no argument is a :class:`Var` it computes plain
numpy, otherwise it records the operation on the implicit tape formed by
the ``Var`` graph.

Conventions at non-differentiable points: ``absolute`` uses derivative +1
at 0, ``minimum``/``maximum`` route the gradient to their first argument
on ties, ``clamp`` passes the gradient on the closed interval.
All evaluation is sequential and deterministic: identical inputs produce
bit-identical gradients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

_ids = itertools.count()


class NonFiniteLossError(ArithmeticError):
    """Raised when a loss evaluates to NaN/Inf; names the first bad op."""

    def __init__(self, op):
        super().__init__(f"non-finite value first produced by op '{op}'")
        self.op = op


class Var:
    """A node of the gradient tape: a float64 array plus backward closure."""

    __slots__ = ("value", "grad", "op", "_id", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op = op
        self._id = next(_ids)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    # arithmetic sugar -- all delegate to the module-level dispatching ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable node's .grad."""
        order = _toposort(self)
        self.grad = np.ones_like(self.value)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def is_var(x):
    return isinstance(x, Var)


def value_of(x):
    """Underlying float64 array of a Var, Grid or array-like."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _const(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum(var, g):
    if var.grad is None:
        var.grad = np.zeros_like(var.value)
    var.grad += _unbroadcast(np.asarray(g, dtype=np.float64), var.value.shape)


# ---------------------------------------------------------------------------
# binary / unary elementwise ops


def _binary(a, b, fwd, bwd_a, bwd_b, op):
    if not (is_var(a) or is_var(b)):
        return fwd(_const(a), _const(b))
    av, bv = value_of(a), value_of(b)
    out = Var(fwd(av, bv), parents=tuple(x for x in (a, b) if is_var(x)), op=op)

    def backward(g):
        if is_var(a):
            _accum(a, bwd_a(g, av, bv, out.value))
        if is_var(b):
            _accum(b, bwd_b(g, av, bv, out.value))

    out._backward = backward
    return out


def _unary(x, fwd, bwd, op):
    if not is_var(x):
        return fwd(_const(x))
    xv = x.value
    out = Var(fwd(xv), parents=(x,), op=op)
    out._backward = lambda g: _accum(x, bwd(g, xv, out.value))
    return out


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g, "add")


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g, "sub")


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, "mul")


def div(a, b):
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y), "div")


def neg(x):
    return _unary(x, lambda v: -v, lambda g, v, o: -g, "neg")


def power(x, p):
    p = float(p)
    return _unary(x, lambda v: v ** p,
                  lambda g, v, o: g * p * v ** (p - 1.0), "power")


def exp(x):
    return _unary(x, np.exp, lambda g, v, o: g * o, "exp")


def log(x):
    return _unary(x, np.log, lambda g, v, o: g / v, "log")


def sqrt(x):
    return _unary(x, np.sqrt, lambda g, v, o: g / (2.0 * o), "sqrt")


def sin(x):
    return _unary(x, np.sin, lambda g, v, o: g * np.cos(v), "sin")


def cos(x):
    return _unary(x, np.cos, lambda g, v, o: -g * np.sin(v), "cos")


def sigmoid(x):
    def fwd(v):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    return _unary(x, fwd, lambda g, v, o: g * o * (1.0 - o), "sigmoid")


def absolute(x):
    # derivative +1 at exactly 0
    return _unary(x, np.abs,
                  lambda g, v, o: g * np.where(v >= 0, 1.0, -1.0), "abs")


def minimum(a, b):
    # gradient goes to the first argument on ties
    return _binary(a, b, np.minimum,
                   lambda g, x, y, o: g * (x <= y),
                   lambda g, x, y, o: g * (x > y), "minimum")


def maximum(a, b):
    return _binary(a, b, np.maximum,
                   lambda g, x, y, o: g * (x >= y),
                   lambda g, x, y, o: g * (x < y), "maximum")


def clamp(x, lo, hi):
    lo, hi = float(lo), float(hi)
    return _unary(x, lambda v: np.clip(v, lo, hi),
                  lambda g, v, o: g * ((v >= lo) & (v <= hi)), "clamp")


# ---------------------------------------------------------------------------
# reductions, reshaping, indexing


def vsum(x, axis=None, keepdims=False):
    if not is_var(x):
        return _const(x).sum(axis=axis, keepdims=keepdims)
    xv = x.value
    out = Var(xv.sum(axis=axis, keepdims=keepdims), parents=(x,), op="sum")

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, xv.shape))

    out._backward = backward
    return out


def vmean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else np.prod(
        [xv.shape[a] for a in np.atleast_1d(axis)])
    return div(vsum(x, axis=axis, keepdims=keepdims), float(n))


def reshape(x, shape):
    if not is_var(x):
        return _const(x).reshape(shape)
    old = x.value.shape
    out = Var(x.value.reshape(shape), parents=(x,), op="reshape")
    out._backward = lambda g: _accum(x, g.reshape(old))
    return out


def getitem(x, idx):
    if not is_var(x):
        return _const(x)[idx]
    out = Var(x.value[idx], parents=(x,), op="getitem")

    def backward(g):
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        _accum(x, full)

    out._backward = backward
    return out


def concat(parts, axis=0):
    if not any(is_var(p) for p in parts):
        return np.concatenate([_const(p) for p in parts], axis=axis)
    values = [value_of(p) for p in parts]
    sizes = [v.shape[axis] for v in values]
    out = Var(np.concatenate(values, axis=axis),
              parents=tuple(p for p in parts if is_var(p)), op="concat")

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            if is_var(p):
                _accum(p, g[tuple(sl)])
            offset += n

    out._backward = backward
    return out


def stack(parts, axis=0):
    return concat([reshape(p, _stacked_shape(p, axis)) for p in parts], axis)


def _stacked_shape(p, axis):
    s = list(value_of(p).shape)
    s.insert(axis if axis >= 0 else len(s) + 1 + axis, 1)
    return tuple(s)


def gather_pixels(x, rows, cols):
    """Select pixels (rows[i], cols[i]) from an (H, W, C) grid -> (n, C)."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if not is_var(x):
        return _const(x)[rows, cols]
    out = Var(x.value[rows, cols], parents=(x,), op="gather_pixels")

    def backward(g):
        full = np.zeros_like(x.value)
        np.add.at(full, (rows, cols), g)
        _accum(x, full)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# spatial ops


def grad_x(x):
    """Forward difference along width: out[..., j, :] = x[:, j+1] - x[:, j]."""
    def fwd(v):
        return v[:, 1:] - v[:, :-1]

    if not is_var(x):
        return fwd(_const(x))
    out = Var(fwd(x.value), parents=(x,), op="grad_x")

    def backward(g):
        full = np.zeros_like(x.value)
        full[:, 1:] += g
        full[:, :-1] -= g
        _accum(x, full)

    out._backward = backward
    return out


def grad_y(x):
    """Forward difference along height."""
    def fwd(v):
        return v[1:] - v[:-1]

    if not is_var(x):
        return fwd(_const(x))
    out = Var(fwd(x.value), parents=(x,), op="grad_y")

    def backward(g):
        full = np.zeros_like(x.value)
        full[1:] += g
        full[:-1] -= g
        _accum(x, full)

    out._backward = backward
    return out


def box3(x):
    """Valid-mode 3x3 box mean of an (H, W, C) grid -> (H-2, W-2, C)."""
    def fwd(v):
        out = np.zeros((v.shape[0] - 2, v.shape[1] - 2) + v.shape[2:])
        for di in range(3):
            for dj in range(3):
                out += v[di:di + out.shape[0], dj:dj + out.shape[1]]
        return out / 9.0

    if not is_var(x):
        return fwd(_const(x))
    out = Var(fwd(x.value), parents=(x,), op="box3")

    def backward(g):
        full = np.zeros_like(x.value)
        h, w = g.shape[0], g.shape[1]
        for di in range(3):
            for dj in range(3):
                full[di:di + h, dj:dj + w] += g / 9.0
        _accum(x, full)

    out._backward = backward
    return out


def softmax(x):
    """Softmax over every element of the array (any shape)."""
    def fwd(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    if not is_var(x):
        return fwd(_const(x))
    out = Var(fwd(x.value), parents=(x,), op="softmax")

    def backward(g):
        s = out.value
        _accum(x, s * (g - (g * s).sum()))

    out._backward = backward
    return out


def bilinear_sample(src, u, v):
    """Bilinear gather from an (H, W, C) grid at continuous pixel coords.

    ``u``/``v`` are x/y coordinates of shape (Hs, Ws). Out-of-bounds
    contributions are zero-padded. Returns ``(samples, valid)`` where
    ``valid`` is a plain {0,1} float array marking coordinates whose full
    bilinear footprint lies inside the grid.

    Differentiable with respect to ``src``, ``u`` and ``v``.
    """
    sv = value_of(src)
    uv_ = value_of(u)
    vv_ = value_of(v)
    H, W = sv.shape[0], sv.shape[1]

    x0 = np.floor(uv_).astype(np.int64)
    y0 = np.floor(vv_).astype(np.int64)
    fx = uv_ - x0
    fy = vv_ - y0

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inb = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            val = np.zeros(uv_.shape + sv.shape[2:])
            val[inb] = sv[yi[inb], xi[inb]]
            corners.append((xi, yi, inb, val))
    (x00, y00, in00, v00), (x01, y01, in01, v01), \
        (x10, y10, in10, v10), (x11, y11, in11, v11) = corners

    wx1, wy1 = fx, fy
    wx0, wy0 = 1.0 - fx, 1.0 - fy

    def lift(w):
        return w[..., None] if sv.ndim == 3 else w

    w00 = lift(wx0 * wy0)
    w01 = lift(wx1 * wy0)
    w10 = lift(wx0 * wy1)
    w11 = lift(wx1 * wy1)
    out_val = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    eps = 1e-9  # tolerate round-off at the exact image border
    valid = ((uv_ >= -eps) & (uv_ <= W - 1.0 + eps)
             & (vv_ >= -eps) & (vv_ <= H - 1.0 + eps)).astype(np.float64)

    parents = tuple(x for x in (src, u, v) if is_var(x))
    if not parents:
        return out_val, valid
    out = Var(out_val, parents=parents, op="bilinear_sample")

    def backward(g):
        if is_var(src):
            gs = np.zeros_like(sv)
            for w, (xi, yi, inb, _) in zip((w00, w01, w10, w11), corners):
                contrib = (w * g)[inb]
                np.add.at(gs, (yi[inb], xi[inb]), contrib)
            _accum(src, gs)
        if is_var(u) or is_var(v):
            du = lift(wy0) * (v01 - v00) + lift(wy1) * (v11 - v10)
            dv = lift(wx0) * (v10 - v00) + lift(wx1) * (v11 - v01)
            if sv.ndim == 3:
                gu = (g * du).sum(axis=-1)
                gv = (g * dv).sum(axis=-1)
            else:
                gu, gv = g * du, g * dv
            if is_var(u):
                _accum(u, gu)
            if is_var(v):
                _accum(v, gv)

    out._backward = backward
    return out, valid


# ---------------------------------------------------------------------------
# parameter blocks and the gradient contract


@dataclass
class ParamBlock:
    """A named flat block of optimizable real parameters."""

    name: str
    values: np.ndarray
    bounds: tuple | None = None  # (lo, hi) arrays or scalars

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def clamp_to_bounds(self):
        if self.bounds is not None:
            lo, hi = self.bounds
            np.clip(self.values, lo, hi, out=self.values)


def _first_nonfinite_op(root):
    bad = None
    for node in _toposort(root):
        if not np.all(np.isfinite(node.value)):
            if bad is None or node._id < bad._id:
                bad = node
    return bad.op if bad is not None else root.op


def _scalar(x):
    v = value_of(x)
    if v.size != 1:
        raise ValueError(f"loss must be scalar, got shape {v.shape}")
    return float(v)


def grad(loss_fn, params):
    """Gradient of a scalar loss with respect to each parameter block.

    ``loss_fn`` receives one Var per block (shaped like ``block.values``)
    and must return a scalar composed of this module's ops.
    """
    leaves = [Var(p.values, op=f"param:{p.name}") for p in params]
    out = loss_fn(*leaves)
    if not is_var(out):
        raise ValueError("loss_fn must return a Var depending on parameters")
    loss = _scalar(out)
    if not np.isfinite(loss):
        raise NonFiniteLossError(_first_nonfinite_op(out))
    out.backward()
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
            for leaf in leaves]


def finite_diff(loss_fn, params, step, indices=None):
    """Central finite-difference gradient estimate, the oracle for grad().

    ``indices``: optional list (one entry per block) of flat index arrays
    to probe; other entries are left at zero in the returned arrays.
    """
    if not step > 0:
        raise ValueError("finite_diff step must be > 0")

    def evaluate(vals):
        out = loss_fn(*[Var(v) for v in vals])
        return _scalar(out)

    base = [p.values.astype(np.float64).copy() for p in params]
    grads = [np.zeros_like(v) for v in base]
    for bi, v in enumerate(base):
        flat = v.reshape(-1)
        gflat = grads[bi].reshape(-1)
        idxs = range(flat.size) if indices is None else indices[bi]
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate(base)
            flat[i] = orig - step
            lo = evaluate(base)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return grads
