"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is dynamic: every primitive call creates a Node holding the
forward value plus closures that map an incoming output-gradient to each
parent's gradient contribution. ``backpropagate`` walks nodes in reverse
creation order, which is a valid topological order (parents are always
created before children). Gradient accumulation order is fixed by that
walk, so the floating-point result is reproducible run to run.

Scalars and plain arrays mix freely with Nodes; they are wrapped as
constants. Elementwise primitives broadcast like numpy and their backward
pass sums gradients back down to the original operand shapes.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes do not conform to the primitive's rule."""


class NonScalarLoss(ValueError):
    """backpropagate needs a scalar-shaped loss node."""


_IDS = itertools.count()


class Node:
    __slots__ = (
        "value", "parents", "grad_fns", "scatter_fns", "nid", "grad",
        "grad_owned", "requires_grad",
    )

    def __init__(self, value, parents=(), grad_fns=(), scatter_fns=None):
        self.value = value
        self.parents = parents
        self.grad_fns = grad_fns
        # optional in-place accumulators fn(g, acc); used by slicing-style
        # ops so a slice gradient costs only the slice, not the full buffer
        self.scatter_fns = scatter_fns
        self.nid = next(_IDS)
        self.grad = None
        self.grad_owned = False
        self.requires_grad = any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(shape={self.value.shape}, nid={self.nid})"

    # arithmetic sugar so layer code reads like numpy
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Node):
    """Named leaf node. Every learnable array in a model is one of these."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name, trainable=True):
        super().__init__(np.asarray(value))
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def constant(x, dtype=None):
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Node(arr)


def _pair(a, b):
    """Wrap the non-Node operand of a binary primitive as a constant."""
    if isinstance(a, Node):
        if isinstance(b, Node):
            return a, b
        return a, constant(b, dtype=a.value.dtype)
    return constant(a, dtype=b.value.dtype), b


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return Node(
        a.value + b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
    )


def subtract(a, b):
    a, b = _pair(a, b)
    return Node(
        a.value - b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(-g, b.value.shape),
        ),
    )


def multiply(a, b):
    a, b = _pair(a, b)
    return Node(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def divide(a, b):
    a, b = _pair(a, b)
    out = a.value / b.value
    return Node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * out / b.value, b.value.shape),
        ),
    )


def negate(a):
    return Node(-a.value, (a,), (lambda g: -g,))


def square(a):
    return Node(a.value * a.value, (a,), (lambda g: g * (2.0 * a.value),))


def sqrt(a):
    out = np.sqrt(a.value)
    return Node(out, (a,), (lambda g: g * (0.5 / out),))


def exp(a):
    out = np.exp(a.value)
    return Node(out, (a,), (lambda g: g * out,))


def log(a):
    return Node(np.log(a.value), (a,), (lambda g: g / a.value,))


def sin(a):
    return Node(np.sin(a.value), (a,), (lambda g: g * np.cos(a.value),))


def cos(a):
    return Node(np.cos(a.value), (a,), (lambda g: -g * np.sin(a.value),))


def relu(a):
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), (lambda g: g * mask,))


def _sigmoid_raw(x):
    # evaluate through exp of a non-positive argument only; never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid_raw(np.asarray(a.value))
    return Node(out, (a,), (lambda g: g * out * (1.0 - out),))


def log_sigmoid(a):
    """log(sigmoid(x)) evaluated stably as -softplus(-x)."""
    x = a.value
    out = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))
    return Node(out, (a,), (lambda g: g * _sigmoid_raw(-x),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape)

    return Node(np.asarray(out), (a,), (back,))


def reduce_mean(a, axis=None, keepdims=False):
    out = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[i] for i in _norm_axes(axis, a.value.ndim)]
    )

    def back(g):
        if axis is None:
            return np.broadcast_to(g / count, a.value.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, a.value.shape)

    return Node(np.asarray(out), (a,), (back,))


def reduce_max(a, axis=None, keepdims=False):
    out = a.value.max(axis=axis, keepdims=keepdims)

    def back(g):
        full = out if keepdims or axis is None else np.expand_dims(out, axis)
        mask = a.value == full
        share = mask / mask.sum(axis=axis, keepdims=True)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return g * share

    return Node(np.asarray(out), (a,), (back,))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def softmax(a, axis=-1):
    """Numerically shifted softmax along ``axis`` as one fused primitive.

    The shift by the per-slice maximum is a constant with respect to the
    gradient (softmax is shift-invariant), so backward only needs the
    output: g_in = s * (g - sum(g * s)).
    """
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    np.exp(shifted, out=shifted)
    denom = shifted.sum(axis=axis, keepdims=True)
    out = shifted / denom

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return Node(out, (a,), (back,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    return Node(
        a.value.reshape(shape), (a,), (lambda g: g.reshape(a.value.shape),)
    )


def transpose(a, axes):
    inverse = np.argsort(axes)
    return Node(
        np.transpose(a.value, axes), (a,), (lambda g: np.transpose(g, inverse),)
    )


def broadcast_to(a, shape):
    return Node(
        np.broadcast_to(a.value, shape),
        (a,),
        (lambda g: _unbroadcast(g, a.value.shape),),
    )


def getitem(a, idx):
    """Basic slicing view; backward scatter-adds into the parent buffer."""
    val = a.value[idx]

    def scatter(g, acc):
        if _is_fancy(idx):
            np.add.at(acc, idx, g)
        else:
            acc[idx] += g

    return Node(val, (a,), (None,), scatter_fns=(scatter,))


def _is_fancy(idx):
    if isinstance(idx, tuple):
        return any(isinstance(i, (list, np.ndarray)) for i in idx)
    return isinstance(idx, (list, np.ndarray))


def concatenate(nodes, axis=0):
    nodes = list(nodes)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def make_back(i):
        sl = [slice(None)] * nodes[i].value.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Node(
        np.concatenate([n.value for n in nodes], axis=axis),
        tuple(nodes),
        tuple(make_back(i) for i in range(len(nodes))),
    )


def stack(nodes, axis=0):
    nodes = list(nodes)

    def make_back(i):
        return lambda g: np.take(g, i, axis=axis)

    return Node(
        np.stack([n.value for n in nodes], axis=axis),
        tuple(nodes),
        tuple(make_back(i) for i in range(len(nodes))),
    )


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeMismatch(
            f"matmul needs ndim >= 2 operands, got {a.value.shape} @ {b.value.shape}"
        )
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.value.shape} @ {b.value.shape}")
    out = np.matmul(a.value, b.value)

    def back_a(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        return _unbroadcast(ga, a.value.shape)

    def back_b(g):
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(gb, b.value.shape)

    return Node(out, (a, b), (back_a, back_b))


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, stride, padding):
    """[B,C,H,W] -> column matrix [B, Ho, Wo, C*kh*kw] (copy)."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, ho, wo, c, kh, kw),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b, ho, wo, c * kh * kw), ho, wo


def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation. x: [B,Cin,H,W], w: [Cout,Cin,kh,kw]."""
    x, w = _pair(x, w)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D operands, got {x.value.shape}, {w.value.shape}")
    if x.value.shape[1] != w.value.shape[1]:
        raise ShapeMismatch(
            f"conv2d channel mismatch: input {x.value.shape} vs kernel {w.value.shape}"
        )
    b, cin, h, wid = x.value.shape
    cout, _, kh, kw = w.value.shape
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise ShapeMismatch(f"conv2d input {x.value.shape} smaller than kernel {w.value.shape}")
    col, ho, wo = _im2col(x.value, kh, kw, stride, padding)
    wmat = w.value.reshape(cout, -1)
    out = col @ wmat.T  # [B, Ho, Wo, Cout]
    out = np.moveaxis(out, -1, 1)

    def back_x(g):
        gmat = np.moveaxis(g, 1, -1)  # [B, Ho, Wo, Cout]
        gcol = gmat @ wmat  # [B, Ho, Wo, Cin*kh*kw]
        gcol = gcol.reshape(b, ho, wo, cin, kh, kw)
        gx = np.zeros((b, cin, h + 2 * padding, wid + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            he = i + stride * (ho - 1) + 1
            for j in range(kw):
                we = j + stride * (wo - 1) + 1
                gx[:, :, i:he:stride, j:we:stride] += np.moveaxis(gcol[..., i, j], -1, 1)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx

    def back_w(g):
        gmat = np.moveaxis(g, 1, -1).reshape(-1, cout)
        return (gmat.T @ col.reshape(-1, col.shape[-1])).reshape(w.value.shape)

    return Node(out, (x, w), (back_x, back_w))


def window_sum(x, k, stride=1):
    """Sum over k x k sliding windows of axes 1 and 2 of [B, H, W, ...]."""
    v = np.ascontiguousarray(x.value)
    b, h, w = v.shape[:3]
    rest = v.shape[3:]
    if h < k or w < k:
        raise ShapeMismatch(f"window_sum input {v.shape} smaller than window {k}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s = v.strides
    view = np.lib.stride_tricks.as_strided(
        v,
        shape=(b, ho, wo, k, k) + rest,
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2]) + s[3:],
        writeable=False,
    )
    out = view.sum(axis=(3, 4))

    def scatter(g, acc):
        for i in range(k):
            he = i + stride * (ho - 1) + 1
            for j in range(k):
                we = j + stride * (wo - 1) + 1
                acc[:, i:he:stride, j:we:stride] += g

    return Node(out, (x,), (None,), scatter_fns=(scatter,))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Accumulate .grad on every node reachable from ``loss``.

    Deterministic: nodes are processed in strictly decreasing creation
    order and each pushes gradient to its parents in declaration order.

    Gradient buffers are accumulated without in-place mutation except for
    scatter-style ops, which first take ownership of (copy or allocate)
    their target buffer; regular contributions may therefore alias the
    upstream gradient safely.
    """
    if np.asarray(loss.value).size != 1:
        raise NonScalarLoss(f"loss must be scalar-shaped, got shape {loss.value.shape}")
    reachable = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if node.nid in reachable:
            continue
        reachable[node.nid] = node
        stack_.extend(node.parents)
    for node in reachable.values():
        node.grad = None
        node.grad_owned = False
    loss.grad = np.ones_like(np.asarray(loss.value))
    loss.grad_owned = True
    for nid in sorted(reachable, reverse=True):
        node = reachable[nid]
        g = node.grad
        if g is None:
            continue
        scatters = node.scatter_fns or (None,) * len(node.parents)
        for parent, fn, sfn in zip(node.parents, node.grad_fns, scatters):
            if not parent.requires_grad:
                continue
            if sfn is not None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                    parent.grad_owned = True
                elif not parent.grad_owned:
                    parent.grad = parent.grad.copy()
                    parent.grad_owned = True
                sfn(g, parent.grad)
            else:
                contrib = fn(g)
                if parent.grad is None:
                    parent.grad = contrib
                    parent.grad_owned = False
                else:
                    parent.grad = parent.grad + contrib
                    parent.grad_owned = True
        if node.parents:
            node.grad = None  # free intermediate buffers as soon as consumed


def backpropagate(loss, parameters):
    """Gradients of scalar ``loss`` for every trainable parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    backward(loss)
    out = {}
    for p in parameters:
        if not p.trainable:
            continue
        out[p.name] = p.grad if p.grad is not None else np.zeros_like(p.value)
    return out


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def finite_difference_check(f, parameters, h=1e-5, max_coords_per_param=None, seed=0):
    """Max relative error between reverse-mode and central differences.

    ``f`` rebuilds the scalar loss graph from the parameters' current
    values on every call. Relative error per coordinate is
    |fd - grad| / max(1, |grad|). When ``max_coords_per_param`` is set, a
    seeded random subset of coordinates is checked per parameter; the
    full sweep is used otherwise. Use float64 parameters.
    """
    params = [p for p in parameters if p.trainable]
    grads = backpropagate(f(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        gflat = grads[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(np.asarray(f().value))
            flat[i] = orig - h
            fm = float(np.asarray(f().value))
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(fd - gflat[i]) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
