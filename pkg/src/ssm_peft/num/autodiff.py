"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every op builds a :class:`Node` whose value is computed eagerly and frozen
(read-only). ``backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import itertools

import numpy as np

from .. import kernels

_ids = itertools.count()


class ShapeError(ValueError):
    pass


def _frozen(value):
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Node:
    __slots__ = ("id", "op", "value", "parents", "grad_fn", "name", "requires_grad")

    def __init__(self, value, op="const", parents=(), grad_fn=None, name=None, requires_grad=None):
        self.id = next(_ids)
        self.op = op
        self.value = _frozen(value)
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} op={self.op} shape={self.shape}>"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def parameter(value, name):
    """Trainable leaf with a stable identifier."""
    return Node(value, op="param", name=name, requires_grad=True)


def constant(value):
    if isinstance(value, Node):
        return value
    return Node(value, op="const", requires_grad=False)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def evaluate(expr):
    """Forward value of ``expr`` (computed at construction and memoized)."""
    return expr.value


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a, b)
    return Node(
        a.value + b.value,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a, b)
    return Node(
        a.value - b.value,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a, b)
    return Node(
        a.value * b.value,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape("div", a, b)
    out = a.value / b.value
    return Node(
        out,
        "div",
        (a, b),
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
    )


def scale(a, c):
    a = as_node(a)
    c = float(c)
    return Node(a.value * c, "scale", (a,), lambda g: (g * c,))


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = as_node(a)
    return Node(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def relu(a):
    a = as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def softplus(a):
    a = as_node(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Node(np.logaddexp(0.0, a.value), "softplus", (a,), lambda g: (g * sig,))


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def expm1_ratio(a):
    """(exp(x) - 1) / x with the removable singularity at 0 filled in."""
    a = as_node(a)
    x = a.value
    small = np.abs(x) < 1e-5
    safe = np.where(small, 1.0, x)
    out = np.where(small, 1.0 + x / 2.0 + x * x / 6.0, np.expm1(safe) / safe)
    deriv = np.where(
        small, 0.5 + x / 3.0, (safe * np.exp(np.minimum(safe, 700.0)) - np.expm1(safe)) / (safe * safe)
    )
    return Node(out, "expm1_ratio", (a,), lambda g: (g * deriv,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(out, "matmul", (a, b), grad_fn)


# ---------------------------------------------------------------- reductions / shape


def sum_(a, axis=None, keepdims=False):
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(out, "sum", (a,), grad_fn)


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    count = a.value.size // max(np.asarray(a.value.sum(axis=axis)).size, 1)
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return Node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_node(a)
    out = np.transpose(a.value, axes)
    inv = None if axes is None else np.argsort(axes)
    return Node(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        shapes = " and ".join(str(n.shape) for n in nodes)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return Node(out, "concat", nodes, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, index):
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    a = as_node(a)
    try:
        out = a.value[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}") from exc

    def grad_fn(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return Node(out, "slice", (a,), grad_fn)


def scatter(values, shape, flat_index):
    """Embed a 1-D node into zeros of ``shape`` at the given flat positions."""
    values = as_node(values)
    flat_index = np.asarray(flat_index, dtype=np.intp)
    if values.shape != flat_index.shape:
        raise ShapeError(f"scatter: values {values.shape} vs index {flat_index.shape}")
    out = np.zeros(int(np.prod(shape)))
    out[flat_index] = values.value
    return Node(
        out.reshape(shape),
        "scatter",
        (values,),
        lambda g: (g.reshape(-1)[flat_index],),
    )


# ---------------------------------------------------------------- fused SSM kernels


def ssm_kernel(abar, bc, n):
    """Convolution kernel K[d, k] = sum_h bc[d, h] abar[d, h]^k, k < n."""
    abar, bc = as_node(abar), as_node(bc)
    if abar.shape != bc.shape or abar.ndim != 2:
        raise ShapeError(f"ssm_kernel: incompatible shapes {abar.shape} and {bc.shape}")
    out = kernels.ssm_kernel(abar.value, bc.value, n)
    return Node(
        out,
        "ssm_kernel",
        (abar, bc),
        lambda g: kernels.ssm_kernel_backward(abar.value, bc.value, n, g),
    )


def causal_conv(kernel, x):
    """Per-channel causal convolution of x (B, D, N) with kernel (D, N)."""
    kernel, x = as_node(kernel), as_node(x)
    if x.ndim != 3 or kernel.shape != x.shape[1:]:
        raise ShapeError(f"causal_conv: incompatible shapes {kernel.shape} and {x.shape}")
    out = kernels.causal_conv(kernel.value, x.value)
    return Node(
        out,
        "causal_conv",
        (kernel, x),
        lambda g: kernels.causal_conv_backward(kernel.value, x.value, g),
    )


def diag_scan(a, u, h0):
    """Diagonal linear recurrence over axis 1; a, u (B, N, D, H), h0 (B, D, H)."""
    a, u, h0 = as_node(a), as_node(u), as_node(h0)
    if a.shape != u.shape or a.ndim != 4 or h0.shape != (a.shape[0],) + a.shape[2:]:
        raise ShapeError(f"diag_scan: incompatible shapes {a.shape}, {u.shape} and {h0.shape}")
    hs = kernels.diag_scan(a.value, u.value, h0.value)
    return Node(
        hs,
        "diag_scan",
        (a, u, h0),
        lambda g: kernels.diag_scan_backward(a.value, hs, h0.value, g),
    )


# ---------------------------------------------------------------- backward


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss, params):
    """Gradients of a scalar ``loss`` w.r.t. ``params``.

    ``params`` is an iterable of parameter nodes (or a name -> node mapping).
    Returns a dict keyed by parameter name; parameters with no path to the
    loss get zeros.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if isinstance(params, dict):
        params = list(params.values())
    grads = {loss.id: np.ones_like(loss.value)}
    for node in reversed(_topo(loss)):
        g = grads.pop(node.id, None) if node.op != "param" else grads.get(node.id)
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=np.float64)
    out = {}
    for p in params:
        g = grads.get(p.id)
        out[p.name] = np.zeros(p.shape) if g is None else np.asarray(g).reshape(p.shape)
    return out


def grad_check(loss_builder, params, eps=1e-5):
    """Max relative error between backward and central finite differences.

    ``loss_builder`` maps a dict of name -> node to a scalar loss node;
    ``params`` maps name -> array. Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: parameter(v, k) for k, v in params.items()}
    analytic = backward(loss_builder(leaves), leaves)

    def f(name, arr):
        vals = {k: constant(arr if k == name else v) for k, v in params.items()}
        return float(loss_builder(vals).value)

    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            hi = flat.copy()
            lo = flat.copy()
            hi[i] += eps
            lo[i] -= eps
            numeric = (f(name, hi.reshape(base.shape)) - f(name, lo.reshape(base.shape))) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
