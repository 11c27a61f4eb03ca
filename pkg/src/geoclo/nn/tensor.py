"""Reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tensor` records the operation that produced it and a closure that
maps the output gradient to input gradients. ``Tensor.backward`` walks the
recorded graph in reverse topological order. Graph nodes are only recorded
when at least one input requires a gradient, so inference with plain
parameters carries no tape overhead.
"""
from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "GraphStateError", "Graph", "as_tensor",
    "add", "sub", "mul", "matmul", "neg", "scale", "square", "tanh", "sigmoid", "relu",
    "sum", "mean", "reshape", "transpose", "concat", "take", "conv2d",
    "conv_transpose2d", "mse", "squared_error_sum",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphStateError(RuntimeError):
    """Graph used out of order, e.g. backward before forward."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.id = next(_ids)
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, id={self.id})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable ``leaf.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise GraphStateError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"output gradient shape {grad.shape} != value shape "
                             f"{self.shape} at node {self.id}")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))
        grads = {self.id: grad}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                grads[p.id] = pg if p.id not in grads else grads[p.id] + pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    parents = tuple(parents)
    t = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    return t


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast "
                         f"(nodes {a.id}, {b.id})") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data**2, (a,), lambda g: (2.0 * a.data * g,), "square")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} (nodes {a.id}, {b.id})")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _node(a.data * m, (a,), lambda g: (g * m,), "relu")


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape} (node {a.id})") from None
    return _node(y, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a, idx) -> Tensor:
    """Indexing/slicing; repeated integer indices accumulate their gradients."""
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), back, "take")


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes "
                         + ", ".join(f"{t.shape}@{t.id}" for t in ts)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(y, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def squared_error_sum(a, b) -> Tensor:
    """Sum of squared differences, ``||a - b||^2``."""
    return sum(square(sub(a, b)))


def mse(a, b) -> Tensor:
    return mean(square(sub(a, b)))


# -- convolution -----------------------------------------------------------

def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(x, k, s, p):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k), ho, wo


def _col2im(cols, x_shape, k, s, p, ho, wo):
    n, c, h, w = x_shape
    d = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += d[:, :, i, j]
    return xp[:, :, p:p + h, p:p + w] if p else xp


def _conv_fwd(x, w, s, p):
    o, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, s, p)
    y = cols @ w.reshape(o, -1).T
    return y.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)


def _conv_adj(gy, w, s, p, x_shape):
    """Adjoint of ``_conv_fwd`` with respect to its input."""
    o, _, k, _ = w.shape
    n, _, ho, wo = gy.shape
    cols = gy.transpose(0, 2, 3, 1).reshape(-1, o) @ w.reshape(o, -1)
    return _col2im(cols, x_shape, k, s, p, ho, wo)


def _conv_wgrad(x, gy, s, p, w_shape):
    o, _, k, _ = w_shape
    cols, _, _ = _im2col(x, k, s, p)
    return (gy.transpose(0, 2, 3, 1).reshape(-1, o).T @ cols).reshape(w_shape)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; ``x`` (N, C, H, W), ``w`` (O, C, k, k), ``b`` (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape} "
                         f"(nodes {x.id}, {w.id})")
    if min(_conv_out(x.shape[2], w.shape[2], stride, padding),
           _conv_out(x.shape[3], w.shape[3], stride, padding)) < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input "
                         f"{x.shape[2:]} (node {x.id})")
    y = _conv_fwd(x.data, w.data, stride, padding)
    out = _node(y, (x, w),
                lambda g: (_conv_adj(g, w.data, stride, padding, x.shape),
                           _conv_wgrad(x.data, g, stride, padding, w.shape)), "conv2d")
    if b is not None:
        out = add(out, reshape(b, (1, -1, 1, 1)))
    return out


def conv_transpose2d(y, w, b=None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` is (C_in, C_out, k, k).

    Output size is ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    y, w = as_tensor(y), as_tensor(w)
    if y.ndim != 4 or w.ndim != 4 or y.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {y.shape} vs kernel {w.shape} "
                         f"(nodes {y.id}, {w.id})")
    k = w.shape[2]
    h = (y.shape[2] - 1) * stride - 2 * padding + k + output_padding
    wd = (y.shape[3] - 1) * stride - 2 * padding + k + output_padding
    x_shape = (y.shape[0], w.shape[1], h, wd)
    if _conv_out(h, k, stride, padding) != y.shape[2]:
        raise ShapeError(f"conv_transpose2d: output_padding {output_padding} "
                         f"inconsistent with stride {stride} (node {y.id})")
    x = _conv_adj(y.data, w.data, stride, padding, x_shape)
    out = _node(x, (y, w),
                lambda g: (_conv_fwd(g, w.data, stride, padding),
                           _conv_wgrad(g, y.data, stride, padding, w.shape)),
                "conv_transpose2d")
    if b is not None:
        out = add(out, reshape(b, (1, -1, 1, 1)))
    return out


class Graph:
    """A scalar- or tensor-valued function of named parameters.

    ``fn(params, *inputs)`` builds the output from :class:`Tensor` objects.
    ``forward`` evaluates and caches it; ``backward`` returns the gradient of
    that output with respect to every parameter.
    """

    def __init__(self, fn, params: dict[str, Tensor]):
        self.fn = fn
        self.params = params
        self._out = None

    def forward(self, *inputs) -> Tensor:
        self._out = self.fn(self.params, *[as_tensor(x) for x in inputs])
        return self._out

    def backward(self, grad=None) -> dict[str, np.ndarray]:
        if self._out is None:
            raise GraphStateError("backward called before forward")
        for p in self.params.values():
            p.zero_grad()
        self._out.backward(grad)
        self._out = None
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad)
                for k, p in self.params.items()}
