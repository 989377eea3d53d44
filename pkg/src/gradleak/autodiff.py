"""Reverse-mode automatic differentiation over numpy arrays.

Values are plain ``numpy.ndarray`` objects in the working precision
(float32 unless changed with :func:`precision`).  Differentiable
computations are recorded as :class:`Node` objects.  Every vector-Jacobian
product is itself written with Node operations, so running the backward
pass while recording (``grad(..., differentiable=True)``) yields gradients
that can be differentiated again.  That second-order path is what gradient
matching attacks need: d/dx of a function of dL/dtheta.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

Tensor = np.ndarray

_state = threading.local()


class ShapeError(ValueError):
    pass


def _get(name, default):
    return getattr(_state, name, default)


def working_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def is_recording() -> bool:
    return _get("recording", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created values."""
    old = working_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def recording(enabled: bool):
    old = is_recording()
    _state.recording = enabled
    try:
        yield
    finally:
        _state.recording = old


def no_grad():
    return recording(False)


def as_tensor(data, dims: Sequence[int] | None = None) -> Tensor:
    """Convert ``data`` to a finite array in the working dtype."""
    arr = np.asarray(data, dtype=working_dtype())
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d <= 0 for d in dims):
            raise ShapeError(f"dims must be positive, got {list(dims)}")
        if arr.size != int(np.prod(dims)):
            raise ShapeError(f"data of length {arr.size} does not fill dims {list(dims)}")
        arr = arr.reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("tensor contains non-finite values")
    return arr


class Node:
    """One value on the tape.

    ``vjp(g, out, needs)`` returns one adjoint (a Node or None) per parent;
    ``needs[i]`` says whether parent ``i`` lies on a path to a requested
    gradient, so unneeded products can be skipped.
    """

    __slots__ = ("value", "parents", "vjp", "requires_grad", "op", "__weakref__")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, op="const"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(neg(self), other)
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def variable(data) -> Node:
    """A leaf that gradients can be taken with respect to."""
    return Node(as_tensor(data), requires_grad=True, op="leaf")


def constant(data) -> Node:
    if isinstance(data, Node):
        return data
    return Node(np.asarray(data, dtype=working_dtype()), op="const")


def _node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(op: str, value: np.ndarray, parents: tuple[Node, ...], vjp: Callable) -> Node:
    value = np.asarray(value, dtype=working_dtype())
    if is_recording() and any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, True, op)
    return Node(value, op=op)


def _check_finite(op: str, value: np.ndarray):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _same_shape(op: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand dims differ, {list(a.shape)} vs {list(b.shape)}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    _same_shape("add", a, b)

    def vjp(g, out, needs):
        return g, g

    return _make("add", a.value + b.value, (a, b), vjp)


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    _same_shape("sub", a, b)

    def vjp(g, out, needs):
        return g, (neg(g) if needs[1] else None)

    return _make("sub", a.value - b.value, (a, b), vjp)


def mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    _same_shape("mul", a, b)

    def vjp(g, out, needs):
        return (mul(g, b) if needs[0] else None), (mul(g, a) if needs[1] else None)

    return _make("mul", a.value * b.value, (a, b), vjp)


def div(a, b) -> Node:
    a, b = _node(a), _node(b)
    _same_shape("div", a, b)
    value = a.value / b.value
    _check_finite("div", value)

    def vjp(g, out, needs):
        ga = div(g, b) if needs[0] else None
        gb = neg(div(mul(g, out), b)) if needs[1] else None
        return ga, gb

    return _make("div", value, (a, b), vjp)


def neg(x) -> Node:
    x = _node(x)
    return _make("neg", -x.value, (x,), lambda g, out, needs: (neg(g),))


def scale(x, c: float) -> Node:
    x = _node(x)
    c = float(c)
    return _make("scale", x.value * working_dtype().type(c), (x,),
                 lambda g, out, needs: (scale(g, c),))


def add_scalar(x, c: float) -> Node:
    x = _node(x)
    return _make("add_scalar", x.value + working_dtype().type(c), (x,),
                 lambda g, out, needs: (g,))


def exp(x) -> Node:
    x = _node(x)
    value = np.exp(x.value)
    _check_finite("exp", value)
    return _make("exp", value, (x,), lambda g, out, needs: (mul(g, out),))


def log(x) -> Node:
    x = _node(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(x.value)
    _check_finite("log", value)
    return _make("log", value, (x,), lambda g, out, needs: (div(g, x),))


def sqrt(x) -> Node:
    x = _node(x)
    value = np.sqrt(x.value)
    _check_finite("sqrt", value)
    return _make("sqrt", value, (x,), lambda g, out, needs: (div(scale(g, 0.5), out),))


def sigmoid(x) -> Node:
    x = _node(x)
    value = 0.5 * (1.0 + np.tanh(0.5 * x.value))

    def vjp(g, out, needs):
        return (mul(g, mul(out, add_scalar(neg(out), 1.0))),)

    return _make("sigmoid", value, (x,), vjp)


def tanh(x) -> Node:
    x = _node(x)

    def vjp(g, out, needs):
        return (mul(g, add_scalar(neg(mul(out, out)), 1.0)),)

    return _make("tanh", np.tanh(x.value), (x,), vjp)


def relu(x) -> Node:
    # relu'(0) = 0; the mask is a constant, so second derivatives vanish
    x = _node(x)
    mask = (x.value > 0).astype(working_dtype())
    return _make("relu", x.value * mask, (x,), lambda g, out, needs: (mul(g, constant(mask)),))


def abs(x) -> Node:  # noqa: A001
    x = _node(x)
    sign = np.sign(x.value).astype(working_dtype())
    return _make("abs", np.abs(x.value), (x,), lambda g, out, needs: (mul(g, constant(sign)),))


ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "add": add,
    "mul": mul,
    "sub": sub,
    "scale": scale,
}


def elementwise(x, kind: str, other=None):
    """Dispatch by name; ``other`` is the second operand or the scale factor."""
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("relu", "sigmoid", "tanh"):
        return fn(x)
    return fn(x, other)


# ---------------------------------------------------------------- linear algebra


def _acc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a.astype(np.float64), b.astype(np.float64))


def matmul(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply dims {list(a.shape)} and {list(b.shape)}")

    def vjp(g, out, needs):
        ga = matmul(g, transpose(b)) if needs[0] else None
        gb = matmul(transpose(a), g) if needs[1] else None
        return ga, gb

    return _make("matmul", _acc(a.value, b.value), (a, b), vjp)


def transpose(x) -> Node:
    x = _node(x)
    return _make("transpose", x.value.T, (x,), lambda g, out, needs: (transpose(g),))


def reshape(x, shape) -> Node:
    x = _node(x)
    shape = tuple(shape)
    src = x.shape
    return _make("reshape", x.value.reshape(shape), (x,),
                 lambda g, out, needs: (reshape(g, src),))


def sum(x) -> Node:  # noqa: A001
    """Sum of all entries as a 0-d node."""
    x = _node(x)
    src = x.shape

    def vjp(g, out, needs):
        return (broadcast_to(reshape(g, (1,) * len(src)), src),)

    return _make("sum", np.sum(x.value, dtype=np.float64), (x,), vjp)


def _reduced_axes(src, dst):
    if len(src) != len(dst) or any(d not in (1, s) for s, d in zip(src, dst)):
        raise ShapeError(f"cannot reduce dims {list(src)} to {list(dst)}")
    return tuple(i for i, (s, d) in enumerate(zip(src, dst)) if d == 1 and s != 1)


def sum_to(x, shape) -> Node:
    """Sum over the axes where ``shape`` has extent 1 (keeping them)."""
    x = _node(x)
    shape = tuple(shape)
    axes = _reduced_axes(x.shape, shape)
    src = x.shape
    value = np.sum(x.value, axis=axes, keepdims=True, dtype=np.float64) if axes else x.value
    return _make("sum_to", value, (x,), lambda g, out, needs: (broadcast_to(g, src),))


def broadcast_to(x, shape) -> Node:
    """Explicit broadcast of size-1 axes; the only broadcasting in this module."""
    x = _node(x)
    shape = tuple(shape)
    _reduced_axes(shape, x.shape)
    src = x.shape
    value = np.broadcast_to(x.value, shape).copy()
    return _make("broadcast_to", value, (x,), lambda g, out, needs: (sum_to(g, src),))


def take(x, key) -> Node:
    """Basic (slice) indexing; adjoint of :func:`put`."""
    x = _node(x)
    src = x.shape
    return _make("take", x.value[key], (x,), lambda g, out, needs: (put(g, key, src),))


def put(x, key, shape) -> Node:
    """Zeros of ``shape`` with ``x`` written at ``key``; adjoint of :func:`take`."""
    x = _node(x)
    value = np.zeros(shape, dtype=working_dtype())
    value[key] = x.value
    return _make("put", value, (x,), lambda g, out, needs: (take(g, key),))


# ---------------------------------------------------------------- convolution


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def im2col(x, k: int, stride: int = 1, padding: int = 0) -> Node:
    """Unfold C x H x W into (C*k*k) x (H'*W') patch columns."""
    x = _node(x)
    c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel {k} larger than padded input dims {list(x.shape)} (padding {padding})")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xp = np.pad(x.value, ((0, 0), (padding, padding), (padding, padding))) if padding else x.value
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    src = x.shape
    return _make("im2col", cols, (x,), lambda g, out, needs: (col2im(g, src, k, stride, padding),))


def col2im(cols, shape, k: int, stride: int = 1, padding: int = 0) -> Node:
    """Scatter-add patch columns back to C x H x W; adjoint of :func:`im2col`."""
    cols = _node(cols)
    c, h, w = shape
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    g = cols.value.astype(np.float64).reshape(c, k, k, ho, wo)
    acc = np.zeros((c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            acc[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, i, j]
    if padding:
        acc = acc[:, padding:padding + h, padding:padding + w]
    return _make("col2im", acc, (cols,),
                 lambda gr, out, needs: (im2col(gr, k, stride, padding),))


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation of a C_in x H x W input with C_out x C_in x k x k kernels."""
    x, kernels = _node(x), _node(kernels)
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0] \
            or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"conv2d: input dims {list(x.shape)} incompatible with kernel dims "
                         f"{list(kernels.shape)}")
    cout, cin, k, _ = kernels.shape
    _, h, w = x.shape
    cols = im2col(x, k, stride, padding)
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    out = reshape(matmul(reshape(kernels, (cout, cin * k * k)), cols), (cout, ho, wo))
    if bias is not None:
        out = add(out, broadcast_to(reshape(bias, (cout, 1, 1)), (cout, ho, wo)))
    return out


def avg_pool2d(x, size: int = 2) -> Node:
    """Non-overlapping size x size mean pooling; trailing rows/cols are dropped."""
    x = _node(x)
    c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"avg_pool2d: input dims {list(x.shape)} smaller than pool {size}")
    if (ho * size, wo * size) != (h, w):
        x = take(x, (slice(None), slice(0, ho * size), slice(0, wo * size)))
    blocks = reshape(x, (c, ho, size, wo, size))
    pooled = sum_to(blocks, (c, ho, 1, wo, 1))
    return scale(reshape(pooled, (c, ho, wo)), 1.0 / (size * size))


# ---------------------------------------------------------------- losses


def log_softmax(logits) -> Node:
    logits = _node(logits)
    (k,) = logits.shape
    shift = constant(np.full(k, logits.value.max()))
    z = sub(logits, shift)
    lse = log(sum(exp(z)))
    return sub(z, broadcast_to(reshape(lse, (1,)), (k,)))


def softmax(logits) -> Node:
    return exp(log_softmax(logits))


def softmax_cross_entropy(logits, target) -> Node:
    """-sum(target * log softmax(logits)) for a length-K logit vector.

    ``target`` must be a probability vector; it may itself be a Node so a
    soft label can be optimized.
    """
    logits, target = _node(logits), _node(target)
    if logits.ndim != 1 or target.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: logits dims {list(logits.shape)} vs "
                         f"target dims {list(target.shape)}")
    t = target.value.astype(np.float64)
    if np.any(t < 0) or np.abs(t.sum() - 1.0) > 1e-6:
        raise ValueError("target must be nonnegative and sum to 1 within 1e-6")
    return neg(sum(mul(target, log_softmax(logits))))


def dot(a, b) -> Node:
    return sum(mul(a, b))


def sum_squares(x) -> Node:
    return sum(mul(x, x))


# ---------------------------------------------------------------- backward pass


def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Node, wrt: Iterable[Node], differentiable: bool = False,
         seed=None) -> list:
    """Adjoints of scalar ``output`` with respect to each node in ``wrt``.

    Returns arrays, or Nodes carrying their own graph when ``differentiable``
    is set.  ``seed`` replaces the unit output adjoint (vector-Jacobian
    product with a non-scalar output).
    """
    wrt = list(wrt)
    if seed is None and output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got dims {list(output.shape)}")
    order = _toposort(output) if output.requires_grad else []
    on_tape = {id(n) for n in order}
    targets = {id(n) for n in wrt}
    for i, n in enumerate(wrt):
        if id(n) not in on_tape:
            raise ValueError(f"wrt[{i}] ({n!r}) is not reachable from the output")

    # nodes that lie on some path to a requested leaf
    relevant = set()
    for n in order:
        if id(n) in targets or any(id(p) in relevant for p in n.parents):
            relevant.add(id(n))

    adj: dict[int, Node] = {}
    with recording(differentiable):
        if seed is None:
            adj[id(output)] = constant(np.ones(output.shape, dtype=working_dtype()))
        else:
            adj[id(output)] = _node(seed)
        for node in reversed(order):
            g = adj.get(id(node))
            if g is None or node.vjp is None:
                continue
            needs = tuple(p.requires_grad and id(p) in relevant for p in node.parents)
            if not any(needs):
                continue
            for p, need, gp in zip(node.parents, needs, node.vjp(g, node, needs)):
                if not need or gp is None:
                    continue
                prev = adj.get(id(p))
                adj[id(p)] = gp if prev is None else add(prev, gp)
            if id(node) not in targets:
                del adj[id(node)]

    out = []
    for n in wrt:
        g = adj.get(id(n))
        if g is None:
            g = constant(np.zeros(n.shape, dtype=working_dtype()))
        out.append(g if differentiable else g.value)
    return out


def value_and_grad(fn: Callable[..., Node]) -> Callable:
    """Wrap ``fn(*nodes) -> scalar Node`` into ``(*arrays) -> (float, [arrays])``."""

    def wrapped(*arrays):
        leaves = [variable(a) for a in arrays]
        out = fn(*leaves)
        return float(out.value), grad(out, leaves)

    return wrapped
